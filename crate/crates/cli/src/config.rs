//! One TOML file with a section per module, dotted `--set` overrides and
//! strict key checking.

use std::path::{Path, PathBuf};

use longvq::model::ModelConfig;
use longvq::tasks::TaskConfig;
use longvq::train::{GradcheckOptions, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagConfig {
    /// `train`, `val` or `test`.
    pub split: String,
    pub batches: usize,
    pub batch_size: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        Self {
            split: "val".into(),
            batches: 4,
            batch_size: 8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DumpConfig {
    pub layer: usize,
    /// Kernel length; 0 uses the task's sequence length.
    pub len: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskConfig,
    pub bench: BenchConfig,
    pub gradcheck: GradcheckOptions,
    pub diag: DiagConfig,
    pub dump: DumpConfig,
}

/// Command-line adjustments applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub task: Option<String>,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `path` (dotted) in `root`, creating intermediate tables.
pub fn apply_set(root: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set expects key=value, got `{assignment}`")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad key `{path}` in --set")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{k}` in `{path}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Parse a table, naming the offending key path on failure.
    pub fn from_table(table: toml::Table) -> CliResult<Self> {
        let value = toml::Value::Table(table);
        serde_path_to_error::deserialize::<_, RunConfig>(value).map_err(|e| {
            let path = e.path().to_string();
            CliError::Config(format!("invalid config field `{path}`: {}", e.inner()))
        })
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for s in &overrides.sets {
            apply_set(&mut table, s)?;
        }
        let mut cfg = Self::from_table(table)?;
        if let Some(seed) = overrides.seed {
            cfg.train.seed = seed;
            cfg.task.seed = seed;
            cfg.gradcheck.seed = seed;
            cfg.bench.seed = seed;
        }
        if let Some(task) = &overrides.task {
            cfg.task.name = task.clone();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Prefix a config error from section `section`.
pub fn section_err(section: &str) -> impl Fn(longvq::Error) -> CliError + '_ {
    move |e| CliError::from(e.in_section(section))
}

pub fn default_out_dir(command: &str) -> PathBuf {
    PathBuf::from("runs").join(command)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sets_override_nested_keys_with_typed_values() {
        let cfg = RunConfig::load(
            None,
            &Overrides {
                sets: vec![
                    "model.norm=batch".into(),
                    "model.attn.window=3".into(),
                    "train.lr=0.01".into(),
                    "model.pre_norm=true".into(),
                ],
                seed: Some(9),
                task: None,
            },
        )
        .unwrap();
        assert_eq!(cfg.model.norm, "batch");
        assert_eq!(cfg.model.attn.window, 3);
        assert_eq!(cfg.train.lr, 0.01);
        assert!(cfg.model.pre_norm);
        assert_eq!((cfg.train.seed, cfg.task.seed), (9, 9));
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = RunConfig::load(
            None,
            &Overrides {
                sets: vec!["model.attn.windw=3".into()],
                ..Default::default()
            },
        )
        .unwrap_err();
        assert!(err.to_string().contains("model.attn"), "{err}");
        assert!(err.to_string().contains("windw"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.model.depth = 2;
        cfg.task.path = Some("data".into());
        let back = RunConfig::from_table(toml::from_str(&cfg.to_toml()).unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
