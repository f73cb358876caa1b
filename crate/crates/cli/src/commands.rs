//! One function per subcommand. Each writes its outputs under `out` and
//! returns its report.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use longvq::model::{Model, ModelConfig};
use longvq::numerics::{Real, Rng};
use longvq::ssm::{discretize_indexed, materialize_kernel};
use longvq::tasks::{bits_per_char, build_task, Split, Task};
use longvq::train::{
    evaluate, gradcheck, sequence_entropies, train_loop, GradcheckReport, GradcheckStatus, MetricsRecord,
};
use longvq::attention::mean_entropy;
use longvq::model::ForwardOptions;
use serde::Serialize;

use crate::bench::{run_scaling, ScalingReport};
use crate::config::{section_err, RunConfig};
use crate::report::{write_report, JsonLines};
use crate::{CliError, CliResult};

fn parse_split(name: &str, field: &str) -> CliResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Config(format!(
            "invalid config field `{field}`: unknown split `{other}` (known: train, val, test)"
        ))),
    }
}

/// Validated task and the model configuration fitted to it.
fn prepare(cfg: &RunConfig) -> CliResult<(Box<dyn Task>, ModelConfig)> {
    cfg.task.validate().map_err(section_err("task"))?;
    cfg.model
        .attn
        .validate()
        .map_err(|e| CliError::from(e.in_section("attn").in_section("model")))?;
    let task = build_task(&cfg.task).map_err(section_err("task"))?;
    let mut model = cfg.model.clone();
    task.configure(&mut model);
    model.validate().map_err(section_err("model"))?;
    Ok((task, model))
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSummary {
    pub split: Split,
    pub examples: usize,
    pub loss: f64,
    pub ce: f64,
    pub vq: f64,
    pub acc: f64,
    /// Bits per character for byte-level corpora.
    pub bpc: Option<f64>,
    pub codebook_perplexity: Vec<f64>,
}

fn eval_summary<T: Real>(task: &dyn Task, model: &Model<T>, split: Split, cfg: &RunConfig) -> CliResult<EvalSummary> {
    let (parts, ppl, _) = evaluate(task, model, split, cfg.train.batch_size, 0, cfg.train.gamma)?;
    Ok(EvalSummary {
        split,
        examples: task.len(split),
        loss: parts.total,
        ce: parts.ce,
        vq: parts.vq_mean,
        acc: parts.accuracy(),
        bpc: (task.name() == "chars").then(|| bits_per_char(parts.ce)),
        codebook_perplexity: ppl,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub config: RunConfig,
    pub steps: usize,
    pub skipped: usize,
    pub reached_target: bool,
    pub train: Option<MetricsRecord>,
    pub val: Option<MetricsRecord>,
    pub test: Option<EvalSummary>,
    pub checkpoint: PathBuf,
}

fn train_typed<T: Real>(cfg: &RunConfig, task: &dyn Task, mcfg: ModelConfig, out: &Path) -> CliResult<TrainReport> {
    let mut model = Model::<T>::new(mcfg, &mut Rng::new(cfg.train.seed))?;
    std::fs::create_dir_all(out)?;
    let mut metrics = JsonLines::new(BufWriter::new(File::create(out.join("metrics.jsonl"))?));
    let mut sink_err = None;
    let outcome = train_loop(task, &mut model, &cfg.train, &mut |r| {
        if let Err(e) = metrics.write(r) {
            sink_err = Some(e.to_string());
            return Err(longvq::Error::Invalid("cannot write metrics".into()));
        }
        Ok(())
    });
    if let Some(e) = sink_err {
        return Err(CliError::Failed(e));
    }
    let outcome = outcome?;
    metrics.into_inner().flush()?;
    let checkpoint = out.join("checkpoint");
    model.save(&checkpoint)?;
    let test = if task.len(Split::Test) > 0 {
        Some(eval_summary(task, &model, Split::Test, cfg)?)
    } else {
        None
    };
    let report = TrainReport {
        config: cfg.clone(),
        steps: outcome.steps,
        skipped: outcome.skipped,
        reached_target: outcome.reached_target,
        train: outcome.last_train,
        val: outcome.last_val,
        test,
        checkpoint,
    };
    write_report(out, "train", &report)?;
    Ok(report)
}

pub fn train(cfg: &RunConfig, out: &Path) -> CliResult<TrainReport> {
    cfg.train.validate().map_err(section_err("train"))?;
    let (task, mcfg) = prepare(cfg)?;
    match cfg.train.precision.as_str() {
        "f64" => train_typed::<f64>(cfg, task.as_ref(), mcfg, out),
        _ => train_typed::<f32>(cfg, task.as_ref(), mcfg, out),
    }
}

fn load_or_init<T: Real>(
    cfg: &RunConfig,
    task: &dyn Task,
    mcfg: ModelConfig,
    checkpoint: Option<&Path>,
    seed_batch: usize,
) -> CliResult<Model<T>> {
    match checkpoint {
        Some(dir) => Ok(Model::load(dir)?),
        None => {
            let mut rng = Rng::new(cfg.train.seed);
            let mut model = Model::new(mcfg, &mut rng)?;
            let n = task.len(Split::Train).min(seed_batch.max(1));
            if n > 0 {
                let idx: Vec<usize> = (0..n).collect();
                model.init_codebooks(&task.batch(Split::Train, &idx)?, &mut rng)?;
            }
            Ok(model)
        }
    }
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path, split: &str) -> CliResult<EvalSummary> {
    let split = parse_split(split, "split")?;
    let (task, _) = prepare(cfg)?;
    let summary = match cfg.train.precision.as_str() {
        "f64" => eval_summary(task.as_ref(), &Model::<f64>::load(checkpoint)?, split, cfg)?,
        _ => eval_summary(task.as_ref(), &Model::<f32>::load(checkpoint)?, split, cfg)?,
    };
    write_report(out, "eval", &summary)?;
    Ok(summary)
}

pub fn bench_scaling(cfg: &RunConfig, out: &Path) -> CliResult<ScalingReport> {
    let report = run_scaling(&cfg.bench)?;
    write_report(out, "bench-scaling", &report)?;
    let mut csv = String::from("kernel,len,median_ms\n");
    for t in &report.timings {
        for (l, ms) in report.lengths.iter().zip(&t.median_ms) {
            csv.push_str(&format!("{},{l},{ms}\n", t.kernel));
        }
    }
    std::fs::write(out.join("scaling.csv"), csv)?;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct EntropyBatch {
    pub batch: usize,
    /// Mean over every row, per layer.
    pub mean: Vec<Option<f64>>,
    /// Mean over the final row of each sequence, per layer.
    pub query: Vec<Option<f64>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EntropyReport {
    pub split: Split,
    pub batches: Vec<EntropyBatch>,
    pub mean: Vec<Option<f64>>,
    pub query: Vec<Option<f64>>,
}

fn entropy_typed<T: Real>(
    cfg: &RunConfig,
    task: &dyn Task,
    mcfg: ModelConfig,
    checkpoint: Option<&Path>,
) -> CliResult<EntropyReport> {
    let model = load_or_init::<T>(cfg, task, mcfg, checkpoint, cfg.diag.batch_size)?;
    let mut split = parse_split(&cfg.diag.split, "diag.split")?;
    if task.len(split) == 0 {
        split = Split::Train;
    }
    let n = task.len(split);
    let bs = cfg.diag.batch_size.max(1);
    let depth = model.config.depth;
    let mut batches = Vec::new();
    let (mut all_rows, mut all_query) = (vec![Vec::new(); depth], vec![Vec::new(); depth]);
    for b in 0..cfg.diag.batches.max(1) {
        let start = b * bs;
        if start >= n {
            break;
        }
        let idx: Vec<usize> = (start..(start + bs).min(n)).collect();
        let batch = task.batch(split, &idx)?;
        let out = model.forward(
            &batch,
            ForwardOptions {
                kernel: Some("dense"),
                ..Default::default()
            },
        )?;
        let (mut rows, mut query) = (vec![Vec::new(); depth], vec![Vec::new(); depth]);
        for s in 0..batch.batch_size {
            for (l, r) in sequence_entropies(&model, &out, batch.seq_len, s)?.into_iter().enumerate() {
                query[l].push(*r.last().unwrap_or(&None));
                rows[l].extend(r);
            }
        }
        batches.push(EntropyBatch {
            batch: b,
            mean: rows.iter().map(|r| mean_entropy(r)).collect(),
            query: query.iter().map(|r| mean_entropy(r)).collect(),
        });
        for l in 0..depth {
            all_rows[l].append(&mut rows[l]);
            all_query[l].append(&mut query[l]);
        }
    }
    Ok(EntropyReport {
        split,
        batches,
        mean: all_rows.iter().map(|r| mean_entropy(r)).collect(),
        query: all_query.iter().map(|r| mean_entropy(r)).collect(),
    })
}

pub fn diag_entropy(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> CliResult<EntropyReport> {
    let (task, mcfg) = prepare(cfg)?;
    let report = match cfg.train.precision.as_str() {
        "f64" => entropy_typed::<f64>(cfg, task.as_ref(), mcfg, checkpoint)?,
        _ => entropy_typed::<f32>(cfg, task.as_ref(), mcfg, checkpoint)?,
    };
    write_report(out, "diag-entropy", &report)?;
    Ok(report)
}

/// Run the gradient check; a failed check is reported as an error after the
/// report is written.
pub fn gradcheck_cmd(cfg: &RunConfig, out: &Path, fault: Option<&str>) -> CliResult<GradcheckReport> {
    let mut opts = cfg.gradcheck.clone();
    if let Some(f) = fault {
        opts.fault = Some(f.to_string());
    }
    let report = gradcheck(&opts).map_err(section_err("gradcheck"))?;
    write_report(out, "gradcheck", &report)?;
    Ok(report)
}

pub fn gradcheck_table(report: &GradcheckReport) -> String {
    let mut s = format!("{:<32} {:>6} {:>12} {:>12}  status\n", "parameter", "numel", "max_rel_err", "max_abs_err");
    for p in &report.params {
        s.push_str(&format!(
            "{:<32} {:>6} {:>12.3e} {:>12.3e}  {}\n",
            p.name,
            p.numel,
            p.max_rel_err,
            p.max_abs_err,
            if p.pass { "ok" } else { "FAIL" }
        ));
    }
    let status = match report.status {
        GradcheckStatus::Pass => "PASS",
        GradcheckStatus::Fail => "FAIL",
        GradcheckStatus::Skip => "SKIP (no input met the assignment margin)",
    };
    s.push_str(&format!(
        "{status}: tolerance {:.0e}, margin {:.3e}, {} resamples\n",
        report.tolerance, report.margin, report.resamples
    ));
    s
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelDumpReport {
    pub layer: usize,
    pub channels: usize,
    pub len: usize,
    pub csv: PathBuf,
}

fn dump_typed<T: Real>(
    cfg: &RunConfig,
    task: &dyn Task,
    mcfg: ModelConfig,
    checkpoint: Option<&Path>,
    out: &Path,
) -> CliResult<KernelDumpReport> {
    let model = load_or_init::<T>(cfg, task, mcfg, checkpoint, 1)?;
    let layer = cfg.dump.layer;
    if layer >= model.config.depth {
        return Err(CliError::Config(format!(
            "invalid config field `dump.layer`: {layer} but the model has {} layers",
            model.config.depth
        )));
    }
    let len = if cfg.dump.len == 0 { task.seq_len() } else { cfg.dump.len };
    let p = |name: &str| model.params.get(&format!("layers.{layer}.ssm.{name}"));
    let channels = model
        .ssm_structure()
        .channels(p("log_dt")?, p("c_out")?, p("d_skip")?);
    std::fs::create_dir_all(out)?;
    let csv = out.join("kernel.csv");
    let mut w = BufWriter::new(File::create(&csv)?);
    writeln!(w, "layer,channel,t,value")?;
    for (c, ch) in channels.iter().enumerate() {
        let k = materialize_kernel(&discretize_indexed(ch, c)?, len);
        for (t, v) in k.k.iter().enumerate() {
            writeln!(w, "{layer},{c},{t},{v:e}")?;
        }
    }
    w.flush()?;
    Ok(KernelDumpReport {
        layer,
        channels: channels.len(),
        len,
        csv,
    })
}

pub fn kernel_dump(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> CliResult<KernelDumpReport> {
    let (task, mcfg) = prepare(cfg)?;
    let report = match cfg.train.precision.as_str() {
        "f64" => dump_typed::<f64>(cfg, task.as_ref(), mcfg, checkpoint, out)?,
        _ => dump_typed::<f32>(cfg, task.as_ref(), mcfg, checkpoint, out)?,
    };
    write_report(out, "kernel-dump", &report)?;
    Ok(report)
}
