use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use longvq::numerics::flush_subnormals;
use longvq::train::GradcheckStatus;
use longvq_cli::commands;
use longvq_cli::config::{default_out_dir, Overrides, RunConfig};
use longvq_cli::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "longvq", version, about = "Train, evaluate and benchmark LongVQ models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for initialisation, data order and generated data.
    #[arg(long)]
    seed: Option<u64>,
    /// Override a configuration key, e.g. `--set model.norm=batch`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Task name (shorthand for `--set task.name=...`).
    #[arg(long)]
    task: Option<String>,
    /// Output directory (default `runs/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a task; writes metrics.jsonl, a checkpoint and report.json.
    Train(Common),
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Forward-pass wall clock against sequence length for each kernel.
    BenchScaling(Common),
    /// Per-layer attention entropy from the materialized weights.
    DiagEntropy {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Negate the backward rule of one op to exercise the checker.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Write the SSM convolution kernels of one layer as CSV.
    KernelDump {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn load(common: &Common, name: &str) -> CliResult<(RunConfig, PathBuf)> {
    let cfg = RunConfig::load(
        common.config.as_deref(),
        &Overrides {
            sets: common.sets.clone(),
            seed: common.seed,
            task: common.task.clone(),
        },
    )?;
    let out = common.out.clone().unwrap_or_else(|| default_out_dir(name));
    Ok((cfg, out))
}

fn set_threads() -> CliResult<()> {
    flush_subnormals();
    let mut pool = rayon::ThreadPoolBuilder::new().start_handler(|_| flush_subnormals());
    if let Ok(raw) = std::env::var("LONGVQ_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| CliError::Config(format!("LONGVQ_THREADS must be a positive integer, got `{raw}`")))?;
        pool = pool.num_threads(n.max(1));
    }
    pool.build_global()
        .map_err(|e| CliError::Failed(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    set_threads()?;
    match cli.command {
        Command::Train(common) => {
            let (cfg, out) = load(&common, "train")?;
            let r = commands::train(&cfg, &out)?;
            let val = r.val.as_ref().map_or(String::from("-"), |v| format!("{:.4}", v.acc));
            let test = r.test.as_ref().map_or(String::from("-"), |t| format!("{:.4}", t.acc));
            let loss = r.train.as_ref().map_or(f64::NAN, |t| t.loss);
            println!(
                "trained {} steps ({} skipped): loss {loss:.4}, val acc {val}, test acc {test}; outputs in {}",
                r.steps,
                r.skipped,
                out.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let (cfg, out) = load(&common, "eval")?;
            let r = commands::eval(&cfg, &out, &checkpoint, &split)?;
            let bpc = r.bpc.map_or(String::new(), |b| format!(", bpc {b:.4}"));
            println!("{} examples: loss {:.4}, acc {:.4}{bpc}", r.examples, r.loss, r.acc);
        }
        Command::BenchScaling(common) => {
            let (cfg, out) = load(&common, "bench-scaling")?;
            let r = commands::bench_scaling(&cfg, &out)?;
            for t in &r.timings {
                let ms: Vec<String> = t.median_ms.iter().map(|m| format!("{m:.1}")).collect();
                println!("{:<6} slope {:.3}  median ms [{}]", t.kernel, t.slope, ms.join(", "));
            }
        }
        Command::DiagEntropy { common, checkpoint } => {
            let (cfg, out) = load(&common, "diag-entropy")?;
            let r = commands::diag_entropy(&cfg, &out, checkpoint.as_deref())?;
            for (l, (m, q)) in r.mean.iter().zip(&r.query).enumerate() {
                let f = |v: &Option<f64>| v.map_or(String::from("-"), |v| format!("{v:.4}"));
                println!("layer {l}: mean entropy {}, final-row entropy {}", f(m), f(q));
            }
        }
        Command::Gradcheck { common, inject_fault } => {
            let (cfg, out) = load(&common, "gradcheck")?;
            let r = commands::gradcheck_cmd(&cfg, &out, inject_fault.as_deref())?;
            print!("{}", commands::gradcheck_table(&r));
            if r.status == GradcheckStatus::Fail {
                return Err(CliError::Failed("gradient check failed".into()));
            }
        }
        Command::KernelDump { common, checkpoint } => {
            let (cfg, out) = load(&common, "kernel-dump")?;
            let r = commands::kernel_dump(&cfg, &out, checkpoint.as_deref())?;
            println!("wrote {} channels x {} taps to {}", r.channels, r.len, r.csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
