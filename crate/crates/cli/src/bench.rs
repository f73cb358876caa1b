//! Wall-clock scaling of one forward pass with the dense and the factored
//! attention kernel.

use std::time::Instant;

use longvq::model::{Batch, ForwardOptions, Inputs, Model, ModelConfig, Targets};
use longvq::numerics::{flush_subnormals, Real, Rng};
use serde::{Deserialize, Serialize};

use crate::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub kernels: Vec<String>,
    pub d_model: usize,
    pub codebook_size: usize,
    pub window: usize,
    pub z_dim: usize,
    pub v_dim: usize,
    pub attn_fn: String,
    /// Worker threads for the measurement (1 keeps slopes comparable).
    pub threads: usize,
    pub precision: String,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            lengths: vec![1024, 2048, 4096, 8192],
            reps: 5,
            kernels: vec!["dense".into(), "vq".into()],
            d_model: 64,
            codebook_size: 512,
            window: 64,
            z_dim: 16,
            v_dim: 128,
            attn_fn: "softmax".into(),
            threads: 1,
            precision: "f32".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelTiming {
    pub kernel: String,
    /// Median over repetitions, per length.
    pub median_ms: Vec<f64>,
    /// Least-squares slope of log(time) against log(length).
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub lengths: Vec<usize>,
    pub reps: usize,
    pub threads: usize,
    pub timings: Vec<KernelTiming>,
}

impl ScalingReport {
    pub fn timing(&self, kernel: &str) -> Option<&KernelTiming> {
        self.timings.iter().find(|t| t.kernel == kernel)
    }

    /// Median time of `kernel` at `len`.
    pub fn median_at(&self, kernel: &str, len: usize) -> Option<f64> {
        let i = self.lengths.iter().position(|&l| l == len)?;
        Some(self.timing(kernel)?.median_ms[i])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench_model_config(cfg: &BenchConfig) -> ModelConfig {
    let mut m = ModelConfig {
        depth: 1,
        d_model: cfg.d_model,
        d_ffn: 2 * cfg.d_model,
        codebook_size: cfg.codebook_size,
        ..Default::default()
    };
    m.attn.window = cfg.window;
    m.attn.z_dim = cfg.z_dim;
    m.attn.v_dim = cfg.v_dim;
    m.attn.attn_fn = cfg.attn_fn.clone();
    m
}

fn time_forward<T: Real>(cfg: &BenchConfig) -> CliResult<ScalingReport> {
    let mcfg = bench_model_config(cfg);
    mcfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let model = Model::<T>::new(mcfg.clone(), &mut rng)?;
    let mut timings = Vec::new();
    for kernel in &cfg.kernels {
        let mut medians = Vec::new();
        for &len in &cfg.lengths {
            let batch = Batch {
                inputs: Inputs::Tokens((0..len).map(|_| rng.below(mcfg.vocab)).collect()),
                targets: Targets::Classes(vec![0]),
                batch_size: 1,
                seq_len: len,
            };
            let run = || {
                model.forward(
                    &batch,
                    ForwardOptions {
                        kernel: Some(kernel),
                        ..Default::default()
                    },
                )
            };
            run()?;
            let mut times = Vec::with_capacity(cfg.reps);
            for _ in 0..cfg.reps.max(1) {
                let t0 = Instant::now();
                let out = run()?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
                drop(out);
            }
            medians.push(median(times));
        }
        let lens: Vec<f64> = cfg.lengths.iter().map(|&l| l as f64).collect();
        timings.push(KernelTiming {
            kernel: kernel.clone(),
            slope: log_log_slope(&lens, &medians),
            median_ms: medians,
        });
    }
    Ok(ScalingReport {
        lengths: cfg.lengths.clone(),
        reps: cfg.reps,
        threads: cfg.threads,
        timings,
    })
}

/// Time every kernel at every length inside a pool of `cfg.threads`
/// workers.
pub fn run_scaling(cfg: &BenchConfig) -> CliResult<ScalingReport> {
    if cfg.lengths.len() < 2 {
        return Err(crate::CliError::Config(
            "invalid config field `bench.lengths`: needs at least two lengths".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .start_handler(|_| flush_subnormals())
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| crate::CliError::Run(longvq::Error::Invalid(e.to_string())))?;
    pool.install(|| match cfg.precision.as_str() {
        "f64" => time_forward::<f64>(cfg),
        "f32" => time_forward::<f32>(cfg),
        other => Err(crate::CliError::Config(format!(
            "invalid config field `bench.precision`: unknown precision `{other}`"
        ))),
    })
}
