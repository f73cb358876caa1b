//! Reverse-mode gradients against central differences on a tiny model.
//!
//! Quantization is piecewise constant, so differences are taken through a
//! surrogate that freezes each key's code and replaces the quantized key by
//! `K + (C_z - K_0)`. Its gradient equals the straight-through gradient at
//! the base point, and the dense kernel keeps the reference independent of
//! the factored backward.

use serde::{Deserialize, Serialize};

use super::total_loss;
use crate::attention::FrozenKeys;
use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOptions, Inputs, Model, ModelConfig, Targets};
use crate::numerics::{finite_diff, max_abs_diff, Rng, Tensor};

/// Smallest accepted gap between the nearest and second-nearest codeword
/// distance of any key.
pub const MARGIN_FLOOR: f64 = 1e-3;

/// Below this gradient magnitude errors are measured absolutely.
const SCALE_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckOptions {
    pub model: ModelConfig,
    pub seq_len: usize,
    pub batch_size: usize,
    pub gamma: f64,
    /// Finite-difference step.
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub max_resamples: usize,
    /// Negate the backward rule of this op (harness self-test).
    pub fault: Option<String>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        let mut model = ModelConfig {
            depth: 1,
            d_model: 8,
            d_ffn: 16,
            codebook_size: 4,
            ssm_state: 4,
            vocab: 8,
            classes: 3,
            ..Default::default()
        };
        model.attn.z_dim = 4;
        model.attn.v_dim = 8;
        model.attn.window = 2;
        Self {
            model,
            seq_len: 16,
            batch_size: 2,
            gamma: 0.5,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            max_resamples: 100,
            fault: None,
        }
    }
}

impl GradcheckOptions {
    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| e.in_section("model"))?;
        if self.model.d_model > 8 {
            return Err(Error::config("model.d_model", "gradient checks need d_model <= 8"));
        }
        if self.model.codebook_size > 4 {
            return Err(Error::config("model.codebook_size", "gradient checks need codebook_size <= 4"));
        }
        if self.seq_len == 0 || self.seq_len > 16 {
            return Err(Error::config("seq_len", "gradient checks need 1 <= seq_len <= 16"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.step.is_nan() || self.step <= 0.0 {
            return Err(Error::config("step", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradcheckStatus {
    Pass,
    Fail,
    /// No input met the assignment-margin guard.
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    /// `max |analytic - numeric| / max(max |numeric|, 1e-8)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub status: GradcheckStatus,
    pub tolerance: f64,
    pub resamples: usize,
    pub margin: f64,
    pub params: Vec<ParamCheck>,
}

fn sample_batch(cfg: &ModelConfig, batch_size: usize, len: usize, rng: &mut Rng) -> Result<Batch> {
    let rows = batch_size * len;
    let inputs = match cfg.input_kind()? {
        crate::model::InputKind::Tokens => Inputs::Tokens((0..rows).map(|_| rng.below(cfg.vocab)).collect()),
        crate::model::InputKind::Channels => Inputs::Channels {
            values: (0..rows * cfg.channels).map(|_| rng.normal()).collect(),
            channels: cfg.channels,
        },
    };
    let out = cfg.out_dim()?;
    let targets = match cfg.head_kind()? {
        crate::model::HeadKind::Classify => Targets::Classes((0..batch_size).map(|_| rng.below(out)).collect()),
        crate::model::HeadKind::Lm => Targets::Tokens((0..rows).map(|_| Some(rng.below(out))).collect()),
    };
    Ok(Batch {
        inputs,
        targets,
        batch_size,
        seq_len: len,
    })
}

fn train_mode<'a>() -> ForwardOptions<'a, f64> {
    ForwardOptions {
        train: true,
        ..Default::default()
    }
}

pub fn gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    opts.validate()?;
    let cfg = ModelConfig {
        dropout: 0.0,
        ..opts.model.clone()
    };
    let mut rng = Rng::new(opts.seed);
    let mut model = Model::<f64>::new(cfg.clone(), &mut rng)?;
    let seed_batch = sample_batch(&cfg, opts.batch_size, opts.seq_len, &mut rng)?;
    model.init_codebooks(&seed_batch, &mut rng)?;

    let mut found = None;
    let mut best_margin = f64::NEG_INFINITY;
    for attempt in 0..=opts.max_resamples {
        let batch = sample_batch(&cfg, opts.batch_size, opts.seq_len, &mut rng)?;
        let out = model.forward(&batch, train_mode())?;
        let mut margin = f64::INFINITY;
        for (l, layer) in out.layers.iter().enumerate() {
            margin = margin.min(model.codebooks[l].assignment_margin(out.graph.value(layer.keys))?);
        }
        best_margin = best_margin.max(margin);
        if margin > MARGIN_FLOOR {
            found = Some((batch, attempt, margin));
            break;
        }
    }
    let Some((batch, resamples, margin)) = found else {
        return Ok(GradcheckReport {
            status: GradcheckStatus::Skip,
            tolerance: opts.tolerance,
            resamples: opts.max_resamples,
            margin: best_margin,
            params: Vec::new(),
        });
    };

    let mut out = total_loss(
        &model,
        &batch,
        opts.gamma,
        ForwardOptions {
            grads: true,
            ..train_mode()
        },
    )?;
    if let Some(op) = &opts.fault {
        out.forward.graph.inject_fault(op.clone());
    }
    let mut grads = out.forward.graph.backward(out.loss)?;
    let analytic: Vec<Tensor<f64>> = out.forward.param_vars.iter().map(|&v| grads.take(v)).collect();

    let frozen: Vec<FrozenKeys<f64>> = out
        .forward
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let keys = out.forward.graph.value(layer.keys);
            let target = model.codebooks[l].gather(&layer.codes)?;
            Ok(FrozenKeys {
                codes: layer.codes.clone(),
                offset: target.zip_map(keys, |c, k| c - k)?,
            })
        })
        .collect::<Result<_>>()?;

    let gamma = opts.gamma;
    let base: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    let mut work = model.clone();
    let numeric = finite_diff(
        |p| {
            for (i, t) in p.iter().enumerate() {
                work.params.tensor_mut(i).data_mut().copy_from_slice(t.data());
            }
            let fwd = ForwardOptions {
                kernel: Some("dense"),
                frozen_keys: Some(&frozen),
                ..train_mode()
            };
            total_loss(&work, &batch, gamma, fwd).map_or(f64::NAN, |o| o.parts.total)
        },
        &base,
        opts.step,
    );

    let params: Vec<ParamCheck> = analytic
        .iter()
        .zip(&numeric)
        .enumerate()
        .map(|(i, (a, n))| {
            let abs = max_abs_diff(a.data(), n.data());
            let scale = n.max_abs().max(SCALE_FLOOR);
            let rel = if abs.is_nan() { f64::INFINITY } else { abs / scale };
            ParamCheck {
                name: model.params.name(i).to_string(),
                numel: a.len(),
                max_rel_err: rel,
                max_abs_err: abs,
                pass: rel < opts.tolerance,
            }
        })
        .collect();
    let status = if params.iter().all(|p| p.pass) {
        GradcheckStatus::Pass
    } else {
        GradcheckStatus::Fail
    };
    Ok(GradcheckReport {
        status,
        tolerance: opts.tolerance,
        resamples,
        margin,
        params,
    })
}
