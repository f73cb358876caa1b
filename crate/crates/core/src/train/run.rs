//! The training loop and evaluation, streaming one metrics record per step.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{total_loss, AdamW, LossOutput, LossParts, StepOutcome, TrainConfig};
use crate::attention::{mean_entropy, row_entropies, SeqView};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, ForwardOutput, Model};
use crate::numerics::{Real, Rng, Tensor};
use crate::tasks::{epoch_order, Split, Task};
use crate::vq::perplexity;

/// A run aborts after more consecutive non-finite steps than this.
pub const MAX_CONSECUTIVE_SKIPS: usize = 10;

const DROPOUT_STREAM: u64 = 1;
const CODEBOOK_STREAM: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub ce: f64,
    /// Mean commitment loss over layers.
    pub vq: f64,
    pub acc: f64,
    pub codebook_perplexity: Vec<f64>,
    /// Mean normalized attention entropy per layer on the batch's first
    /// sequence.
    pub attn_entropy: Vec<Option<f64>>,
    pub lr: f64,
    pub wallclock_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOutcome {
    pub steps: usize,
    pub skipped: usize,
    pub last_train: Option<MetricsRecord>,
    pub last_val: Option<MetricsRecord>,
    /// Set when training stopped at `target_acc`.
    pub reached_target: bool,
}

/// Normalized row entropies of sequence `seq` in every layer of `out`,
/// from the materialized attention weights.
pub fn sequence_entropies<T: Real>(
    model: &Model<T>,
    out: &ForwardOutput<T>,
    seq_len: usize,
    seq: usize,
) -> Result<Vec<Vec<Option<f64>>>> {
    let spec = model.config.attn.kernel_spec()?;
    let (z, v) = (model.config.attn.z_dim, model.config.attn.v_dim);
    let rows = seq * seq_len..(seq + 1) * seq_len;
    out.layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let g = &out.graph;
            let bias = model.params.get(&format!("layers.{l}.attn.local_bias"))?;
            let view = SeqView {
                len: seq_len,
                z_dim: z,
                v_dim: v,
                queries: &g.value(layer.queries).data()[rows.start * z..rows.end * z],
                keys: &g.value(layer.quantized).data()[rows.start * z..rows.end * z],
                values: &g.value(layer.values).data()[rows.start * v..rows.end * v],
                codes: &layer.codes[rows.clone()],
                codebook: model.codebooks[l].codes(),
                bias: bias.data(),
            };
            row_entropies(&view, &spec)
        })
        .collect()
}

/// Per-layer mean row entropy of the first sequence in `out`.
pub fn layer_entropies<T: Real>(model: &Model<T>, out: &ForwardOutput<T>, seq_len: usize) -> Result<Vec<Option<f64>>> {
    Ok(sequence_entropies(model, out, seq_len, 0)?.iter().map(|r| mean_entropy(r)).collect())
}

fn perplexities<T: Real>(model: &Model<T>, out: &ForwardOutput<T>) -> Vec<f64> {
    out.layers.iter().map(|l| perplexity(&l.codes, model.config.codebook_size)).collect()
}

fn is_non_finite(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. })
}

/// Mean loss parts over (up to `max_batches`) batches of `split`, in order.
pub fn evaluate<T: Real>(
    task: &dyn Task,
    model: &Model<T>,
    split: Split,
    batch_size: usize,
    max_batches: usize,
    gamma: f64,
) -> Result<(LossParts, Vec<f64>, Vec<Option<f64>>)> {
    let n = task.len(split);
    if n == 0 {
        return Err(Error::Invalid(format!("{} split is empty", split.name())));
    }
    let mut starts: Vec<usize> = (0..n).step_by(batch_size).collect();
    if max_batches > 0 {
        starts.truncate(max_batches);
    }
    let depth = model.config.depth;
    let mut sum = LossParts {
        vq: vec![0.0; depth],
        ..Default::default()
    };
    let mut codes: Vec<Vec<usize>> = vec![Vec::new(); depth];
    let mut entropy = Vec::new();
    let mut weight = 0.0;
    for (b, &s) in starts.iter().enumerate() {
        let idx: Vec<usize> = (s..(s + batch_size).min(n)).collect();
        let batch = task.batch(split, &idx)?;
        let out = total_loss(model, &batch, gamma, ForwardOptions::default())?;
        let w = idx.len() as f64;
        weight += w;
        sum.total += out.parts.total * w;
        sum.ce += out.parts.ce * w;
        for (a, v) in sum.vq.iter_mut().zip(&out.parts.vq) {
            *a += v * w;
        }
        sum.correct += out.parts.correct;
        sum.count += out.parts.count;
        for (c, layer) in codes.iter_mut().zip(&out.forward.layers) {
            c.extend_from_slice(&layer.codes);
        }
        if b == 0 {
            entropy = layer_entropies(model, &out.forward, batch.seq_len)?;
        }
    }
    sum.total /= weight;
    sum.ce /= weight;
    sum.vq.iter_mut().for_each(|v| *v /= weight);
    sum.vq_mean = sum.vq.iter().sum::<f64>() / depth as f64;
    let ppl = codes.iter().map(|c| perplexity(c, model.config.codebook_size)).collect();
    Ok((sum, ppl, entropy))
}

/// Train `model` on `task`. Each step runs forward and backward, the
/// optimizer, then the running-statistic and codebook updates from that
/// step's keys. Codebooks are seeded from the first batch. `sink` receives
/// a record per step and per evaluation.
pub fn train_loop<T: Real>(
    task: &dyn Task,
    model: &mut Model<T>,
    cfg: &TrainConfig,
    sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    let n_train = task.len(Split::Train);
    if n_train < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "train split has {n_train} examples, fewer than one batch of {}",
            cfg.batch_size
        )));
    }
    let per_epoch = n_train / cfg.batch_size;
    let root = Rng::new(cfg.seed);
    let mut dropout_rng = root.fork(DROPOUT_STREAM);
    let mut opt = AdamW::new(&model.params);
    let start = Instant::now();
    let mut outcome = TrainOutcome::default();
    let mut consecutive = 0usize;
    let mut order = Vec::new();

    let stop = cfg.max_steps.map_or(cfg.total_steps, |m| m.min(cfg.total_steps));
    for step in 0..stop {
        let (epoch, slot) = (step / per_epoch, step % per_epoch);
        if slot == 0 {
            order = epoch_order(n_train, cfg.seed, epoch as u64);
        }
        let batch = task.batch(Split::Train, &order[slot * cfg.batch_size..(slot + 1) * cfg.batch_size])?;
        if step == 0 {
            model.init_codebooks(&batch, &mut root.fork(CODEBOOK_STREAM))?;
        }
        let lr = cfg.learning_rate(step);

        let attempt = (|| -> Result<(LossOutput<T>, Vec<Tensor<T>>)> {
            let out = total_loss(
                model,
                &batch,
                cfg.gamma,
                ForwardOptions {
                    train: true,
                    grads: true,
                    rng: Some(&mut dropout_rng),
                    ..Default::default()
                },
            )?;
            let mut grads = out.forward.graph.backward(out.loss)?;
            let g: Vec<Tensor<T>> = out.forward.param_vars.iter().map(|&v| grads.take(v)).collect();
            Ok((out, g))
        })();
        let applied = match attempt {
            Ok((out, grads)) => match opt.step(&mut model.params, &grads, cfg, lr)? {
                StepOutcome::Applied { .. } => Some(out),
                StepOutcome::Skipped => None,
            },
            Err(e) if is_non_finite(&e) => None,
            Err(e) => return Err(e),
        };
        let Some(out) = applied else {
            consecutive += 1;
            outcome.skipped += 1;
            eprintln!("step {step}: non-finite loss or gradient, update skipped");
            if consecutive > MAX_CONSECUTIVE_SKIPS {
                return Err(Error::Invalid(format!(
                    "aborting after {consecutive} consecutive non-finite steps"
                )));
            }
            continue;
        };
        consecutive = 0;

        let fwd = &out.forward;
        let record = MetricsRecord {
            step,
            split: Split::Train.name().into(),
            loss: out.parts.total,
            ce: out.parts.ce,
            vq: out.parts.vq_mean,
            acc: out.parts.accuracy(),
            codebook_perplexity: perplexities(model, fwd),
            attn_entropy: layer_entropies(model, fwd, batch.seq_len)?,
            lr,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        for (i, t) in &fwd.buffer_updates {
            *model.buffers.tensor_mut(*i) = t.clone();
        }
        for (l, layer) in fwd.layers.iter().enumerate() {
            model.codebooks[l].ema_update(fwd.graph.value(layer.keys), &layer.codes)?;
        }
        sink(&record)?;
        outcome.last_train = Some(record);
        outcome.steps += 1;

        let last = step + 1 == stop;
        let eval_due = last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0);
    if eval_due && task.len(Split::Val) > 0 {
            let (parts, ppl, ent) =
                evaluate(task, model, Split::Val, cfg.batch_size, cfg.eval_batches, cfg.gamma)?;
            let record = MetricsRecord {
                step,
                split: Split::Val.name().into(),
                loss: parts.total,
                ce: parts.ce,
                vq: parts.vq_mean,
                acc: parts.accuracy(),
                codebook_perplexity: ppl,
                attn_entropy: ent,
                lr,
                wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
            };
            sink(&record)?;
            let reached = cfg.target_acc.is_some_and(|t| record.acc >= t);
            outcome.last_val = Some(record);
            if reached {
                outcome.reached_target = true;
                break;
            }
        }
    }
    Ok(outcome)
}
