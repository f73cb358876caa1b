//! Loss assembly, AdamW with clipping and a linear schedule, the training
//! loop and the gradient checker.

mod gradcheck;
mod optim;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Batch, ForwardOptions, ForwardOutput, Model};
use crate::numerics::{Real, Var};

pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, GradcheckStatus, ParamCheck, MARGIN_FLOOR};
pub use optim::{clip_factor, AdamW, StepOutcome};
pub use run::{evaluate, layer_entropies, sequence_entropies, train_loop, MetricsRecord, TrainOutcome, MAX_CONSECUTIVE_SKIPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    /// Only `linear` (warmup then decay to zero).
    pub schedule: String,
    /// Weight of the commitment loss.
    pub gamma: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Validation every this many steps (0: only after the last step).
    pub eval_every: usize,
    /// Cap on validation batches per evaluation (0: whole split).
    pub eval_batches: usize,
    /// `f32` or `f64`.
    pub precision: String,
    /// Stop once a validation accuracy reaches this value.
    pub target_acc: Option<f64>,
    /// Stop after this many steps; the schedule still spans `total_steps`.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            betas: [0.9, 0.98],
            adam_eps: 1e-8,
            grad_clip: 0.1,
            warmup_steps: 100,
            total_steps: 1000,
            schedule: "linear".into(),
            gamma: 1e-4,
            batch_size: 128,
            seed: 0,
            eval_every: 0,
            eval_batches: 8,
            precision: "f32".into(),
            target_acc: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        if self.gamma.is_nan() || self.gamma < 0.0 {
            return Err(Error::config("gamma", "must be >= 0"));
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return Err(Error::config("grad_clip", "must be positive"));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be >= 0"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("betas", "each must lie in [0, 1)"));
        }
        if self.schedule != "linear" {
            return Err(Error::config("schedule", format!("unknown schedule `{}` (known: linear)", self.schedule)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be >= 1"));
        }
        if self.total_steps == 0 {
            return Err(Error::config("total_steps", "must be >= 1"));
        }
        if self.max_steps == Some(0) {
            return Err(Error::config("max_steps", "must be >= 1"));
        }
        if self.target_acc.is_some_and(|a| !(0.0..=1.0).contains(&a)) {
            return Err(Error::config("target_acc", "must lie in [0, 1]"));
        }
        if !matches!(self.precision.as_str(), "f32" | "f64") {
            return Err(Error::config("precision", "must be `f32` or `f64`"));
        }
        Ok(())
    }

    /// Linear warmup from zero, then linear decay to zero at `total_steps`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr;
        }
        let left = self.total_steps.saturating_sub(step) as f64;
        self.lr * left / (self.total_steps - self.warmup_steps) as f64
    }
}

/// Scalar parts of the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    /// Commitment loss of each layer.
    pub vq: Vec<f64>,
    /// Mean of `vq`.
    pub vq_mean: f64,
    pub correct: usize,
    pub count: usize,
}

impl LossParts {
    pub fn accuracy(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.correct as f64 / self.count as f64
        }
    }
}

pub struct LossOutput<T: Real> {
    pub forward: ForwardOutput<T>,
    pub loss: Var,
    pub parts: LossParts,
}

fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// `CE + gamma * mean_l L_VQ,l`, with the forward pass kept for backward and
/// codebook updates.
pub fn total_loss<T: Real>(
    model: &Model<T>,
    batch: &Batch,
    gamma: f64,
    opts: ForwardOptions<'_, T>,
) -> Result<LossOutput<T>> {
    let mut out = model.forward(batch, opts)?;
    let targets = batch.target_rows();
    let g = &mut out.graph;

    let logits = g.value(out.logits);
    let mut correct = 0;
    let mut count = 0;
    for (i, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            count += 1;
            correct += usize::from(argmax(logits.row(i)) == t);
        }
    }

    let ce = g.cross_entropy(out.logits, targets)?;
    let mut commits = Vec::with_capacity(out.layers.len());
    for (l, layer) in out.layers.iter().enumerate() {
        commits.push(g.commit_loss(layer.keys, &model.codebooks[l], &layer.codes)?);
    }
    let vq: Vec<f64> = commits.iter().map(|&c| g.scalar(c).as_f64()).collect();
    let vq_mean = vq.iter().sum::<f64>() / vq.len().max(1) as f64;
    let loss = if gamma == 0.0 || commits.is_empty() {
        ce
    } else {
        let mut sum = commits[0];
        for &c in &commits[1..] {
            sum = g.add(sum, c)?;
        }
        let weighted = g.scale(sum, gamma / commits.len() as f64)?;
        g.add(ce, weighted)?
    };
    let parts = LossParts {
        total: g.scalar(loss).as_f64(),
        ce: g.scalar(ce).as_f64(),
        vq,
        vq_mean,
        correct,
        count,
    };
    Ok(LossOutput {
        forward: out,
        loss,
        parts,
    })
}
