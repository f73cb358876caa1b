//! AdamW with global-norm clipping and decoupled weight decay.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::{Real, Tensor};

/// Factor applied to every gradient so the global norm is at most `clip`.
pub fn clip_factor(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64, clip_factor: f64 },
    /// Non-finite gradients; nothing changed.
    Skipped,
}

#[derive(Clone, Debug)]
pub struct AdamW<T: Real> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clip, then one AdamW update at rate `lr`. Weight decay applies to
    /// matrices only.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], cfg: &TrainConfig, lr: f64) -> Result<StepOutcome> {
        if grads.len() != params.len() {
            return Err(Error::Invalid(format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        let sq: f64 = grads.iter().map(|g| g.sq_norm().as_f64()).sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Ok(StepOutcome::Skipped);
        }
        let factor = clip_factor(norm, cfg.grad_clip);
        self.t += 1;
        let [b1, b2] = cfg.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (b1t, b2t, f) = (T::cast(b1), T::cast(b2), T::cast(factor));
        let (one, eps) = (T::one(), T::cast(cfg.adam_eps));
        for (i, p) in params.tensors_mut().enumerate() {
            let decay = if p.shape().len() >= 2 { T::cast(1.0 - lr * cfg.weight_decay) } else { one };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let (inv_c1, inv_c2) = (T::cast(1.0 / c1), T::cast(1.0 / c2));
            let rate = T::cast(lr);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                let g = g * f;
                *m = b1t * *m + (one - b1t) * g;
                *v = b2t * *v + (one - b2t) * g * g;
                let step = (*m * inv_c1) / ((*v * inv_c2).sqrt() + eps);
                *w = *w * decay - rate * step;
            }
        }
        Ok(StepOutcome::Applied {
            grad_norm: norm,
            clip_factor: factor,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[&[f64]]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (i, v) in values.iter().enumerate() {
            s.add(format!("p{i}"), Tensor::from_f64(&[v.len()], v).unwrap()).unwrap();
        }
        s
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            weight_decay: 0.0,
            betas: [0.0, 0.0],
            adam_eps: 1e-12,
            grad_clip: 0.1,
            ..Default::default()
        }
    }

    #[test]
    fn unit_norm_is_clipped_to_a_tenth() {
        assert!((clip_factor(1.0, 0.1) - 0.1).abs() < 1e-15);
        assert_eq!(clip_factor(0.05, 0.1), 1.0);
    }

    #[test]
    fn degenerate_moments_give_sign_steps() {
        let mut p = store(&[&[1.0, -2.0], &[0.5]]);
        let grads = vec![Tensor::from_f64(&[2], &[0.6, -0.0008]).unwrap(), Tensor::from_f64(&[1], &[0.8]).unwrap()];
        let mut opt = AdamW::new(&p);
        let out = opt.step(&mut p, &grads, &cfg(), 0.01).unwrap();
        assert_eq!(
            out,
            StepOutcome::Applied {
                grad_norm: (0.36f64 + 0.00000064 + 0.64).sqrt(),
                clip_factor: 0.1 / (0.36f64 + 0.00000064 + 0.64).sqrt()
            }
        );
        // lr * g / (|g| + eps) with the clipped g.
        let want = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        let got: Vec<f64> = p.iter().flat_map(|(_, t)| t.data().to_vec()).collect();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "{got:?}");
        }
    }

    #[test]
    fn scaling_gradients_above_the_threshold_changes_nothing() {
        let run = |s: f64| {
            let mut p = store(&[&[0.3, 0.1, -0.7]]);
            let mut opt = AdamW::new(&p);
            let c = TrainConfig {
                weight_decay: 0.1,
                ..Default::default()
            };
            for k in 0..3 {
                let g = Tensor::from_f64(&[3], &[1.0 * s, -2.0 * s, 0.5 * s * k as f64]).unwrap();
                opt.step(&mut p, &[g], &c, 0.01).unwrap();
            }
            p.tensor(0).data().to_vec()
        };
        let (a, b) = (run(1.0), run(10.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_gradients_skip() {
        let mut p = store(&[&[1.0]]);
        let before = p.checksum();
        let mut opt = AdamW::new(&p);
        let out = opt.step(&mut p, &[Tensor::from_f64(&[1], &[f64::NAN]).unwrap()], &cfg(), 0.1).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(p.checksum(), before);
        assert_eq!(opt.steps(), 0);
    }

    #[test]
    fn decay_is_decoupled_and_skips_vectors() {
        let mut p = ParamStore::<f64>::new();
        p.add("w", Tensor::full(&[1, 1], 2.0)).unwrap();
        p.add("b", Tensor::full(&[1], 2.0)).unwrap();
        let mut opt = AdamW::new(&p);
        let c = TrainConfig {
            weight_decay: 0.5,
            ..cfg()
        };
        opt.step(&mut p, &[Tensor::zeros(&[1, 1]), Tensor::zeros(&[1])], &c, 0.1).unwrap();
        assert!((p.tensor(0).data()[0] - 2.0 * 0.95).abs() < 1e-15);
        assert_eq!(p.tensor(1).data()[0], 2.0);
    }
}
