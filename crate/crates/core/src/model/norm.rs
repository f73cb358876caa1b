//! Normalization layers, selectable by name.

use std::sync::Arc;

use crate::error::Result;
use crate::numerics::norm_ops::{group_moments, Axis};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::registry::Registry;

pub const NORM_EPS: f64 = 1e-5;
pub const SCALE_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// A named tensor a norm owns, with its constant initial value.
#[derive(Clone, Debug)]
pub struct Slot {
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub init: f64,
}

pub trait Norm<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Trainable tensors.
    fn params(&self, d: usize) -> Vec<Slot>;

    /// Non-trainable running state.
    fn buffers(&self, _d: usize) -> Vec<Slot> {
        Vec::new()
    }

    /// Normalize the `rows x d` input. In training mode, returns replacement
    /// buffer values alongside the output.
    fn apply(
        &self,
        g: &mut Graph<T>,
        x: Var,
        params: &[Var],
        buffers: &[Tensor<T>],
        train: bool,
    ) -> Result<(Var, Option<Vec<Tensor<T>>>)>;
}

/// Per-position standardization over channels with a learned gain and bias.
pub struct LayerNorm;

impl<T: Real> Norm<T> for LayerNorm {
    fn name(&self) -> &'static str {
        "layer"
    }

    fn params(&self, d: usize) -> Vec<Slot> {
        vec![
            Slot { name: "gain", shape: vec![d], init: 1.0 },
            Slot { name: "bias", shape: vec![d], init: 0.0 },
        ]
    }

    fn apply(&self, g: &mut Graph<T>, x: Var, p: &[Var], _: &[Tensor<T>], _: bool) -> Result<(Var, Option<Vec<Tensor<T>>>)> {
        let y = g.standardize(x, Axis::Rows, NORM_EPS)?;
        Ok((g.affine_cols(y, p[0], p[1])?, None))
    }
}

/// `g * y / ||y||` per position with a single learned scalar `g`.
pub struct ScaleNorm;

impl<T: Real> Norm<T> for ScaleNorm {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn params(&self, d: usize) -> Vec<Slot> {
        // sqrt(d) gives unit root-mean-square outputs, like the other norms.
        vec![Slot { name: "gain", shape: vec![1], init: (d as f64).sqrt() }]
    }

    fn apply(&self, g: &mut Graph<T>, x: Var, p: &[Var], _: &[Tensor<T>], _: bool) -> Result<(Var, Option<Vec<Tensor<T>>>)> {
        let y = g.unit_rows(x, SCALE_NORM_EPS)?;
        Ok((g.scale_by(y, p[0])?, None))
    }
}

/// Per-channel standardization over all positions of the batch. Evaluation
/// uses running estimates.
pub struct BatchNorm;

impl<T: Real> Norm<T> for BatchNorm {
    fn name(&self) -> &'static str {
        "batch"
    }

    fn params(&self, d: usize) -> Vec<Slot> {
        vec![
            Slot { name: "gain", shape: vec![d], init: 1.0 },
            Slot { name: "bias", shape: vec![d], init: 0.0 },
        ]
    }

    fn buffers(&self, d: usize) -> Vec<Slot> {
        vec![
            Slot { name: "running_mean", shape: vec![d], init: 0.0 },
            Slot { name: "running_var", shape: vec![d], init: 1.0 },
        ]
    }

    fn apply(&self, g: &mut Graph<T>, x: Var, p: &[Var], buffers: &[Tensor<T>], train: bool) -> Result<(Var, Option<Vec<Tensor<T>>>)> {
        if train {
            let xv = g.value(x);
            let rows = xv.rows();
            let (mean, var) = group_moments(xv, Axis::Cols)?;
            let m = T::cast(BATCH_NORM_MOMENTUM);
            let keep = T::one() - m;
            let unbias = if rows > 1 { T::cast(rows as f64 / (rows as f64 - 1.0)) } else { T::one() };
            let run_mean = buffers[0].zip_map(&Tensor::new(buffers[0].shape(), mean)?, |o, b| keep * o + m * b)?;
            let run_var = buffers[1].zip_map(&Tensor::new(buffers[1].shape(), var)?, |o, b| keep * o + m * b * unbias)?;
            let y = g.standardize(x, Axis::Cols, NORM_EPS)?;
            Ok((g.affine_cols(y, p[0], p[1])?, Some(vec![run_mean, run_var])))
        } else {
            let mult: Vec<T> = buffers[1].data().iter().map(|&v| T::one() / (v + T::cast(NORM_EPS)).sqrt()).collect();
            let y = g.fixed_col_affine(x, buffers[0].data(), &mult)?;
            Ok((g.affine_cols(y, p[0], p[1])?, None))
        }
    }
}

pub fn norm_kinds<T: Real>() -> Registry<dyn Norm<T>> {
    let mut r: Registry<dyn Norm<T>> = Registry::new("norm");
    for n in [Arc::new(LayerNorm) as Arc<dyn Norm<T>>, Arc::new(ScaleNorm), Arc::new(BatchNorm)] {
        r.register(n.name(), n).expect("distinct");
    }
    r
}
