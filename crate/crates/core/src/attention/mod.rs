//! Gated attention over vector-quantized keys.
//!
//! Two interchangeable [`AttentionKernel`]s compute the same attention map:
//! `dense` materializes every score and costs `O(L^2)`, `vq` exploits the
//! quantized keys and costs `O(L (S + w))`. The rest of the layer (SSM-fed
//! projections, straight-through key quantization, output gate) lives in
//! [`layer`].

mod dense;
mod entropy;
mod factored;
mod functions;
mod kernel;
pub mod layer;
mod op;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::vq::CodeStats;

pub use dense::Dense;
pub use entropy::{mean_entropy, row_entropies};
pub use factored::Factored;
pub use functions::{attention_functions, AttentionFn, Laplace, Relu2, Softmax};
pub use kernel::{attention_kernels, AttentionKernel, KernelSpec, SeqGrads, SeqView};
pub use layer::{gate_output, longvq_attention, project_inputs, FrozenKeys, GateSet, LayerContext, LayerOutput, Projections};
pub use op::AttentionCall;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttentionConfig {
    /// `softmax`, `relu2` or `laplace`.
    pub attn_fn: String,
    /// `vq` or `dense`.
    pub kernel: String,
    pub window: usize,
    pub causal: bool,
    pub z_dim: usize,
    pub v_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            attn_fn: "softmax".into(),
            kernel: "vq".into(),
            window: 8,
            causal: false,
            z_dim: 16,
            v_dim: 128,
        }
    }
}

impl AttentionConfig {
    pub fn scale(&self) -> f64 {
        1.0 / (self.z_dim as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        attention_functions()
            .get(&self.attn_fn)
            .map_err(|e| Error::config("attn_fn", e))?;
        attention_kernels::<f64>()
            .get(&self.kernel)
            .map_err(|e| Error::config("kernel", e))?;
        if self.z_dim == 0 {
            return Err(Error::config("z_dim", "must be >= 1"));
        }
        if self.v_dim == 0 {
            return Err(Error::config("v_dim", "must be >= 1"));
        }
        Ok(())
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        Ok(KernelSpec {
            attn_fn: attention_functions().get(&self.attn_fn)?,
            window: self.window,
            causal: self.causal,
            scale: self.scale(),
        })
    }
}

/// Reference attention with every score materialized.
pub fn attn_dense_oracle<T: Real>(x: &SeqView<'_, T>, spec: &KernelSpec) -> Result<Vec<T>> {
    Dense.forward(x, spec)
}

/// Linear-time attention over quantized keys.
pub fn attn_factored<T: Real>(x: &SeqView<'_, T>, spec: &KernelSpec) -> Result<Vec<T>> {
    Factored.forward(x, spec)
}

/// Code statistics of one sequence. Bidirectional: a single entry over all
/// positions. Causal: one entry per chunk of `max(window, 1)` positions,
/// covering strictly earlier chunks only.
pub fn build_code_stats<T: Real>(
    codes: &[usize],
    values: &Tensor<T>,
    size: usize,
    causal: bool,
    window: usize,
) -> Result<Vec<CodeStats<T>>> {
    let (rows, v_dim) = values.dims2()?;
    if rows != codes.len() {
        return Err(Error::shape("code_stats", format!("{} shortcodes for {rows} values", codes.len())));
    }
    if !causal {
        return Ok(vec![CodeStats::build(codes, values, size)?]);
    }
    let chunk = window.max(1);
    let mut running = CodeStats::zeros(size, v_dim);
    let mut out = Vec::new();
    for start in (0..rows).step_by(chunk) {
        out.push(running.clone());
        let end = (start + chunk).min(rows);
        running.accumulate(&codes[start..end], &values.data()[start * v_dim..end * v_dim])?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
