use std::sync::Arc;

use super::functions::AttentionFn;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::registry::Registry;

/// Settings shared by every attention kernel.
#[derive(Clone, Debug)]
pub struct KernelSpec {
    pub attn_fn: Arc<dyn AttentionFn>,
    /// Half-width of the local bias band.
    pub window: usize,
    pub causal: bool,
    pub scale: f64,
}

impl KernelSpec {
    pub fn bias_len(&self) -> usize {
        2 * self.window + 1
    }

    /// Keys processed together in causal mode.
    pub fn chunk(&self) -> usize {
        self.window.max(1)
    }

    /// Bias index for query `i` and key `j`, when the pair is in band.
    pub fn band_index(&self, i: usize, j: usize) -> Option<usize> {
        let w = self.window as isize;
        let off = j as isize - i as isize;
        (off.abs() <= w && !(self.causal && off > 0)).then_some((off + w) as usize)
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        !self.causal || j <= i
    }
}

/// One sequence worth of attention inputs. Keys are already quantized:
/// `keys[l] == codebook[codes[l]]`.
#[derive(Clone, Copy, Debug)]
pub struct SeqView<'a, T: Real> {
    pub len: usize,
    pub z_dim: usize,
    pub v_dim: usize,
    /// `len x z_dim`.
    pub queries: &'a [T],
    /// `len x z_dim`.
    pub keys: &'a [T],
    /// `len x v_dim`.
    pub values: &'a [T],
    pub codes: &'a [usize],
    /// `S x z_dim`.
    pub codebook: &'a Tensor<T>,
    /// `2w + 1` per-offset biases.
    pub bias: &'a [T],
}

impl<'a, T: Real> SeqView<'a, T> {
    pub fn validate(&self, spec: &KernelSpec) -> Result<()> {
        let (size, cz) = self.codebook.dims2()?;
        let bad = |detail: String| Err(Error::shape("attention", detail));
        if self.queries.len() != self.len * self.z_dim || self.keys.len() != self.len * self.z_dim {
            return bad(format!("queries/keys are not {}x{}", self.len, self.z_dim));
        }
        if self.values.len() != self.len * self.v_dim {
            return bad(format!("values are not {}x{}", self.len, self.v_dim));
        }
        if self.codes.len() != self.len {
            return bad(format!("{} shortcodes for {} positions", self.codes.len(), self.len));
        }
        if cz != self.z_dim {
            return bad(format!("codebook width {cz}, key width {}", self.z_dim));
        }
        if self.bias.len() != spec.bias_len() {
            return bad(format!("{} biases for window {}", self.bias.len(), spec.window));
        }
        if let Some(&s) = self.codes.iter().find(|&&s| s >= size) {
            return Err(Error::Invalid(format!("shortcode {s} out of range for {size} codes")));
        }
        Ok(())
    }

    pub fn query(&self, i: usize) -> &'a [T] {
        &self.queries[i * self.z_dim..(i + 1) * self.z_dim]
    }

    pub fn key(&self, j: usize) -> &'a [T] {
        &self.keys[j * self.z_dim..(j + 1) * self.z_dim]
    }

    pub fn value(&self, j: usize) -> &'a [T] {
        &self.values[j * self.v_dim..(j + 1) * self.v_dim]
    }
}

/// Gradients for one sequence.
#[derive(Clone, Debug)]
pub struct SeqGrads<T> {
    pub queries: Vec<T>,
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> SeqGrads<T> {
    pub fn zeros(x: &SeqView<'_, T>) -> Self {
        Self {
            queries: vec![T::zero(); x.queries.len()],
            keys: vec![T::zero(); x.keys.len()],
            values: vec![T::zero(); x.values.len()],
            bias: vec![T::zero(); x.bias.len()],
        }
    }
}

/// Strategy computing `Attn(Q, K_hat, V, bias)` for one sequence.
pub trait AttentionKernel<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// `len x v_dim` output.
    fn forward(&self, x: &SeqView<'_, T>, spec: &KernelSpec) -> Result<Vec<T>>;

    /// Gradients given the forward output and its upstream gradient.
    fn backward(&self, x: &SeqView<'_, T>, spec: &KernelSpec, out: &[T], grad: &[T]) -> Result<SeqGrads<T>>;
}

/// Registry holding the quadratic `dense` kernel and the linear-time `vq`
/// kernel.
pub fn attention_kernels<T: Real>() -> Registry<dyn AttentionKernel<T>> {
    let mut r: Registry<dyn AttentionKernel<T>> = Registry::new("attention kernel");
    r.register("dense", Arc::new(super::dense::Dense)).expect("distinct");
    r.register("vq", Arc::new(super::factored::Factored)).expect("distinct");
    r
}
