//! The full gated layer: SSM-fed projections, quantized keys, attention and
//! the output gate.

use std::sync::Arc;

use super::kernel::{AttentionKernel, KernelSpec};
use super::op::AttentionCall;
use crate::error::Result;
use crate::numerics::{Graph, Real, Rng, Tensor, Var};
use crate::ssm::SsmVars;
use crate::vq::Codebook;

/// Parameter handles of one layer.
#[derive(Clone, Copy, Debug)]
pub struct GateSet {
    pub ssm: SsmVars,
    pub w_ga: Var,
    pub b_ga: Var,
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_go: Var,
    pub b_go: Var,
    pub w_out: Var,
    pub b_out: Var,
    pub local_bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct Projections {
    /// Shared representation `silu(SSM(X))`.
    pub z: Var,
    /// Attention output gate.
    pub ga: Var,
    pub q: Var,
    pub k: Var,
    pub v: Var,
}

/// `Z = silu(SSM(X))` (or `silu(X)` when `ssm_matrix` is `None`), then
/// `G_a = silu(Z W_ga)`, `Q = Z W_q`, `K = Z W_k` and `V = silu(X W_v)`.
pub fn project_inputs<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    gates: &GateSet,
    ssm_matrix: Option<&[f64]>,
    seq_len: usize,
) -> Result<Projections> {
    let mixed = match ssm_matrix {
        Some(a) => g.ssm_conv(x, gates.ssm, a, seq_len)?,
        None => x,
    };
    let z = g.silu(mixed)?;
    let ga = g.linear(z, gates.w_ga, Some(gates.b_ga))?;
    let ga = g.silu(ga)?;
    let q = g.linear(z, gates.w_q, Some(gates.b_q))?;
    let k = g.linear(z, gates.w_k, Some(gates.b_k))?;
    let v = g.linear(x, gates.w_v, Some(gates.b_v))?;
    let v = g.silu(v)?;
    Ok(Projections { z, ga, q, k, v })
}

/// `O = G_o * ((G_a * attn) W_out + b_out) + (1 - G_o) * residual` with
/// `G_o = sigmoid(gate_input W_go + b_go)`.
pub fn gate_output<T: Real>(
    g: &mut Graph<T>,
    gate_input: Var,
    residual: Var,
    attn: Var,
    ga: Var,
    gates: &GateSet,
) -> Result<Var> {
    let gated = g.mul(ga, attn)?;
    let proj = g.linear(gated, gates.w_out, Some(gates.b_out))?;
    let go = g.linear(gate_input, gates.w_go, Some(gates.b_go))?;
    let go = g.sigmoid(go)?;
    g.gate_mix(go, proj, residual)
}

/// Keys replaced by `K + offset` with fixed shortcodes, so the quantized
/// value varies smoothly with `K` around a base point. Used to take finite
/// differences through the straight-through path.
#[derive(Clone, Debug)]
pub struct FrozenKeys<T: Real> {
    pub codes: Vec<usize>,
    pub offset: Tensor<T>,
}

pub struct LayerContext<'a, T: Real> {
    pub kernel: Arc<dyn AttentionKernel<T>>,
    pub spec: KernelSpec,
    pub codebook: &'a Codebook<T>,
    pub seq_len: usize,
    /// Shared SSM state matrix; `None` ablates the SSM branch.
    pub ssm_matrix: Option<&'a [f64]>,
    pub frozen_keys: Option<&'a FrozenKeys<T>>,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub out: Var,
    pub queries: Var,
    /// Keys before quantization.
    pub keys: Var,
    /// Keys as seen by attention.
    pub quantized: Var,
    pub values: Var,
    pub codes: Vec<usize>,
}

fn dropout_mask<T: Real>(shape: &[usize], rate: f64, rng: &mut Rng) -> Tensor<T> {
    let keep = T::cast(1.0 / (1.0 - rate));
    Tensor::from_fn(shape, |_| if rng.uniform() < rate { T::zero() } else { keep })
}

/// One gated attention layer. Projections read `input`; the output gate
/// mixes with `residual` (the same node in post-norm blocks).
pub fn longvq_attention<T: Real>(
    g: &mut Graph<T>,
    input: Var,
    residual: Var,
    gates: &GateSet,
    ctx: &LayerContext<'_, T>,
    rng: Option<&mut Rng>,
) -> Result<LayerOutput> {
    let p = project_inputs(g, input, gates, ctx.ssm_matrix, ctx.seq_len)?;
    let (khat, codes) = match ctx.frozen_keys {
        Some(frozen) => {
            let off = g.constant(frozen.offset.clone());
            (g.add(p.k, off)?, frozen.codes.clone())
        }
        None => g.quantize_st(p.k, ctx.codebook)?,
    };
    let call = AttentionCall {
        kernel: ctx.kernel.clone(),
        spec: ctx.spec.clone(),
        codebook: ctx.codebook.codes().clone(),
        codes: codes.clone(),
        seq_len: ctx.seq_len,
    };
    let mut attn = g.attention(p.q, khat, p.v, gates.local_bias, call)?;
    if let (Some(rng), true) = (rng, ctx.dropout > 0.0) {
        let mask = dropout_mask(g.value(attn).shape(), ctx.dropout, rng);
        attn = g.apply_mask(attn, mask)?;
    }
    let out = gate_output(g, input, residual, attn, p.ga, gates)?;
    Ok(LayerOutput {
        out,
        queries: p.q,
        keys: p.k,
        quantized: khat,
        values: p.v,
        codes,
    })
}
