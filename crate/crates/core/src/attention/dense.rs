//! Quadratic reference kernel. Scores are materialized one block of query
//! rows at a time, so memory stays `O(block * L)`.

use rayon::prelude::*;

use super::kernel::{AttentionKernel, KernelSpec, SeqGrads, SeqView};
use crate::error::Result;
use crate::numerics::linalg::gemm;
use crate::numerics::Real;

const BLOCK: usize = 64;

pub struct Dense;

struct BlockWeights<T> {
    /// `rows x L` weights, zero where masked.
    w: Vec<T>,
    /// Derivatives of the weights with respect to the logits.
    dw: Vec<T>,
    den: Vec<T>,
}

fn block_weights<T: Real>(x: &SeqView<'_, T>, spec: &KernelSpec, r0: usize, r1: usize, grads: bool) -> BlockWeights<T> {
    let (len, rows) = (x.len, r1 - r0);
    let mut logits = vec![T::zero(); rows * len];
    gemm(
        false,
        true,
        rows,
        len,
        x.z_dim,
        T::cast(spec.scale),
        &x.queries[r0 * x.z_dim..r1 * x.z_dim],
        x.keys,
        T::zero(),
        &mut logits,
    );
    let f = &spec.attn_fn;
    let mut w = vec![T::zero(); rows * len];
    let mut dw = if grads { vec![T::zero(); rows * len] } else { Vec::new() };
    let mut den = vec![T::one(); rows];
    for r in 0..rows {
        let i = r0 + r;
        let row = &mut logits[r * len..(r + 1) * len];
        let end = if spec.causal { i + 1 } else { len };
        for (j, l) in row.iter_mut().enumerate().take(end) {
            if let Some(o) = spec.band_index(i, j) {
                *l = *l + x.bias[o];
            }
        }
        let shift = if f.normalized() {
            row[..end].iter().fold(T::neg_infinity(), |a, &b| a.max(b)).as_f64()
        } else {
            0.0
        };
        let mut total = T::zero();
        for j in 0..end {
            let arg = row[j].as_f64() - shift;
            let wt = T::cast(f.weight(arg));
            w[r * len + j] = wt;
            total = total + wt;
            if grads {
                dw[r * len + j] = T::cast(f.weight_grad(arg));
            }
        }
        if f.normalized() {
            den[r] = total;
        }
    }
    BlockWeights { w, dw, den }
}

impl<T: Real> AttentionKernel<T> for Dense {
    fn name(&self) -> &'static str {
        "dense"
    }

    fn forward(&self, x: &SeqView<'_, T>, spec: &KernelSpec) -> Result<Vec<T>> {
        x.validate(spec)?;
        let v = x.v_dim;
        let mut out = vec![T::zero(); x.len * v];
        if x.len == 0 || v == 0 {
            return Ok(out);
        }
        out.par_chunks_mut(BLOCK * v).enumerate().for_each(|(b, chunk)| {
            let r0 = b * BLOCK;
            let r1 = (r0 + BLOCK).min(x.len);
            let bw = block_weights(x, spec, r0, r1, false);
            gemm(false, false, r1 - r0, v, x.len, T::one(), &bw.w, x.values, T::zero(), chunk);
            for (r, row) in chunk.chunks_mut(v).enumerate() {
                let inv = T::one() / bw.den[r];
                row.iter_mut().for_each(|o| *o = *o * inv);
            }
        });
        Ok(out)
    }

    fn backward(&self, x: &SeqView<'_, T>, spec: &KernelSpec, out: &[T], grad: &[T]) -> Result<SeqGrads<T>> {
        x.validate(spec)?;
        let (len, z, v) = (x.len, x.z_dim, x.v_dim);
        let scale = T::cast(spec.scale);
        let mut gr = SeqGrads::zeros(x);
        let normalized = spec.attn_fn.normalized();
        for r0 in (0..len).step_by(BLOCK) {
            let r1 = (r0 + BLOCK).min(len);
            let rows = r1 - r0;
            let bw = block_weights(x, spec, r0, r1, true);
            let mut gn = grad[r0 * v..r1 * v].to_vec();
            let mut gd = vec![T::zero(); rows];
            if normalized {
                for r in 0..rows {
                    let inv = T::one() / bw.den[r];
                    let g = &mut gn[r * v..(r + 1) * v];
                    let o = &out[(r0 + r) * v..(r0 + r + 1) * v];
                    gd[r] = -g.iter().zip(o).fold(T::zero(), |a, (&p, &q)| a + p * q) * inv;
                    g.iter_mut().for_each(|e| *e = *e * inv);
                }
            }
            // dlogit_ij = w'_ij * (gn_i . v_j + gd_i)
            let mut dl = vec![T::zero(); rows * len];
            gemm(false, true, rows, len, v, T::one(), &gn, x.values, T::zero(), &mut dl);
            for r in 0..rows {
                let i = r0 + r;
                for j in 0..len {
                    let e = &mut dl[r * len + j];
                    if spec.allowed(i, j) {
                        *e = bw.dw[r * len + j] * (*e + gd[r]);
                        if let Some(o) = spec.band_index(i, j) {
                            gr.bias[o] = gr.bias[o] + *e;
                        }
                    } else {
                        *e = T::zero();
                    }
                }
            }
            gemm(false, false, rows, z, len, scale, &dl, x.keys, T::zero(), &mut gr.queries[r0 * z..r1 * z]);
            gemm(true, false, len, z, rows, scale, &dl, &x.queries[r0 * z..r1 * z], T::one(), &mut gr.keys);
            gemm(true, false, len, v, rows, T::one(), &bw.w, &gn, T::one(), &mut gr.values);
        }
        Ok(gr)
    }
}

/// Call `visit(i, weights_i)` for every query row in order.
pub(crate) fn weights_for_rows<T: Real>(x: &SeqView<'_, T>, spec: &KernelSpec, mut visit: impl FnMut(usize, &[T])) {
    for r0 in (0..x.len).step_by(BLOCK) {
        let r1 = (r0 + BLOCK).min(x.len);
        let bw = block_weights(x, spec, r0, r1, false);
        for r in 0..r1 - r0 {
            visit(r0 + r, &bw.w[r * x.len..(r + 1) * x.len]);
        }
    }
}
