use std::sync::Arc;

use rayon::prelude::*;

use super::kernel::{AttentionKernel, KernelSpec, SeqGrads, SeqView};
use crate::error::{Error, Result};
use crate::numerics::{Backward, Ctx, Graph, Real, Tensor, Var};

/// Everything an attention node needs besides its tensor inputs.
#[derive(Clone)]
pub struct AttentionCall<T: Real> {
    pub kernel: Arc<dyn AttentionKernel<T>>,
    pub spec: KernelSpec,
    /// `S x z_dim` snapshot.
    pub codebook: Tensor<T>,
    /// One shortcode per row.
    pub codes: Vec<usize>,
    pub seq_len: usize,
}

struct AttentionOp<T: Real> {
    inputs: [Var; 4],
    call: AttentionCall<T>,
}

fn views<'a, T: Real>(
    call: &'a AttentionCall<T>,
    q: &'a Tensor<T>,
    k: &'a Tensor<T>,
    v: &'a Tensor<T>,
    bias: &'a Tensor<T>,
) -> Result<Vec<SeqView<'a, T>>> {
    let (rows, z_dim) = q.dims2()?;
    let (vr, v_dim) = v.dims2()?;
    let len = call.seq_len;
    if len == 0 || rows % len != 0 || vr != rows || k.shape() != q.shape() || call.codes.len() != rows {
        return Err(Error::shape(
            "attention",
            format!(
                "q {:?}, k {:?}, v {:?}, {} codes, seq_len {len}",
                q.shape(),
                k.shape(),
                v.shape(),
                call.codes.len()
            ),
        ));
    }
    Ok((0..rows / len)
        .map(|b| SeqView {
            len,
            z_dim,
            v_dim,
            queries: &q.data()[b * len * z_dim..(b + 1) * len * z_dim],
            keys: &k.data()[b * len * z_dim..(b + 1) * len * z_dim],
            values: &v.data()[b * len * v_dim..(b + 1) * len * v_dim],
            codes: &call.codes[b * len..(b + 1) * len],
            codebook: &call.codebook,
            bias: bias.data(),
        })
        .collect())
}

impl<T: Real> Backward<T> for AttentionOp<T> {
    fn name(&self) -> &'static str {
        "attention"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_, T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let [q, k, v, b] = self.inputs.map(|i| ctx.value(i));
        let seqs = views(&self.call, q, k, v, b)?;
        let out = ctx.output();
        let v_dim = v.cols();
        let len = self.call.seq_len;
        let per_seq: Vec<Result<SeqGrads<T>>> = seqs
            .par_iter()
            .enumerate()
            .map(|(i, x)| {
                let span = i * len * v_dim..(i + 1) * len * v_dim;
                self.call
                    .kernel
                    .backward(x, &self.call.spec, &out.data()[span.clone()], &grad.data()[span])
            })
            .collect();
        let mut dq = Vec::with_capacity(q.len());
        let mut dk = Vec::with_capacity(k.len());
        let mut dv = Vec::with_capacity(v.len());
        let mut db = vec![T::zero(); b.len()];
        for g in per_seq {
            let g = g?;
            dq.extend(g.queries);
            dk.extend(g.keys);
            dv.extend(g.values);
            for (a, x) in db.iter_mut().zip(g.bias) {
                *a = *a + x;
            }
        }
        Ok(vec![
            Some(Tensor::new(q.shape(), dq)?),
            Some(Tensor::new(k.shape(), dk)?),
            Some(Tensor::new(v.shape(), dv)?),
            Some(Tensor::new(b.shape(), db)?),
        ])
    }
}

impl<T: Real> Graph<T> {
    /// Attention over a batch of sequences stacked as rows. `keys` must hold
    /// the codewords selected by `call.codes`.
    pub fn attention(&mut self, queries: Var, keys: Var, values: Var, bias: Var, call: AttentionCall<T>) -> Result<Var> {
        let (q, k, v, b) = (self.value(queries), self.value(keys), self.value(values), self.value(bias));
        let seqs = views(&call, q, k, v, b)?;
        let v_dim = v.cols();
        let outs: Vec<Result<Vec<T>>> = seqs.par_iter().map(|x| call.kernel.forward(x, &call.spec)).collect();
        let mut data = Vec::with_capacity(q.rows() * v_dim);
        for o in outs {
            data.extend(o?);
        }
        let value = Tensor::new(&[q.rows(), v_dim], data)?;
        self.push(
            value,
            Box::new(AttentionOp {
                inputs: [queries, keys, values, bias],
                call,
            }),
        )
    }
}
