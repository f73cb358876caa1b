//! Normalization primitives on the tape.

use crate::error::{Error, Result};

use super::{Backward, Ctx, Graph, Real, Tensor, Var};

/// Which groups of a row-major matrix are standardized together.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Each row over its columns.
    Rows,
    /// Each column over all rows.
    Cols,
}

fn groups(axis: Axis, rows: usize, cols: usize) -> (usize, usize, usize, usize) {
    // (group count, group length, stride between groups, stride inside a group)
    match axis {
        Axis::Rows => (rows, cols, cols, 1),
        Axis::Cols => (cols, rows, 1, cols),
    }
}

/// Mean and biased variance of every group.
pub fn group_moments<T: Real>(x: &Tensor<T>, axis: Axis) -> Result<(Vec<T>, Vec<T>)> {
    let (rows, cols) = x.dims2()?;
    let (count, n, outer, inner) = groups(axis, rows, cols);
    let inv = T::one() / T::cast(n.max(1) as f64);
    let mut mean = vec![T::zero(); count];
    let mut var = vec![T::zero(); count];
    for k in 0..count {
        let at = |t: usize| x.data()[k * outer + t * inner];
        let m = (0..n).map(at).sum::<T>() * inv;
        mean[k] = m;
        var[k] = (0..n).map(|t| (at(t) - m) * (at(t) - m)).sum::<T>() * inv;
    }
    Ok((mean, var))
}

struct Standardize<T> {
    inputs: [Var; 1],
    axis: Axis,
    inv_std: Vec<T>,
}

impl<T: Real> Backward<T> for Standardize<T> {
    fn name(&self) -> &'static str {
        "standardize"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let y = ctx.output();
        let (rows, cols) = y.dims2()?;
        let (count, n, outer, inner) = groups(self.axis, rows, cols);
        let inv_n = T::one() / T::cast(n.max(1) as f64);
        let mut dx = vec![T::zero(); rows * cols];
        for k in 0..count {
            let idx = |t: usize| k * outer + t * inner;
            let (mut mg, mut mgy) = (T::zero(), T::zero());
            for t in 0..n {
                mg = mg + g.data()[idx(t)];
                mgy = mgy + g.data()[idx(t)] * y.data()[idx(t)];
            }
            mg = mg * inv_n;
            mgy = mgy * inv_n;
            for t in 0..n {
                let i = idx(t);
                dx[i] = (g.data()[i] - mg - y.data()[i] * mgy) * self.inv_std[k];
            }
        }
        Ok(vec![Some(Tensor::new(&[rows, cols], dx)?)])
    }
}

struct UnitRows<T> {
    inputs: [Var; 1],
    norms: Vec<T>,
    eps: T,
}

impl<T: Real> Backward<T> for UnitRows<T> {
    fn name(&self) -> &'static str {
        "unit_rows"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]);
        let (rows, cols) = x.dims2()?;
        let mut dx = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let (xr, gr) = (x.row(r), g.row(r));
            let n = self.norms[r];
            let den = n + self.eps;
            let out = &mut dx[r * cols..(r + 1) * cols];
            let gx = xr.iter().zip(gr).fold(T::zero(), |a, (&p, &q)| a + p * q);
            for c in 0..cols {
                out[c] = gr[c] / den;
                if n > T::zero() {
                    out[c] = out[c] - gx * xr[c] / (n * den * den);
                }
            }
        }
        Ok(vec![Some(Tensor::new(&[rows, cols], dx)?)])
    }
}

struct ScaleBy {
    inputs: [Var; 2],
}

impl<T: Real> Backward<T> for ScaleBy {
    fn name(&self) -> &'static str {
        "scale_by"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]);
        let s = ctx.value(self.inputs[1]).data()[0];
        let ds = x.data().iter().zip(g.data()).fold(T::zero(), |a, (&p, &q)| a + p * q);
        Ok(vec![Some(g.scale(s)), Some(Tensor::new(&[1], vec![ds])?)])
    }
}

struct AffineCols {
    inputs: [Var; 3],
}

impl<T: Real> Backward<T> for AffineCols {
    fn name(&self) -> &'static str {
        "affine_cols"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]);
        let gain = ctx.value(self.inputs[1]);
        let (rows, cols) = x.dims2()?;
        let mut dx = vec![T::zero(); rows * cols];
        let mut dgain = vec![T::zero(); cols];
        let mut dbias = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                let i = r * cols + c;
                let gi = g.data()[i];
                dx[i] = gi * gain.data()[c];
                dgain[c] = dgain[c] + gi * x.data()[i];
                dbias[c] = dbias[c] + gi;
            }
        }
        Ok(vec![
            Some(Tensor::new(&[rows, cols], dx)?),
            Some(Tensor::new(gain.shape(), dgain)?),
            Some(Tensor::new(&[cols], dbias)?),
        ])
    }
}

struct FixedColAffine<T> {
    inputs: [Var; 1],
    mult: Vec<T>,
}

impl<T: Real> Backward<T> for FixedColAffine<T> {
    fn name(&self) -> &'static str {
        "fixed_col_affine"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, _ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let cols = self.mult.len();
        let data = g.data().iter().enumerate().map(|(i, &v)| v * self.mult[i % cols]).collect();
        Ok(vec![Some(Tensor::new(g.shape(), data)?)])
    }
}

impl<T: Real> Graph<T> {
    /// `(x - mean) / sqrt(var + eps)` over each group along `axis`, with the
    /// group's own mean and biased variance.
    pub fn standardize(&mut self, x: Var, axis: Axis, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        let (mean, var) = group_moments(xv, axis)?;
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::cast(eps)).sqrt()).collect();
        let (_, n, outer, inner) = groups(axis, rows, cols);
        let mut y = vec![T::zero(); rows * cols];
        for k in 0..mean.len() {
            for t in 0..n {
                let i = k * outer + t * inner;
                y[i] = (xv.data()[i] - mean[k]) * inv_std[k];
            }
        }
        let value = Tensor::new(&[rows, cols], y)?;
        self.push(value, Box::new(Standardize { inputs: [x], axis, inv_std }))
    }

    /// `x / (||x|| + eps)` per row.
    pub fn unit_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        let eps = T::cast(eps);
        let norms: Vec<T> = (0..rows).map(|r| xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        let mut y = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                y[r * cols + c] = xv.data()[r * cols + c] / (norms[r] + eps);
            }
        }
        let value = Tensor::new(&[rows, cols], y)?;
        self.push(value, Box::new(UnitRows { inputs: [x], norms, eps }))
    }

    /// Multiply by a learned scalar `s` of shape `[1]`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::shape("scale_by", format!("scalar of shape {:?}", sv.shape())));
        }
        let value = self.value(x).scale(sv.data()[0]);
        self.push(value, Box::new(ScaleBy { inputs: [x, s] }))
    }

    /// `x * gain + bias` with per-column `gain` and `bias`.
    pub fn affine_cols(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (rows, cols) = xv.dims2()?;
        if gv.len() != cols || bv.len() != cols {
            return Err(Error::shape(
                "affine_cols",
                format!("{cols} columns with gain {:?}, bias {:?}", gv.shape(), bv.shape()),
            ));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv.data()[i % cols] + bv.data()[i % cols])
            .collect();
        let value = Tensor::new(&[rows, cols], data)?;
        self.push(value, Box::new(AffineCols { inputs: [x, gain, bias] }))
    }

    /// `(x - shift) * mult` per column with fixed `shift` and `mult`.
    pub fn fixed_col_affine(&mut self, x: Var, shift: &[T], mult: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = xv.dims2()?;
        if shift.len() != cols || mult.len() != cols {
            return Err(Error::shape("fixed_col_affine", format!("{cols} columns")));
        }
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - shift[i % cols]) * mult[i % cols])
            .collect();
        let value = Tensor::new(&[rows, cols], data)?;
        self.push(value, Box::new(FixedColAffine { inputs: [x], mult: mult.to_vec() }))
    }
}
