//! Differentiable ops recorded on a [`Graph`].

use crate::error::{Error, Result};

use super::fft::ConvPlan;
use super::linalg::gemm;
use super::{sigmoid, Backward, Ctx, Graph, Real, Tensor, Var};

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())))
    }
}

struct Linear {
    inputs: Vec<Var>,
}

impl<T: Real> Backward<T> for Linear {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]);
        let w = ctx.value(self.inputs[1]);
        let (r, i) = x.dims2()?;
        let o = w.dims2()?.1;
        let mut out = vec![None, None];
        if ctx.needs(0) {
            let mut gx = vec![T::zero(); r * i];
            gemm(false, true, r, i, o, T::one(), g.data(), w.data(), T::zero(), &mut gx);
            out[0] = Some(Tensor::new(&[r, i], gx)?);
        }
        if ctx.needs(1) {
            let mut gw = vec![T::zero(); i * o];
            gemm(true, false, i, o, r, T::one(), x.data(), g.data(), T::zero(), &mut gw);
            out[1] = Some(Tensor::new(&[i, o], gw)?);
        }
        if self.inputs.len() == 3 {
            let gb = if ctx.needs(2) {
                let mut gb = vec![T::zero(); o];
                for row in g.data().chunks(o) {
                    for (a, &b) in gb.iter_mut().zip(row) {
                        *a = *a + b;
                    }
                }
                Some(Tensor::new(&[o], gb)?)
            } else {
                None
            };
            out.push(gb);
        }
        Ok(out)
    }
}

struct BinaryOp {
    inputs: [Var; 2],
    kind: Binary,
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl<T: Real> Backward<T> for BinaryOp {
    fn name(&self) -> &'static str {
        match self.kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(match self.kind {
            Binary::Add => vec![Some(g.clone()), Some(g.clone())],
            Binary::Sub => vec![Some(g.clone()), Some(g.scale(-T::one()))],
            Binary::Mul => {
                let a = ctx.value(self.inputs[0]);
                let b = ctx.value(self.inputs[1]);
                vec![
                    ctx.needs(0).then(|| g.zip_map(b, |x, y| x * y)).transpose()?,
                    ctx.needs(1).then(|| g.zip_map(a, |x, y| x * y)).transpose()?,
                ]
            }
        })
    }
}

#[derive(Clone, Copy)]
enum Unary {
    Scale(f64),
    Sigmoid,
    Relu,
    Square,
}

struct UnaryOp {
    inputs: [Var; 1],
    kind: Unary,
}

/// `x * s` with the sigmoid `s` kept from the forward pass.
struct SiluOp<T> {
    inputs: [Var; 1],
    gate: Tensor<T>,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Scale(_) => "scale",
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Square => "square",
        }
    }

    fn eval<T: Real>(self, x: T) -> T {
        match self {
            Unary::Scale(c) => x * T::cast(c),
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Square => x * x,
        }
    }

    fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Unary::Scale(c) => T::cast(c),
            Unary::Sigmoid => {
                let s = sigmoid(x);
                s * (T::one() - s)
            }
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Square => x + x,
        }
    }
}

impl<T: Real> Backward<T> for SiluOp<T> {
    fn name(&self) -> &'static str {
        "silu"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]).data();
        let data = g
            .data()
            .iter()
            .zip(x)
            .zip(self.gate.data())
            .map(|((&gi, &xi), &s)| gi * s * (T::one() + xi * (T::one() - s)))
            .collect();
        Ok(vec![Some(Tensor::new(g.shape(), data)?)])
    }
}

impl<T: Real> Backward<T> for UnaryOp {
    fn name(&self) -> &'static str {
        self.kind.name()
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]);
        let kind = self.kind;
        Ok(vec![Some(g.zip_map(x, |gi, xi| gi * kind.derivative(xi))?)])
    }
}

struct Reduce {
    inputs: [Var; 1],
    mean: bool,
}

impl<T: Real> Backward<T> for Reduce {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]);
        let mut v = g.data()[0];
        if self.mean {
            v = v / T::cast(x.len().max(1) as f64);
        }
        Ok(vec![Some(Tensor::full(x.shape(), v))])
    }
}

struct MseConst<T: Real> {
    inputs: [Var; 1],
    target: Tensor<T>,
}

impl<T: Real> Backward<T> for MseConst<T> {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]);
        let c = g.data()[0] * T::cast(2.0 / x.len().max(1) as f64);
        Ok(vec![Some(x.zip_map(&self.target, |a, b| c * (a - b))?)])
    }
}

struct SoftmaxRows {
    inputs: [Var; 1],
}

impl<T: Real> Backward<T> for SoftmaxRows {
    fn name(&self) -> &'static str {
        "softmax_rows"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let p = ctx.output();
        let c = p.cols();
        let mut out = vec![T::zero(); p.len()];
        for ((orow, prow), grow) in out
            .chunks_mut(c)
            .zip(p.data().chunks(c))
            .zip(g.data().chunks(c))
        {
            let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
            for ((o, &pi), &gi) in orow.iter_mut().zip(prow).zip(grow) {
                *o = pi * (gi - dot);
            }
        }
        Ok(vec![Some(Tensor::new(p.shape(), out)?)])
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Real>(m: &Tensor<T>) -> Result<Tensor<T>> {
    m.ensure_finite("softmax_rows")?;
    let c = m.cols();
    let mut out = m.data().to_vec();
    if c > 0 {
        for row in out.chunks_mut(c) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
    }
    Tensor::new(m.shape(), out)
}

struct CrossEntropy {
    inputs: [Var; 1],
    targets: Vec<Option<usize>>,
    count: usize,
}

impl<T: Real> Backward<T> for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let logits = ctx.value(self.inputs[0]);
        let c = logits.cols();
        let scale = g.data()[0] / T::cast(self.count as f64);
        let mut out = vec![T::zero(); logits.len()];
        for (r, t) in self.targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let p = softmax_row(logits.row(r));
            let orow = &mut out[r * c..(r + 1) * c];
            for (j, (o, pj)) in orow.iter_mut().zip(p).enumerate() {
                let y = if j == t { T::one() } else { T::zero() };
                *o = scale * (pj - y);
            }
        }
        Ok(vec![Some(Tensor::new(logits.shape(), out)?)])
    }
}

fn softmax_row<T: Real>(row: &[T]) -> Vec<T> {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = row.iter().map(|&x| (x - mx).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Natural-log cross-entropy of one row of logits against class `t`.
pub fn row_cross_entropy<T: Real>(row: &[T], t: usize) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - mx).exp()).sum::<T>().ln() + mx;
    lse - row[t]
}

struct Embedding {
    inputs: [Var; 1],
    ids: Vec<usize>,
}

impl<T: Real> Backward<T> for Embedding {
    fn name(&self) -> &'static str {
        "embedding"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let table = ctx.value(self.inputs[0]);
        let d = table.cols();
        let mut out = Tensor::zeros(table.shape());
        for (r, &id) in self.ids.iter().enumerate() {
            let src = &g.data()[r * d..(r + 1) * d];
            for (a, &b) in out.row_mut(id).iter_mut().zip(src) {
                *a = *a + b;
            }
        }
        Ok(vec![Some(out)])
    }
}

struct MeanPool {
    inputs: [Var; 1],
    seq_len: usize,
}

impl<T: Real> Backward<T> for MeanPool {
    fn name(&self) -> &'static str {
        "mean_pool"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]);
        let d = x.cols();
        let inv = T::one() / T::cast(self.seq_len as f64);
        let mut out = vec![T::zero(); x.len()];
        for (r, orow) in out.chunks_mut(d).enumerate() {
            let b = r / self.seq_len;
            for (o, &gv) in orow.iter_mut().zip(&g.data()[b * d..(b + 1) * d]) {
                *o = gv * inv;
            }
        }
        Ok(vec![Some(Tensor::new(x.shape(), out)?)])
    }
}

struct GateMix {
    inputs: [Var; 3],
}

impl<T: Real> Backward<T> for GateMix {
    fn name(&self) -> &'static str {
        "gate_mix"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let gate = ctx.value(self.inputs[0]);
        let a = ctx.value(self.inputs[1]);
        let x = ctx.value(self.inputs[2]);
        let n = g.len();
        let (mut gg, mut ga, mut gx) = (vec![T::zero(); n], vec![T::zero(); n], vec![T::zero(); n]);
        for i in 0..n {
            let (gi, s) = (g.data()[i], gate.data()[i]);
            gg[i] = gi * (a.data()[i] - x.data()[i]);
            ga[i] = gi * s;
            gx[i] = gi * (T::one() - s);
        }
        let shape = g.shape();
        Ok(vec![
            Some(Tensor::new(shape, gg)?),
            Some(Tensor::new(shape, ga)?),
            Some(Tensor::new(shape, gx)?),
        ])
    }
}

struct PassThrough {
    inputs: [Var; 1],
    name: &'static str,
}

impl<T: Real> Backward<T> for PassThrough {
    fn name(&self) -> &'static str {
        self.name
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, _ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.clone())])
    }
}

struct CausalConv {
    inputs: [Var; 2],
}

impl<T: Real> Backward<T> for CausalConv {
    fn name(&self) -> &'static str {
        "causal_conv"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let k = ctx.value(self.inputs[0]);
        let s = ctx.value(self.inputs[1]);
        let plan = ConvPlan::new(k.len());
        let gk = plan.correlate_with(&plan.spectrum(s.data()), g.data());
        let gs = plan.correlate_with(&plan.spectrum(k.data()), g.data());
        Ok(vec![
            Some(Tensor::new(k.shape(), gk)?),
            Some(Tensor::new(s.shape(), gs)?),
        ])
    }
}

struct Mask<T: Real> {
    inputs: [Var; 1],
    mask: Tensor<T>,
}

impl<T: Real> Backward<T> for Mask<T> {
    fn name(&self) -> &'static str {
        "dropout"
    }
    fn inputs(&self) -> &[Var] {
        &self.inputs
    }
    fn backward(&self, _ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(g.zip_map(&self.mask, |a, b| a * b)?)])
    }
}

impl<T: Real> Graph<T> {
    /// `x * w (+ b)` with `x: R x I`, `w: I x O`, `b: O`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, i) = xv.dims2()?;
        let (i2, o) = wv.dims2()?;
        if i != i2 {
            return Err(Error::shape(
                "linear",
                format!("input {:?} weight {:?}", xv.shape(), wv.shape()),
            ));
        }
        let mut out = vec![T::zero(); r * o];
        gemm(false, false, r, o, i, T::one(), xv.data(), wv.data(), T::zero(), &mut out);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != o {
                return Err(Error::shape("linear", format!("bias {:?} for {o} outputs", bv.shape())));
            }
            for row in out.chunks_mut(o) {
                for (a, &bb) in row.iter_mut().zip(bv.data()) {
                    *a = *a + bb;
                }
            }
            inputs.push(b);
        }
        let value = Tensor::new(&[r, o], out)?;
        self.push(value, Box::new(Linear { inputs }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let name = <BinaryOp as Backward<T>>::name(&BinaryOp { inputs: [a, b], kind });
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let value = match kind {
            Binary::Add => av.zip_map(bv, |x, y| x + y)?,
            Binary::Sub => av.zip_map(bv, |x, y| x - y)?,
            Binary::Mul => av.zip_map(bv, |x, y| x * y)?,
        };
        self.push(value, Box::new(BinaryOp { inputs: [a, b], kind }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let value = self.value(x).map(|v| kind.eval(v));
        self.push(value, Box::new(UnaryOp { inputs: [x], kind }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(c))
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let gate = input.map(sigmoid);
        let value = input.zip_map(&gate, |a, s| a * s)?;
        self.push(value, Box::new(SiluOp { inputs: [x], gate }))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Box::new(Reduce { inputs: [x], mean: false }))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / T::cast(xv.len().max(1) as f64));
        self.push(value, Box::new(Reduce { inputs: [x], mean: true }))
    }

    /// Mean squared error against a constant target; no gradient reaches the
    /// target.
    pub fn mse_const(&mut self, x: Var, target: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        same_shape("mse", xv, &target)?;
        let sq: T = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        let value = Tensor::scalar(sq / T::cast(xv.len().max(1) as f64));
        self.push(value, Box::new(MseConst { inputs: [x], target }))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = softmax_rows(self.value(x))?;
        self.push(value, Box::new(SoftmaxRows { inputs: [x] }))
    }

    /// Mean cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = lv.dims2()?;
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= c {
                    return Err(Error::Invalid(format!("target {t} out of range for {c} classes")));
                }
                total = total + row_cross_entropy(lv.row(i), t);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: no labelled rows".into()));
        }
        let value = Tensor::scalar(total / T::cast(count as f64));
        self.push(
            value,
            Box::new(CrossEntropy {
                inputs: [logits],
                targets,
                count,
            }),
        )
    }

    /// Row gather from an embedding table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = tv.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Invalid(format!("token {id} outside vocabulary of {v}")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        self.push(
            value,
            Box::new(Embedding {
                inputs: [table],
                ids: ids.to_vec(),
            }),
        )
    }

    /// Mean over each block of `seq_len` consecutive rows.
    pub fn mean_pool(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, d) = xv.dims2()?;
        if seq_len == 0 || r % seq_len != 0 {
            return Err(Error::shape("mean_pool", format!("{r} rows, seq_len {seq_len}")));
        }
        let b = r / seq_len;
        let inv = T::one() / T::cast(seq_len as f64);
        let mut out = vec![T::zero(); b * d];
        for (i, row) in xv.data().chunks(d).enumerate() {
            let o = &mut out[(i / seq_len) * d..(i / seq_len + 1) * d];
            for (a, &v) in o.iter_mut().zip(row) {
                *a = *a + v * inv;
            }
        }
        let value = Tensor::new(&[b, d], out)?;
        self.push(value, Box::new(MeanPool { inputs: [x], seq_len }))
    }

    /// `gate * a + (1 - gate) * x`.
    pub fn gate_mix(&mut self, gate: Var, a: Var, x: Var) -> Result<Var> {
        let (gv, av, xv) = (self.value(gate), self.value(a), self.value(x));
        same_shape("gate_mix", gv, av)?;
        same_shape("gate_mix", av, xv)?;
        let data = gv
            .data()
            .iter()
            .zip(av.data())
            .zip(xv.data())
            .map(|((&s, &a), &x)| s * a + (T::one() - s) * x)
            .collect();
        let value = Tensor::new(gv.shape(), data)?;
        self.push(value, Box::new(GateMix { inputs: [gate, a, x] }))
    }

    /// Node whose forward value is `value` but whose gradient passes to `x`
    /// unchanged (straight-through).
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>, name: &'static str) -> Result<Var> {
        same_shape(name, self.value(x), &value)?;
        self.push(value, Box::new(PassThrough { inputs: [x], name }))
    }

    /// Elementwise product with a fixed mask (inverted dropout).
    pub fn apply_mask(&mut self, x: Var, mask: Tensor<T>) -> Result<Var> {
        let value = self.value(x).zip_map(&mask, |a, b| a * b)?;
        self.push(value, Box::new(Mask { inputs: [x], mask }))
    }

    /// 1-D causal convolution of two equal-length vectors.
    pub fn causal_conv(&mut self, kernel: Var, signal: Var) -> Result<Var> {
        let value = super::conv_causal(self.value(kernel), self.value(signal))?;
        self.push(value, Box::new(CausalConv { inputs: [kernel, signal] }))
    }
}
