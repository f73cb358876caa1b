//! Structured state-space channels.
//!
//! Each embedding dimension is an independent single-input single-output
//! channel `x' = A x + B u, y = C x + D u`. `A` and `B` come from the S4
//! structured initialisation and stay fixed; `C`, `D` and the log step size
//! are trainable. Continuous parameters are discretized with the bilinear
//! transform and unrolled into a length-`L` convolution kernel.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::fft::ConvPlan;
use crate::numerics::{Backward, Ctx, Graph, Real, Rng, Tensor, Var};

/// Default state width.
pub const DEFAULT_STATE_SIZE: usize = 16;

pub const LOG_DT_MIN: f64 = -6.907755278982137; // ln 0.001
pub const LOG_DT_MAX: f64 = -std::f64::consts::LN_10; // ln 0.1

/// Continuous parameters of one channel.
#[derive(Clone, Debug)]
pub struct SsmChannel {
    /// `N x N` state matrix, row-major.
    pub a: Vec<f64>,
    pub b_in: Vec<f64>,
    pub c_out: Vec<f64>,
    pub d_skip: f64,
    /// Log of the step size; the step is `exp(log_dt)` and always positive.
    pub log_dt: f64,
}

impl SsmChannel {
    pub fn state_size(&self) -> usize {
        self.b_in.len()
    }

    pub fn step(&self) -> f64 {
        self.log_dt.exp()
    }

    /// S4-initialised channel: structured `A`/`B`, Gaussian `C`, `D = 1`,
    /// log-uniform step in `[0.001, 0.1]`.
    pub fn init(n: usize, rng: &mut Rng) -> Result<Self> {
        let (a, b_in) = init_s4(n)?;
        Ok(Self {
            a: a.into_data(),
            b_in,
            c_out: (0..n).map(|_| rng.normal()).collect(),
            d_skip: 1.0,
            log_dt: rng.uniform_range(LOG_DT_MIN, LOG_DT_MAX),
        })
    }
}

/// Discrete-time parameters after the bilinear transform.
#[derive(Clone, Debug)]
pub struct DiscreteSsm {
    pub a_bar: Vec<f64>,
    pub b_bar: Vec<f64>,
    pub c_bar: Vec<f64>,
}

impl DiscreteSsm {
    pub fn state_size(&self) -> usize {
        self.b_bar.len()
    }
}

/// Convolution kernel `k[j] = C_bar . A_bar^j . B_bar`.
#[derive(Clone, Debug)]
pub struct SsmKernel {
    pub k: Vec<f64>,
}

/// Structured initialisation: `A = A_ds - P P^T` with `P_i = sqrt(i + 1/2)`
/// and `B_i = sqrt(2i + 1)`.
///
/// The result is lower-triangular with diagonal `-(i + 1)`.
pub fn init_s4(n: usize) -> Result<(Tensor<f64>, Vec<f64>)> {
    if n == 0 {
        return Err(Error::Invalid("ssm state size must be >= 1".into()));
    }
    let p: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5).sqrt()).collect();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let ds = match i.cmp(&j) {
                std::cmp::Ordering::Greater => -(p[i] * p[j]),
                std::cmp::Ordering::Equal => -0.5,
                std::cmp::Ordering::Less => p[i] * p[j],
            };
            a[i * n + j] = ds - p[i] * p[j];
        }
    }
    // Entries above the diagonal cancel exactly in exact arithmetic; pin them.
    for i in 0..n {
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    let b = (0..n).map(|i| (2.0 * i as f64 + 1.0).sqrt()).collect();
    Ok((Tensor::new(&[n, n], a)?, b))
}

struct Bilinear {
    /// `I - step/2 * A`.
    m: DMatrix<f64>,
    a_bar: DMatrix<f64>,
    b_bar: DVector<f64>,
    /// Derivatives of `A_bar` and `B_bar` with respect to the step size.
    da_bar: DMatrix<f64>,
    db_bar: DVector<f64>,
}

fn bilinear(a: &[f64], b: &[f64], dt: f64, channel: usize) -> Result<Bilinear> {
    let n = b.len();
    let a = DMatrix::from_row_slice(n, n, a);
    let b = DVector::from_column_slice(b);
    let eye = DMatrix::<f64>::identity(n, n);
    let m = &eye - &a * (dt / 2.0);
    let lu = m.clone().lu();
    if !lu.is_invertible() {
        return Err(Error::SingularChannel { channel });
    }
    let solve_m = |rhs: &DMatrix<f64>| lu.solve(rhs).ok_or(Error::SingularChannel { channel });
    let a_bar = solve_m(&(&eye + &a * (dt / 2.0)))?;
    let b_bar = lu
        .solve(&(&b * dt))
        .ok_or(Error::SingularChannel { channel })?;
    let half_a = &a * 0.5;
    let da_bar = solve_m(&(&half_a * (&a_bar + &eye)))?;
    let db_bar = lu
        .solve(&(&half_a * &b_bar + &b))
        .ok_or(Error::SingularChannel { channel })?;
    Ok(Bilinear {
        m,
        a_bar,
        b_bar,
        da_bar,
        db_bar,
    })
}

/// Bilinear discretization with step `exp(log_dt)`.
pub fn discretize(ch: &SsmChannel) -> Result<DiscreteSsm> {
    discretize_indexed(ch, 0)
}

/// As [`discretize`], naming `channel` in the error for a singular system.
pub fn discretize_indexed(ch: &SsmChannel, channel: usize) -> Result<DiscreteSsm> {
    let bl = bilinear(&ch.a, &ch.b_in, ch.step(), channel)?;
    let n = ch.state_size();
    let mut a_bar = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a_bar[i * n + j] = bl.a_bar[(i, j)];
        }
    }
    Ok(DiscreteSsm {
        a_bar,
        b_bar: bl.b_bar.iter().copied().collect(),
        c_bar: ch.c_out.clone(),
    })
}

fn mat_vec(a: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (i, o) in out.iter_mut().enumerate() {
        *o = a[i * n..(i + 1) * n].iter().zip(x).map(|(p, q)| p * q).sum();
    }
}

/// Kernel by iterating the state: `u_0 = B_bar`, `u_j = A_bar u_{j-1}`,
/// `k[j] = C_bar . u_j`. Costs `O(L N^2)`.
pub fn materialize_kernel(d: &DiscreteSsm, len: usize) -> SsmKernel {
    let n = d.state_size();
    let mut u = d.b_bar.clone();
    let mut next = vec![0.0; n];
    let mut k = Vec::with_capacity(len);
    for _ in 0..len {
        k.push(d.c_bar.iter().zip(&u).map(|(c, x)| c * x).sum());
        mat_vec(&d.a_bar, &u, &mut next);
        std::mem::swap(&mut u, &mut next);
    }
    SsmKernel { k }
}

/// Literal recurrence `x_k = A_bar x_{k-1} + B_bar u_k`, `y_k = C_bar x_k`
/// from `x_{-1} = 0`.
pub fn scan_recurrent(d: &DiscreteSsm, u: &[f64]) -> Vec<f64> {
    let n = d.state_size();
    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    u.iter()
        .map(|&ut| {
            mat_vec(&d.a_bar, &x, &mut next);
            for (xi, (ni, bi)) in x.iter_mut().zip(next.iter().zip(&d.b_bar)) {
                *xi = ni + bi * ut;
            }
            d.c_bar.iter().zip(&x).map(|(c, s)| c * s).sum()
        })
        .collect()
}

/// `Y[:, c] = conv_causal(k_c, X[:, c]) + D_c X[:, c]` for an `L x d` input
/// and one channel per column.
pub fn apply_ssm<T: Real>(x: &Tensor<T>, channels: &[SsmChannel]) -> Result<Tensor<T>> {
    let (len, d) = x.dims2()?;
    if channels.len() != d {
        return Err(Error::shape(
            "apply_ssm",
            format!("{} channels for {d} columns", channels.len()),
        ));
    }
    let plan = ConvPlan::<T>::new(len);
    let mut out = vec![T::zero(); len * d];
    for (c, ch) in channels.iter().enumerate() {
        let kernel = materialize_kernel(&discretize_indexed(ch, c)?, len);
        let kt: Vec<T> = kernel.k.iter().map(|&v| T::cast(v)).collect();
        let col: Vec<T> = (0..len).map(|t| x.data()[t * d + c]).collect();
        let y = plan.convolve(&kt, &col);
        let skip = T::cast(ch.d_skip);
        for t in 0..len {
            out[t * d + c] = y[t] + skip * col[t];
        }
    }
    let out = Tensor::new(&[len, d], out)?;
    out.ensure_finite("apply_ssm")?;
    Ok(out)
}

/// Fixed structure shared by the `d` channels of one layer.
#[derive(Clone, Debug)]
pub struct SsmStructure {
    pub a: Vec<f64>,
    pub b_in: Vec<f64>,
}

impl SsmStructure {
    pub fn s4(n: usize) -> Result<Self> {
        let (a, b_in) = init_s4(n)?;
        Ok(Self {
            a: a.into_data(),
            b_in,
        })
    }

    pub fn state_size(&self) -> usize {
        self.b_in.len()
    }

    /// Materialize the channels described by trainable tensors
    /// `log_dt: [d]`, `c_out: [d, N]`, `d_skip: [d]`.
    pub fn channels<T: Real>(
        &self,
        log_dt: &Tensor<T>,
        c_out: &Tensor<T>,
        d_skip: &Tensor<T>,
    ) -> Vec<SsmChannel> {
        let n = self.state_size();
        (0..log_dt.len())
            .map(|c| SsmChannel {
                a: self.a.clone(),
                b_in: self.b_in.clone(),
                c_out: c_out.data()[c * n..(c + 1) * n]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect(),
                d_skip: d_skip.data()[c].as_f64(),
                log_dt: log_dt.data()[c].as_f64(),
            })
            .collect()
    }
}

struct ChannelTrace {
    kernel: Vec<f64>,
    /// States `u_j = A_bar^j B_bar`, `L x N`.
    states: Vec<f64>,
    /// `d u_j / d step`, `L x N`.
    tangents: Vec<f64>,
    step: f64,
    bilinear: Bilinear,
}

/// Gradient of `sum_j gk[j] * k[j]` with respect to `B_in`:
/// `step * M^-T * sum_j gk[j] (A_bar^T)^j C`, accumulated by Horner's rule.
fn input_matrix_grad(tr: &ChannelTrace, c_out: &[f64], gk: &[f64], channel: usize) -> Result<Vec<f64>> {
    let c = DVector::from_column_slice(c_out);
    let at = tr.bilinear.a_bar.transpose();
    let mut r = DVector::zeros(c_out.len());
    for &g in gk.iter().rev() {
        r = &at * &r + &c * g;
    }
    let y = tr
        .bilinear
        .m
        .transpose()
        .lu()
        .solve(&r)
        .ok_or(Error::SingularChannel { channel })?;
    Ok(y.iter().map(|v| v * tr.step).collect())
}

/// `out += M x` for a square column-major `M`.
fn mat_vec_acc(m: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (col, &xc) in m.chunks_exact(n).zip(x) {
        for (o, &mv) in out.iter_mut().zip(col) {
            *o += mv * xc;
        }
    }
}

/// Kernel only, by splitting `j = i m + r` with `m ~ sqrt(len)`:
/// `k[j] = (C A^{i m}) . (A^r B)`. Costs `O(sqrt(len) N^2 + len N)` instead of
/// the `O(len N^2)` of iterating the state.
fn channel_kernel(a: &[f64], b_in: &[f64], c_out: &[f64], log_dt: f64, len: usize, channel: usize) -> Result<Vec<f64>> {
    let n = b_in.len();
    let bl = bilinear(a, b_in, log_dt.exp(), channel)?;
    let a_bar = bl.a_bar.as_slice();
    let m = ((len as f64).sqrt().ceil() as usize).max(1);
    let mut near = vec![0.0; m * n];
    near[..n].copy_from_slice(bl.b_bar.as_slice());
    for r in 1..m {
        let (done, rest) = near.split_at_mut(r * n);
        mat_vec_acc(a_bar, &done[(r - 1) * n..], &mut rest[..n]);
    }
    let mut stride = DMatrix::<f64>::identity(n, n);
    for _ in 0..m {
        stride = &bl.a_bar * &stride;
    }
    let mut far = c_out.to_vec();
    let mut next = vec![0.0; n];
    let mut kernel = Vec::with_capacity(len);
    'outer: loop {
        for u in near.chunks_exact(n) {
            if kernel.len() == len {
                break 'outer;
            }
            kernel.push(far.iter().zip(u).map(|(w, x)| w * x).sum());
        }
        // far <- stride^T far, the row vector C A^{(i+1) m}.
        for (o, col) in next.iter_mut().zip(stride.as_slice().chunks_exact(n)) {
            *o = col.iter().zip(&far).map(|(p, w)| p * w).sum();
        }
        std::mem::swap(&mut far, &mut next);
    }
    Ok(kernel)
}

fn trace_channel(
    a: &[f64],
    b_in: &[f64],
    c_out: &[f64],
    log_dt: f64,
    len: usize,
    channel: usize,
    with_tangents: bool,
) -> Result<ChannelTrace> {
    let n = b_in.len();
    let step = log_dt.exp();
    let bl = bilinear(a, b_in, step, channel)?;
    let mut states = vec![0.0; len * n];
    let mut tangents = if with_tangents { vec![0.0; len * n] } else { Vec::new() };
    let mut kernel = vec![0.0; len];
    let mut u = bl.b_bar.as_slice().to_vec();
    let mut du = bl.db_bar.as_slice().to_vec();
    let mut next = vec![0.0; n];
    for j in 0..len {
        states[j * n..(j + 1) * n].copy_from_slice(&u);
        kernel[j] = c_out.iter().zip(&u).map(|(c, x)| c * x).sum();
        if with_tangents {
            tangents[j * n..(j + 1) * n].copy_from_slice(&du);
            next.fill(0.0);
            mat_vec_acc(bl.da_bar.as_slice(), &u, &mut next);
            mat_vec_acc(bl.a_bar.as_slice(), &du, &mut next);
            std::mem::swap(&mut du, &mut next);
        }
        next.fill(0.0);
        mat_vec_acc(bl.a_bar.as_slice(), &u, &mut next);
        std::mem::swap(&mut u, &mut next);
    }
    Ok(ChannelTrace {
        kernel,
        states,
        tangents,
        step,
        bilinear: bl,
    })
}

/// Trainable (or frozen) tensors of one SSM layer: `log_dt: [d]`,
/// `c_out: [d, N]`, `d_skip: [d]`, shared `b_in: [N]`.
#[derive(Clone, Copy, Debug)]
pub struct SsmVars {
    pub log_dt: Var,
    pub c_out: Var,
    pub d_skip: Var,
    pub b_in: Var,
}

struct SsmConv {
    inputs: [Var; 5],
    state_matrix: Vec<f64>,
    seq_len: usize,
}

fn column<T: Real>(x: &[T], d: usize, c: usize, b: usize, len: usize) -> Vec<T> {
    (0..len).map(|t| x[(b * len + t) * d + c]).collect()
}

impl<T: Real> Backward<T> for SsmConv {
    fn name(&self) -> &'static str {
        "ssm_conv"
    }

    fn inputs(&self) -> &[Var] {
        &self.inputs
    }

    fn backward(&self, ctx: &Ctx<'_, T>, g: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let x = ctx.value(self.inputs[0]);
        let log_dt = ctx.value(self.inputs[1]);
        let c_out = ctx.value(self.inputs[2]);
        let d_skip = ctx.value(self.inputs[3]);
        let b_in: Vec<f64> = ctx.value(self.inputs[4]).data().iter().map(|v| v.as_f64()).collect();
        let (rows, d) = x.dims2()?;
        let len = self.seq_len;
        let batch = rows / len;
        let n = b_in.len();
        let plan = ConvPlan::<T>::new(len);

        struct ChannelGrad<T> {
            gx: Vec<T>,
            g_log_dt: f64,
            g_c: Vec<f64>,
            g_d: f64,
            g_b: Vec<f64>,
        }

        let per_channel: Vec<Result<ChannelGrad<T>>> = (0..d)
            .into_par_iter()
            .map(|c| {
                let cvec: Vec<f64> = c_out.data()[c * n..(c + 1) * n]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                let tr = trace_channel(
                    &self.state_matrix,
                    &b_in,
                    &cvec,
                    log_dt.data()[c].as_f64(),
                    len,
                    c,
                    ctx.needs(1),
                )?;
                let kt: Vec<T> = tr.kernel.iter().map(|&v| T::cast(v)).collect();
                let kspec = plan.spectrum(&kt);
                let skip = d_skip.data()[c];
                let mut gx = vec![T::zero(); batch * len];
                let mut gk = vec![0.0f64; len];
                let mut g_d = 0.0f64;
                for b in 0..batch {
                    let xs = column(x.data(), d, c, b, len);
                    let gs = column(g.data(), d, c, b, len);
                    g_d += xs
                        .iter()
                        .zip(&gs)
                        .map(|(a, b)| a.as_f64() * b.as_f64())
                        .sum::<f64>();
                    if ctx.needs(0) {
                        let corr = plan.correlate_with(&kspec, &gs);
                        for t in 0..len {
                            gx[b * len + t] = corr[t] + skip * gs[t];
                        }
                    }
                    if ctx.needs(1) || ctx.needs(2) || ctx.needs(4) {
                        let xspec = plan.spectrum(&xs);
                        let corr = plan.correlate_with(&xspec, &gs);
                        for (a, v) in gk.iter_mut().zip(corr) {
                            *a += v.as_f64();
                        }
                    }
                }
                let mut g_c = vec![0.0; n];
                let mut g_step = 0.0;
                for (j, &w) in gk.iter().enumerate().take(len) {
                    let u = &tr.states[j * n..(j + 1) * n];
                    for (a, &s) in g_c.iter_mut().zip(u) {
                        *a += w * s;
                    }
                    if ctx.needs(1) {
                        let du = &tr.tangents[j * n..(j + 1) * n];
                        g_step += w * cvec.iter().zip(du).map(|(p, q)| p * q).sum::<f64>();
                    }
                }
                let g_b = if ctx.needs(4) {
                    input_matrix_grad(&tr, &cvec, &gk, c)?
                } else {
                    Vec::new()
                };
                Ok(ChannelGrad {
                    gx,
                    g_log_dt: g_step * tr.step,
                    g_c,
                    g_d,
                    g_b,
                })
            })
            .collect();

        let mut gx = vec![T::zero(); rows * d];
        let mut g_log_dt = vec![T::zero(); d];
        let mut g_c = vec![T::zero(); d * n];
        let mut g_d = vec![T::zero(); d];
        let mut g_b = vec![0.0f64; n];
        for (c, res) in per_channel.into_iter().enumerate() {
            let cg = res?;
            for (r, &v) in cg.gx.iter().enumerate() {
                gx[r * d + c] = v;
            }
            g_log_dt[c] = T::cast(cg.g_log_dt);
            for (i, &v) in cg.g_c.iter().enumerate() {
                g_c[c * n + i] = T::cast(v);
            }
            g_d[c] = T::cast(cg.g_d);
            for (a, v) in g_b.iter_mut().zip(&cg.g_b) {
                *a += v;
            }
        }
        Ok(vec![
            ctx.needs(0).then(|| Tensor::new(&[rows, d], gx)).transpose()?,
            Some(Tensor::new(log_dt.shape(), g_log_dt)?),
            Some(Tensor::new(c_out.shape(), g_c)?),
            Some(Tensor::new(d_skip.shape(), g_d)?),
            ctx.needs(4)
                .then(|| Tensor::from_f64(&[n], &g_b))
                .transpose()?,
        ])
    }
}

impl<T: Real> Graph<T> {
    /// Differentiable SSM over a batch of sequences stacked as
    /// `(batch * seq_len) x d` rows. `state_matrix` is held fixed; every
    /// tensor in `vars` receives a gradient if it is a leaf. Models pass
    /// `b_in` as a constant.
    pub fn ssm_conv(
        &mut self,
        x: Var,
        vars: SsmVars,
        state_matrix: &[f64],
        seq_len: usize,
    ) -> Result<Var> {
        let xv = self.value(x);
        let (rows, d) = xv.dims2()?;
        let bv: Vec<f64> = self.value(vars.b_in).data().iter().map(|v| v.as_f64()).collect();
        let n = bv.len();
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::shape("ssm_conv", format!("{rows} rows, seq_len {seq_len}")));
        }
        let (lv, cv, dv) = (
            self.value(vars.log_dt),
            self.value(vars.c_out),
            self.value(vars.d_skip),
        );
        if lv.len() != d || cv.len() != d * n || dv.len() != d || state_matrix.len() != n * n {
            return Err(Error::shape(
                "ssm_conv",
                format!(
                    "{d} channels, state {n}: log_dt {:?}, c_out {:?}, d_skip {:?}",
                    lv.shape(),
                    cv.shape(),
                    dv.shape()
                ),
            ));
        }
        let batch = rows / seq_len;
        let plan = ConvPlan::<T>::new(seq_len);
        let columns: Vec<Result<Vec<T>>> = (0..d)
            .into_par_iter()
            .map(|c| {
                let cvec: Vec<f64> = cv.data()[c * n..(c + 1) * n]
                    .iter()
                    .map(|v| v.as_f64())
                    .collect();
                let kernel = channel_kernel(state_matrix, &bv, &cvec, lv.data()[c].as_f64(), seq_len, c)?;
                let kt: Vec<T> = kernel.iter().map(|&v| T::cast(v)).collect();
                let kspec = plan.spectrum(&kt);
                let skip = dv.data()[c];
                let mut out = Vec::with_capacity(rows);
                for b in 0..batch {
                    let xs = column(xv.data(), d, c, b, seq_len);
                    let y = plan.convolve_with(&kspec, &xs);
                    out.extend(y.iter().zip(&xs).map(|(&yy, &xx)| yy + skip * xx));
                }
                Ok(out)
            })
            .collect();
        let mut out = vec![T::zero(); rows * d];
        for (c, col) in columns.into_iter().enumerate() {
            for (r, v) in col?.into_iter().enumerate() {
                out[r * d + c] = v;
            }
        }
        let value = Tensor::new(&[rows, d], out)?;
        self.push(
            value,
            Box::new(SsmConv {
                inputs: [x, vars.log_dt, vars.c_out, vars.d_skip, vars.b_in],
                state_matrix: state_matrix.to_vec(),
                seq_len,
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff;

    fn scalar_channel(a: f64, b: f64, c: f64, dt: f64) -> SsmChannel {
        SsmChannel {
            a: vec![a],
            b_in: vec![b],
            c_out: vec![c],
            d_skip: 0.0,
            log_dt: dt.ln(),
        }
    }

    #[test]
    fn split_kernel_matches_state_iteration() {
        let mut rng = Rng::new(13);
        for (n, len) in [(1, 1), (3, 2), (4, 17), (8, 64), (16, 300)] {
            let structure = SsmStructure::s4(n).unwrap();
            let c: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let log_dt = rng.uniform_range(LOG_DT_MIN, LOG_DT_MAX);
            let fast = channel_kernel(&structure.a, &structure.b_in, &c, log_dt, len, 0).unwrap();
            let slow = trace_channel(&structure.a, &structure.b_in, &c, log_dt, len, 0, false).unwrap().kernel;
            assert_eq!(fast.len(), len);
            let scale = slow.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            for (p, q) in fast.iter().zip(&slow) {
                assert!((p - q).abs() / scale < 1e-12, "n={n} len={len}: {p} vs {q}");
            }
        }
    }

    #[test]
    fn s4_init_small_cases() {
        let (a, b) = init_s4(2).unwrap();
        assert!((b[0] - 1.0).abs() < 1e-15);
        assert!((b[1] - 3f64.sqrt()).abs() < 1e-15);
        assert!((a.at(0, 0) + 1.0).abs() < 1e-12);
        assert_eq!(a.at(0, 1), 0.0);
        assert!((a.at(1, 0) + 3f64.sqrt()).abs() < 1e-12);
        assert!((a.at(1, 1) + 2.0).abs() < 1e-12);
        assert!(init_s4(0).is_err());
    }

    #[test]
    fn zero_state_matrix_discretizes_to_identity() {
        let d = discretize(&scalar_channel(0.0, 2.0, 1.0, 0.3)).unwrap();
        assert!((d.a_bar[0] - 1.0).abs() < 1e-15);
        assert!((d.b_bar[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn scalar_bilinear_values() {
        let d = discretize(&scalar_channel(-1.0, 1.0, 1.0, 0.5)).unwrap();
        assert!((d.a_bar[0] - 0.6).abs() < 1e-14);
        assert!((d.b_bar[0] - 0.4).abs() < 1e-14);
        let k = materialize_kernel(&d, 3).k;
        for (x, y) in k.iter().zip([0.4, 0.24, 0.144]) {
            assert!((x - y).abs() < 1e-14);
        }
        let y = scan_recurrent(&d, &[1.0, 0.0, 0.0]);
        for (x, y) in y.iter().zip([0.4, 0.24, 0.144]) {
            assert!((x - y).abs() < 1e-14);
        }
        assert_eq!(scan_recurrent(&d, &[0.0; 4]), vec![0.0; 4]);
    }

    #[test]
    fn identity_transition_gives_constant_kernel() {
        let d = DiscreteSsm {
            a_bar: vec![1.0, 0.0, 0.0, 1.0],
            b_bar: vec![1.0, 0.0],
            c_bar: vec![1.0, 0.0],
        };
        assert_eq!(materialize_kernel(&d, 5).k, vec![1.0; 5]);
    }

    #[test]
    fn singular_system_names_channel() {
        // I - dt/2 * A is singular when A = 2/dt.
        let ch = scalar_channel(4.0, 1.0, 1.0, 0.5);
        match discretize_indexed(&ch, 7) {
            Err(Error::SingularChannel { channel }) => assert_eq!(channel, 7),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn pure_skip_and_impulse_response() {
        let mut rng = Rng::new(4);
        let mut ch = SsmChannel::init(4, &mut rng).unwrap();
        ch.c_out = vec![0.0; 4];
        let x = Tensor::<f64>::from_fn(&[6, 1], |_| rng.normal());
        let y = apply_ssm(&x, std::slice::from_ref(&ch)).unwrap();
        assert_eq!(y.data(), x.data());

        let ch = SsmChannel::init(4, &mut rng).unwrap();
        let mut imp = vec![0.0; 8];
        imp[0] = 1.0;
        let imp: Tensor<f64> = Tensor::from_f64(&[8, 1], &imp).unwrap();
        let y = apply_ssm(&imp, std::slice::from_ref(&ch)).unwrap();
        let k = materialize_kernel(&discretize(&ch).unwrap(), 8).k;
        for (t, (&kt, &yt)) in k.iter().zip(y.data()).enumerate() {
            let want = kt + if t == 0 { ch.d_skip } else { 0.0 };
            assert!((yt - want).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_count_mismatch() {
        let x = Tensor::<f64>::zeros(&[4, 3]);
        let mut rng = Rng::new(0);
        let ch = SsmChannel::init(2, &mut rng).unwrap();
        assert!(apply_ssm(&x, &[ch]).is_err());
    }

    #[test]
    fn tape_op_gradients_match_finite_differences() {
        let mut rng = Rng::new(11);
        let (d, n, len, batch) = (3, 4, 9, 2);
        let structure = SsmStructure::s4(n).unwrap();
        let x = Tensor::<f64>::from_fn(&[batch * len, d], |_| rng.normal());
        let log_dt = Tensor::<f64>::from_fn(&[d], |_| rng.uniform_range(-3.0, -0.5));
        let c_out = Tensor::<f64>::from_fn(&[d, n], |_| rng.normal());
        let d_skip = Tensor::<f64>::from_fn(&[d], |_| rng.normal());
        let b_in = Tensor::from_f64(&[n], &structure.b_in).unwrap();
        let w = Tensor::<f64>::from_fn(&[batch * len, d], |_| rng.normal());

        let build = |p: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = p.iter().map(|t| g.leaf(t.clone())).collect();
            let sv = SsmVars {
                log_dt: vars[1],
                c_out: vars[2],
                d_skip: vars[3],
                b_in: vars[4],
            };
            let y = g.ssm_conv(vars[0], sv, &structure.a, len).unwrap();
            let wv = g.constant(w.clone());
            let yw = g.mul(y, wv).unwrap();
            let s = g.sum(yw).unwrap();
            (g, vars, s)
        };
        let params = vec![x, log_dt, c_out, d_skip, b_in];
        let loss_of = |p: &[Tensor<f64>]| {
            let (g, _, s) = build(p);
            g.scalar(s)
        };
        let (g, vars, s) = build(&params);
        let grads = g.backward(s).unwrap();
        let fd = finite_diff(loss_of, &params, 1e-6);
        for (v, f) in vars.iter().zip(&fd) {
            let a = grads.get(*v);
            for (x, y) in a.data().iter().zip(f.data()) {
                let rel = (x - y).abs() / x.abs().max(y.abs()).max(1e-6);
                assert!(rel < 1e-6, "analytic {x} vs fd {y}");
            }
        }
    }

    #[test]
    fn batched_tape_op_matches_apply_ssm() {
        let mut rng = Rng::new(2);
        let (d, n, len) = (2, 5, 12);
        let structure = SsmStructure::s4(n).unwrap();
        let log_dt = Tensor::<f64>::from_fn(&[d], |_| rng.uniform_range(LOG_DT_MIN, LOG_DT_MAX));
        let c_out = Tensor::<f64>::from_fn(&[d, n], |_| rng.normal());
        let d_skip = Tensor::<f64>::from_fn(&[d], |_| rng.normal());
        let x = Tensor::<f64>::from_fn(&[2 * len, d], |_| rng.normal());
        let b_in = Tensor::from_f64(&[n], &structure.b_in).unwrap();
        let mut g = Graph::new();
        let vars: Vec<Var> = [&x, &log_dt, &c_out, &d_skip, &b_in]
            .iter()
            .map(|t| g.constant((*t).clone()))
            .collect();
        let sv = SsmVars {
            log_dt: vars[1],
            c_out: vars[2],
            d_skip: vars[3],
            b_in: vars[4],
        };
        let y = g.ssm_conv(vars[0], sv, &structure.a, len).unwrap();
        let channels = structure.channels(&log_dt, &c_out, &d_skip);
        for b in 0..2 {
            let xb = Tensor::new(&[len, d], x.data()[b * len * d..(b + 1) * len * d].to_vec()).unwrap();
            let want = apply_ssm(&xb, &channels).unwrap();
            let got = &g.value(y).data()[b * len * d..(b + 1) * len * d];
            for (p, q) in got.iter().zip(want.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}
