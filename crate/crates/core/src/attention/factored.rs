//! Linear-time attention over quantized keys.
//!
//! Because every key is a codeword, the score of query `i` against key `j`
//! depends on `j` only through its shortcode. Far-field sums therefore reduce
//! to per-code counts `n_s` and value sums `U_s`:
//! `sum_j f(l_ij) v_j = sum_s f(a_is) U_s` with `a = scale * Q C^T`.
//! Keys inside the bias band are handled by swapping their code-only term for
//! the biased one. In causal mode keys are processed in chunks of width `w`;
//! each chunk sees prefix statistics of earlier chunks plus a dense in-chunk
//! triangle.

use std::ops::Range;

use super::kernel::{AttentionKernel, KernelSpec, SeqGrads, SeqView};
use crate::error::Result;
use crate::numerics::linalg::gemm;
use crate::numerics::Real;

/// Rows of the `P` staging matrix built per pass when accumulating key
/// gradients.
const STAGE_ROWS: usize = 256;

/// Keys per block in the direct far-field key gradient.
const KEY_BLOCK: usize = 64;

pub struct Factored;

/// How one block of query rows sees the keys.
struct Segment {
    rows: Range<usize>,
    /// Keys counted in the statistics.
    counted: Range<usize>,
    causal_chunk: bool,
}

impl Segment {
    /// In-band keys of query `i` that are counted in the statistics and need
    /// their code-only term replaced.
    fn corrected(&self, spec: &KernelSpec, i: usize) -> Range<usize> {
        let lo = i.saturating_sub(spec.window).max(self.counted.start);
        let hi = if self.causal_chunk {
            self.counted.end
        } else {
            (i + spec.window + 1).min(self.counted.end)
        };
        lo..hi.max(lo)
    }

    /// Keys handled densely (the in-chunk causal triangle).
    fn dense(&self, i: usize) -> Range<usize> {
        if self.causal_chunk {
            self.rows.start..i + 1
        } else {
            0..0
        }
    }
}

fn segments(len: usize, spec: &KernelSpec) -> Vec<Segment> {
    if !spec.causal {
        return vec![Segment {
            rows: 0..len,
            counted: 0..len,
            causal_chunk: false,
        }];
    }
    let chunk = spec.chunk();
    (0..len)
        .step_by(chunk)
        .map(|start| Segment {
            rows: start..(start + chunk).min(len),
            counted: 0..start,
            causal_chunk: true,
        })
        .collect()
}

/// Running per-code counts and value sums.
struct Stats<T> {
    counts: Vec<T>,
    sums: Vec<T>,
}

impl<T: Real> Stats<T> {
    fn new(size: usize, v_dim: usize) -> Self {
        Self {
            counts: vec![T::zero(); size],
            sums: vec![T::zero(); size * v_dim],
        }
    }

    fn add(&mut self, x: &SeqView<'_, T>, keys: Range<usize>) {
        let v = x.v_dim;
        for j in keys {
            let s = x.codes[j];
            self.counts[s] = self.counts[s] + T::one();
            for (a, &b) in self.sums[s * v..(s + 1) * v].iter_mut().zip(x.value(j)) {
                *a = *a + b;
            }
        }
    }
}

/// Per-row quantities of one segment.
struct RowState<T> {
    /// `rows x S` code logits.
    logits: Vec<T>,
    /// `rows x S` far-field weights, zero for codes absent from the stats.
    w: Vec<T>,
    /// Their derivatives (only filled for backward).
    dw: Vec<T>,
    shift: Vec<f64>,
}

fn row_state<T: Real>(x: &SeqView<'_, T>, spec: &KernelSpec, seg: &Segment, stats: &Stats<T>, grads: bool) -> RowState<T> {
    let size = stats.counts.len();
    let rows = seg.rows.len();
    let z = x.z_dim;
    let mut logits = vec![T::zero(); rows * size];
    gemm(
        false,
        true,
        rows,
        size,
        z,
        T::cast(spec.scale),
        &x.queries[seg.rows.start * z..seg.rows.end * z],
        x.codebook.data(),
        T::zero(),
        &mut logits,
    );
    let f = &spec.attn_fn;
    let mut w = vec![T::zero(); rows * size];
    let mut dw = if grads { vec![T::zero(); rows * size] } else { Vec::new() };
    let mut shift = vec![0.0; rows];
    for (r, i) in seg.rows.clone().enumerate() {
        let a = &logits[r * size..(r + 1) * size];
        if f.normalized() {
            let mut m = f64::NEG_INFINITY;
            for (&logit, &count) in a.iter().zip(&stats.counts) {
                if count > T::zero() {
                    m = m.max(logit.as_f64());
                }
            }
            for j in seg.corrected(spec, i).chain(seg.dense(i)) {
                let o = spec.band_index(i, j).expect("band pair");
                m = m.max((a[x.codes[j]] + x.bias[o]).as_f64());
            }
            shift[r] = m;
        }
        for s in 0..size {
            if stats.counts[s] > T::zero() {
                let arg = a[s].as_f64() - shift[r];
                w[r * size + s] = T::cast(f.weight(arg));
                if grads {
                    dw[r * size + s] = T::cast(f.weight_grad(arg));
                }
            }
        }
    }
    RowState { logits, w, dw, shift }
}

/// Weight and derivative of a band pair with the bias included, and the
/// code-only weight it replaces.
struct PairTerms<T> {
    offset: usize,
    w: T,
    dw: T,
}

fn pair_terms<T: Real>(x: &SeqView<'_, T>, spec: &KernelSpec, st: &RowState<T>, r: usize, i: usize, j: usize, size: usize) -> PairTerms<T> {
    let o = spec.band_index(i, j).expect("band pair");
    let arg = (st.logits[r * size + x.codes[j]] + x.bias[o]).as_f64() - st.shift[r];
    PairTerms {
        offset: o,
        w: T::cast(spec.attn_fn.weight(arg)),
        dw: T::cast(spec.attn_fn.weight_grad(arg)),
    }
}

fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (b, &a) in y.iter_mut().zip(x) {
        *b = *b + alpha * a;
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&p, &q)| acc + p * q)
}

/// Forward pass returning outputs and the per-row denominators.
fn forward_impl<T: Real>(x: &SeqView<'_, T>, spec: &KernelSpec) -> (Vec<T>, Vec<T>) {
    let (len, v) = (x.len, x.v_dim);
    let size = x.codebook.rows();
    let normalized = spec.attn_fn.normalized();
    let mut out = vec![T::zero(); len * v];
    let mut den = vec![T::one(); len];
    let mut stats = Stats::new(size, v);
    let segs = segments(len, spec);
    if !spec.causal {
        stats.add(x, 0..len);
    }
    for seg in &segs {
        let st = row_state(x, spec, seg, &stats, false);
        let num = &mut out[seg.rows.start * v..seg.rows.end * v];
        gemm(false, false, seg.rows.len(), v, size, T::one(), &st.w, &stats.sums, T::zero(), num);
        for (r, i) in seg.rows.clone().enumerate() {
            let row = &mut num[r * v..(r + 1) * v];
            let mut d = dot(&st.w[r * size..(r + 1) * size], &stats.counts);
            for j in seg.corrected(spec, i) {
                let p = pair_terms(x, spec, &st, r, i, j, size);
                let delta = p.w - st.w[r * size + x.codes[j]];
                axpy(delta, x.value(j), row);
                d = d + delta;
            }
            for j in seg.dense(i) {
                let p = pair_terms(x, spec, &st, r, i, j, size);
                axpy(p.w, x.value(j), row);
                d = d + p.w;
            }
            if normalized {
                let inv = T::one() / d;
                row.iter_mut().for_each(|e| *e = *e * inv);
                den[i] = d;
            }
        }
        if spec.causal {
            stats.add(x, seg.rows.clone());
        }
    }
    (out, den)
}

/// Far-field key/value gradient accumulators:
/// `G_s = sum_i w'_is q_i gn_i^T`, `h_s = sum_i w'_is gd_i q_i`,
/// `R_s = sum_i w_is gn_i`.
/// Without `G` the `G_s v_j` term is left to [`direct_key_grads`].
struct FarField<T> {
    g: Option<Vec<T>>,
    h: Vec<T>,
    r: Vec<T>,
}

impl<T: Real> FarField<T> {
    fn new(size: usize, z: usize, v: usize, with_g: bool) -> Self {
        Self {
            g: with_g.then(|| vec![T::zero(); size * z * v]),
            h: vec![T::zero(); size * z],
            r: vec![T::zero(); size * v],
        }
    }

    /// Add the contributions of query rows `rows` (segment-local `w`, `dw`).
    #[allow(clippy::too_many_arguments)]
    fn add_queries(&mut self, x: &SeqView<'_, T>, rows: Range<usize>, w: &[T], dw: &[T], gn: &[T], gd: &[T], size: usize) {
        let (z, v) = (x.z_dim, x.v_dim);
        let base = rows.start;
        for start in rows.clone().step_by(STAGE_ROWS) {
            let end = (start + STAGE_ROWS).min(rows.end);
            let n = end - start;
            let (lo, hi) = (start - base, end - base);
            let mut wd = vec![T::zero(); n * size];
            for r in 0..n {
                let wrow = &dw[(lo + r) * size..(lo + r + 1) * size];
                for (s, &ws) in wrow.iter().enumerate() {
                    wd[r * size + s] = ws * gd[start + r];
                }
            }
            let gnb = &gn[start * v..end * v];
            if let Some(g) = &mut self.g {
                let mut p = vec![T::zero(); n * size * z];
                for r in 0..n {
                    let q = x.query(start + r);
                    let wrow = &dw[(lo + r) * size..(lo + r + 1) * size];
                    for (s, &ws) in wrow.iter().enumerate() {
                        if ws != T::zero() {
                            let dst = &mut p[(r * size + s) * z..(r * size + s + 1) * z];
                            for (d, &qa) in dst.iter_mut().zip(q) {
                                *d = ws * qa;
                            }
                        }
                    }
                }
                gemm(true, false, size * z, v, n, T::one(), &p, gnb, T::one(), g);
            }
            gemm(true, false, size, z, n, T::one(), &wd, &x.queries[start * z..end * z], T::one(), &mut self.h);
            gemm(true, false, size, v, n, T::one(), &w[lo * size..hi * size], gnb, T::one(), &mut self.r);
        }
    }

    /// Apply to keys `keys`: `dK_j += scale (G_{z_j} v_j + h_{z_j})`,
    /// `dV_j += R_{z_j}`.
    fn apply(&self, x: &SeqView<'_, T>, keys: Range<usize>, scale: T, gr: &mut SeqGrads<T>) {
        let (z, v) = (x.z_dim, x.v_dim);
        for j in keys {
            let s = x.codes[j];
            let vj = x.value(j);
            let dk = &mut gr.keys[j * z..(j + 1) * z];
            for a in 0..z {
                let gv = match &self.g {
                    Some(g) => dot(&g[(s * z + a) * v..(s * z + a + 1) * v], vj),
                    None => T::zero(),
                };
                dk[a] = dk[a] + scale * (gv + self.h[s * z + a]);
            }
            axpy(T::one(), &self.r[s * v..(s + 1) * v], &mut gr.values[j * v..(j + 1) * v]);
        }
    }
}

/// `dK_j += scale sum_i w'_{i z_j} (gn_i . v_j) q_i` over the queries that
/// see key `j` through the statistics, by blocks of keys. `dw` holds the
/// far-field derivatives of every row.
fn direct_key_grads<T: Real>(x: &SeqView<'_, T>, spec: &KernelSpec, dw: &[T], gn: &[T], gr: &mut SeqGrads<T>) {
    let (len, z, v) = (x.len, x.z_dim, x.v_dim);
    let size = x.codebook.rows();
    let chunk = spec.chunk();
    for j0 in (0..len).step_by(KEY_BLOCK) {
        let j1 = (j0 + KEY_BLOCK).min(len);
        let nk = j1 - j0;
        let r0 = if spec.causal { (j0 / chunk + 1) * chunk } else { 0 };
        if r0 >= len {
            break;
        }
        let nr = len - r0;
        let mut e = vec![T::zero(); nr * nk];
        gemm(false, true, nr, nk, v, T::one(), &gn[r0 * v..], &x.values[j0 * v..j1 * v], T::zero(), &mut e);
        for (r, i) in (r0..len).enumerate() {
            let seen = if spec.causal { (i / chunk) * chunk } else { len };
            let row = &mut e[r * nk..(r + 1) * nk];
            for (c, j) in (j0..j1).enumerate() {
                row[c] = if j < seen { dw[i * size + x.codes[j]] * row[c] } else { T::zero() };
            }
        }
        gemm(true, false, nk, z, nr, T::cast(spec.scale), &e, &x.queries[r0 * z..], T::one(), &mut gr.keys[j0 * z..j1 * z]);
    }
}

/// Whether the `G_s v_j` key term goes through the `G` accumulator rather
/// than the direct blocked contraction. Both are exact.
fn accumulate_g(len: usize, size: usize, z: usize, v: usize, causal: bool) -> bool {
    let direct_cost = len as f64 * (v + z) as f64 * if causal { 0.5 } else { 1.0 };
    direct_cost >= (size * z * v) as f64
}

pub(crate) fn backward_impl<T: Real>(
    x: &SeqView<'_, T>,
    spec: &KernelSpec,
    out: &[T],
    grad: &[T],
    use_g: Option<bool>,
) -> SeqGrads<T> {
    let (len, z, v) = (x.len, x.z_dim, x.v_dim);
    let size = x.codebook.rows();
    let scale = T::cast(spec.scale);
    let normalized = spec.attn_fn.normalized();
    let (_, den) = forward_impl(x, spec);
    let mut gr = SeqGrads::zeros(x);

    let mut gn = grad.to_vec();
    let mut gd = vec![T::zero(); len];
    if normalized {
        for i in 0..len {
            let inv = T::one() / den[i];
            let g = &mut gn[i * v..(i + 1) * v];
            gd[i] = -dot(g, &out[i * v..(i + 1) * v]) * inv;
            g.iter_mut().for_each(|e| *e = *e * inv);
        }
    }

    let segs = segments(len, spec);
    let mut stats = Stats::new(size, v);
    if !spec.causal {
        stats.add(x, 0..len);
    }
    // Score gradients against codes, `len x S`; contracted with the codebook
    // at the end to give query gradients.
    let mut d_logits = vec![T::zero(); len * size];
    let mut states = Vec::with_capacity(segs.len());
    for seg in &segs {
        let st = row_state(x, spec, seg, &stats, true);
        let rows = seg.rows.len();
        let dl = &mut d_logits[seg.rows.start * size..seg.rows.end * size];
        // gn_i . U_s
        gemm(
            false,
            true,
            rows,
            size,
            v,
            T::one(),
            &gn[seg.rows.start * v..seg.rows.end * v],
            &stats.sums,
            T::zero(),
            dl,
        );
        for (r, i) in seg.rows.clone().enumerate() {
            let gni = &gn[i * v..(i + 1) * v];
            let qi = x.query(i);
            for s in 0..size {
                let e = &mut dl[r * size + s];
                *e = st.dw[r * size + s] * (*e + gd[i] * stats.counts[s]);
            }
            for j in seg.corrected(spec, i) {
                let p = pair_terms(x, spec, &st, r, i, j, size);
                let s = x.codes[j];
                let t = dot(gni, x.value(j)) + gd[i];
                let dl_pair = (p.dw - st.dw[r * size + s]) * t;
                dl[r * size + s] = dl[r * size + s] + dl_pair;
                axpy(scale * dl_pair, qi, &mut gr.keys[j * z..(j + 1) * z]);
                axpy(p.w - st.w[r * size + s], gni, &mut gr.values[j * v..(j + 1) * v]);
                gr.bias[p.offset] = gr.bias[p.offset] + p.dw * t;
            }
            for j in seg.dense(i) {
                let p = pair_terms(x, spec, &st, r, i, j, size);
                let s = x.codes[j];
                let t = dot(gni, x.value(j)) + gd[i];
                let dl_pair = p.dw * t;
                dl[r * size + s] = dl[r * size + s] + dl_pair;
                axpy(scale * dl_pair, qi, &mut gr.keys[j * z..(j + 1) * z]);
                axpy(p.w, gni, &mut gr.values[j * v..(j + 1) * v]);
                gr.bias[p.offset] = gr.bias[p.offset] + dl_pair;
            }
        }
        if spec.causal {
            stats.add(x, seg.rows.clone());
        }
        states.push(st);
    }
    gemm(false, false, len, z, size, scale, &d_logits, x.codebook.data(), T::zero(), &mut gr.queries);

    // Far-field key and value gradients. A key is seen through the statistics
    // by every query of a later segment, so accumulate queries in reverse and
    // apply the running suffix to each segment's own keys first.
    // Pick the cheaper exact route for the `G_s v_j` term.
    let use_g = use_g.unwrap_or_else(|| accumulate_g(len, size, z, v, spec.causal));
    let mut far = FarField::new(size, z, v, use_g);
    if !use_g {
        let dw: Vec<T> = states.iter().flat_map(|st| st.dw.iter().copied()).collect();
        direct_key_grads(x, spec, &dw, &gn, &mut gr);
    }
    if spec.causal {
        for (seg, st) in segs.iter().zip(&states).rev() {
            far.apply(x, seg.rows.clone(), scale, &mut gr);
            far.add_queries(x, seg.rows.clone(), &st.w, &st.dw, &gn, &gd, size);
        }
    } else {
        let (seg, st) = (&segs[0], &states[0]);
        far.add_queries(x, seg.rows.clone(), &st.w, &st.dw, &gn, &gd, size);
        far.apply(x, 0..len, scale, &mut gr);
    }
    gr
}

impl<T: Real> AttentionKernel<T> for Factored {
    fn name(&self) -> &'static str {
        "vq"
    }

    fn forward(&self, x: &SeqView<'_, T>, spec: &KernelSpec) -> Result<Vec<T>> {
        x.validate(spec)?;
        Ok(forward_impl(x, spec).0)
    }

    fn backward(&self, x: &SeqView<'_, T>, spec: &KernelSpec, out: &[T], grad: &[T]) -> Result<SeqGrads<T>> {
        x.validate(spec)?;
        Ok(backward_impl(x, spec, out, grad, None))
    }
}
