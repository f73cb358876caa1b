//! Vector quantization of attention keys.
//!
//! A [`Codebook`] holds `S` codewords of width `D`. Keys are replaced by their
//! nearest codeword in the forward pass while gradients pass straight through
//! to the unquantized key. Codewords are never trained by gradient descent;
//! they track exponential moving averages of the keys assigned to them.

mod checkpoint;
mod stats;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Rng, Tensor, Var};

pub use stats::{perplexity, CodeStats};

/// Default number of codewords.
pub const DEFAULT_CODEBOOK_SIZE: usize = 512;
/// Default EMA rate.
pub const DEFAULT_EMA_RATE: f64 = 0.99;
/// Laplace smoothing constant applied to EMA counts.
pub const DEFAULT_SMOOTHING: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Codebook<T: Real> {
    codes: Tensor<T>,
    ema_count: Vec<f64>,
    /// `S x D`, row-major.
    ema_sum: Vec<f64>,
    pub eta: f64,
    pub epsilon: f64,
}

impl<T: Real> Codebook<T> {
    /// Codebook with the given `S x D` codewords. Accumulators start as one
    /// pseudo-observation of each codeword.
    pub fn new(codes: Tensor<T>, eta: f64, epsilon: f64) -> Result<Self> {
        let (size, _) = codes.dims2()?;
        if !(0.0..=1.0).contains(&eta) || epsilon < 0.0 {
            return Err(Error::Invalid(format!(
                "codebook eta {eta} must lie in [0, 1] and epsilon {epsilon} be >= 0"
            )));
        }
        codes.ensure_finite("codebook")?;
        Ok(Self {
            ema_count: vec![1.0; size],
            ema_sum: codes.to_f64_vec(),
            codes,
            eta,
            epsilon,
        })
    }

    /// Rebuild from stored state.
    pub fn from_parts(
        codes: Tensor<T>,
        ema_count: Vec<f64>,
        ema_sum: Vec<f64>,
        eta: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let (size, dim) = codes.dims2()?;
        if ema_count.len() != size || ema_sum.len() != size * dim {
            return Err(Error::shape(
                "codebook",
                format!(
                    "{size}x{dim} codes with {} counts and {} sums",
                    ema_count.len(),
                    ema_sum.len()
                ),
            ));
        }
        if ema_count.iter().any(|&c| c < 0.0 || !c.is_finite()) {
            return Err(Error::Invalid("negative or non-finite ema count".into()));
        }
        let mut cb = Self::new(codes, eta, epsilon)?;
        cb.ema_count = ema_count;
        cb.ema_sum = ema_sum;
        Ok(cb)
    }

    /// k-means++ seeding (no Lloyd iterations) from the rows of `keys`.
    ///
    /// The first codeword is a uniform draw; each further one is drawn with
    /// probability proportional to its squared distance from the nearest code
    /// chosen so far. When every key already coincides with a chosen code the
    /// draw falls back to uniform, so fewer distinct keys than codes yields
    /// repeated codewords.
    pub fn seed_from_keys(keys: &Tensor<T>, size: usize, eta: f64, epsilon: f64, rng: &mut Rng) -> Result<Self> {
        let (rows, dim) = keys.dims2()?;
        if size == 0 {
            return Err(Error::Invalid("codebook size must be >= 1".into()));
        }
        if rows == 0 {
            return Err(Error::Invalid("cannot seed a codebook from zero keys".into()));
        }
        let mut chosen = Vec::with_capacity(size);
        chosen.push(rng.below(rows));
        let mut nearest: Vec<f64> = (0..rows)
            .map(|r| sq_dist(keys.row(r), keys.row(chosen[0])))
            .collect();
        while chosen.len() < size {
            let total: f64 = nearest.iter().sum();
            let pick = if total > 0.0 {
                let mut target = rng.uniform() * total;
                let mut pick = rows - 1;
                for (r, &w) in nearest.iter().enumerate() {
                    if target < w {
                        pick = r;
                        break;
                    }
                    target -= w;
                }
                pick
            } else {
                rng.below(rows)
            };
            chosen.push(pick);
            for (r, best) in nearest.iter_mut().enumerate() {
                *best = best.min(sq_dist(keys.row(r), keys.row(pick)));
            }
        }
        let mut data = Vec::with_capacity(size * dim);
        for &r in &chosen {
            data.extend_from_slice(keys.row(r));
        }
        Self::new(Tensor::new(&[size, dim], data)?, eta, epsilon)
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn codes(&self) -> &Tensor<T> {
        &self.codes
    }

    pub fn code(&self, s: usize) -> &[T] {
        self.codes.row(s)
    }

    pub fn ema_count(&self) -> &[f64] {
        &self.ema_count
    }

    pub fn ema_sum(&self) -> &[f64] {
        &self.ema_sum
    }

    /// Nearest codeword by squared Euclidean distance; ties go to the lowest
    /// index.
    pub fn assign(&self, x: &[T]) -> Result<usize> {
        if self.size() == 0 {
            return Err(Error::Invalid("empty codebook".into()));
        }
        if x.len() != self.dim() {
            return Err(Error::shape(
                "assign",
                format!("key of width {} for codebook width {}", x.len(), self.dim()),
            ));
        }
        Ok(self.nearest(x).0)
    }

    /// Nearest and runner-up distances for `x`.
    fn nearest(&self, x: &[T]) -> (usize, T, T) {
        let mut best = (0, T::infinity(), T::infinity());
        for s in 0..self.size() {
            let d = sq_dist_t(x, self.code(s));
            if d < best.1 {
                best = (s, d, best.1);
            } else if d < best.2 {
                best.2 = d;
            }
        }
        best
    }

    /// Shortcodes for every row of `keys`.
    pub fn assign_all(&self, keys: &Tensor<T>) -> Result<Vec<usize>> {
        let (rows, dim) = keys.dims2()?;
        if self.size() == 0 {
            return Err(Error::Invalid("empty codebook".into()));
        }
        if dim != self.dim() {
            return Err(Error::shape(
                "assign",
                format!("keys of width {dim} for codebook width {}", self.dim()),
            ));
        }
        let columns = self.code_columns();
        Ok((0..rows)
            .into_par_iter()
            .with_min_len(64)
            .map_init(
                || vec![T::zero(); self.size()],
                |dist, r| nearest_by_columns(&columns, keys.row(r), dist).0,
            )
            .collect())
    }

    /// Codewords transposed to `D x S`, so distances to every code vectorize
    /// across codes while each still sums its coordinates in order.
    fn code_columns(&self) -> Vec<T> {
        let (size, dim) = (self.size(), self.dim());
        let mut cols = vec![T::zero(); size * dim];
        for s in 0..size {
            for (a, &c) in self.code(s).iter().enumerate() {
                cols[a * size + s] = c;
            }
        }
        cols
    }

    /// Smallest gap between the nearest and runner-up squared distances over
    /// all rows of `keys`. Infinite for a one-code book.
    pub fn assignment_margin(&self, keys: &Tensor<T>) -> Result<f64> {
        let (rows, _) = keys.dims2()?;
        let columns = self.code_columns();
        let mut dist = vec![T::zero(); self.size()];
        Ok((0..rows)
            .map(|r| {
                let (_, d1, d2) = nearest_by_columns(&columns, keys.row(r), &mut dist);
                (d2 - d1).as_f64()
            })
            .fold(f64::INFINITY, f64::min))
    }

    /// Codeword rows for shortcodes `z`.
    pub fn gather(&self, z: &[usize]) -> Result<Tensor<T>> {
        let dim = self.dim();
        let mut data = Vec::with_capacity(z.len() * dim);
        for &s in z {
            if s >= self.size() {
                return Err(Error::Invalid(format!(
                    "shortcode {s} out of range for codebook of size {}",
                    self.size()
                )));
            }
            data.extend_from_slice(self.code(s));
        }
        Tensor::new(&[z.len(), dim], data)
    }

    /// Forward-only quantization: `(K_hat, z)` with `K_hat[l] = C[z_l]`.
    pub fn quantize(&self, keys: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
        let z = self.assign_all(keys)?;
        Ok((self.gather(&z)?, z))
    }

    /// One EMA step from a batch of keys and their shortcodes.
    ///
    /// Codes whose smoothed count is zero keep their current codeword.
    pub fn ema_update(&mut self, keys: &Tensor<T>, z: &[usize]) -> Result<()> {
        let (rows, dim) = keys.dims2()?;
        if rows != z.len() || dim != self.dim() {
            return Err(Error::shape(
                "ema_update",
                format!("{rows}x{dim} keys with {} shortcodes", z.len()),
            ));
        }
        let size = self.size();
        let mut counts = vec![0.0f64; size];
        let mut sums = vec![0.0f64; size * dim];
        for (r, &s) in z.iter().enumerate() {
            if s >= size {
                return Err(Error::Invalid(format!("shortcode {s} out of range")));
            }
            counts[s] += 1.0;
            for (a, v) in sums[s * dim..(s + 1) * dim].iter_mut().zip(keys.row(r)) {
                *a += v.as_f64();
            }
        }
        let (eta, keep) = (self.eta, 1.0 - self.eta);
        for (n, c) in self.ema_count.iter_mut().zip(&counts) {
            *n = eta * *n + keep * c;
        }
        for (m, s) in self.ema_sum.iter_mut().zip(&sums) {
            *m = eta * *m + keep * s;
        }
        let total: f64 = self.ema_count.iter().sum();
        let denom = total + size as f64 * self.epsilon;
        for s in 0..size {
            let n = self.ema_count[s];
            if n <= 0.0 || denom <= 0.0 {
                continue;
            }
            let smoothed = (n + self.epsilon) / denom * total;
            let row = self.codes.row_mut(s);
            for (c, m) in row.iter_mut().zip(&self.ema_sum[s * dim..(s + 1) * dim]) {
                *c = T::cast(m / smoothed);
            }
        }
        self.codes.ensure_finite("ema_update")
    }

    /// Mean over all elements of `(K[l] - C[z_l])^2`.
    pub fn commit_loss(&self, keys: &Tensor<T>, z: &[usize]) -> Result<T> {
        let target = self.gather(z)?;
        if !keys.same_shape(&target) {
            return Err(Error::shape("commit_loss", format!("{:?} vs {:?}", keys.shape(), target.shape())));
        }
        if keys.is_empty() {
            return Ok(T::zero());
        }
        let sq: f64 = keys
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
            .sum();
        Ok(T::cast(sq / keys.len() as f64))
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum()
}

/// Same result as [`Codebook::nearest`], with `dist` as scratch of length S.
fn nearest_by_columns<T: Real>(columns: &[T], x: &[T], dist: &mut [T]) -> (usize, T, T) {
    let size = dist.len();
    dist.fill(T::zero());
    for (&xa, col) in x.iter().zip(columns.chunks_exact(size)) {
        for (d, &c) in dist.iter_mut().zip(col) {
            let diff = xa - c;
            *d = *d + diff * diff;
        }
    }
    let mut best = (0, T::infinity(), T::infinity());
    for (s, &d) in dist.iter().enumerate() {
        if d < best.1 {
            best = (s, d, best.1);
        } else if d < best.2 {
            best.2 = d;
        }
    }
    best
}

fn sq_dist_t<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

impl<T: Real> Graph<T> {
    /// Straight-through quantization of the key rows in `keys`. The node's
    /// value is exactly the assigned codewords; its gradient is copied to
    /// `keys` unchanged and the codebook receives none.
    pub fn quantize_st(&mut self, keys: Var, codebook: &Codebook<T>) -> Result<(Var, Vec<usize>)> {
        let (khat, z) = codebook.quantize(self.value(keys))?;
        Ok((self.straight_through(keys, khat, "quantize_st")?, z))
    }

    /// Commitment loss with a stop-gradient on the codewords.
    pub fn commit_loss(&mut self, keys: Var, codebook: &Codebook<T>, z: &[usize]) -> Result<Var> {
        let target = codebook.gather(z)?;
        self.mse_const(keys, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(rows: &[&[f64]]) -> Codebook<f64> {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        Codebook::new(Tensor::from_rows(&rows).unwrap(), 0.99, 1e-5).unwrap()
    }

    #[test]
    fn assign_examples() {
        let cb = book(&[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(cb.assign(&[0.9, 0.8]).unwrap(), 1);
        assert_eq!(cb.assign(&[0.5, 0.5]).unwrap(), 0);
        let cb = book(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        assert_eq!(cb.assign(&[3.0]).unwrap(), 3);
        assert!(cb.assign(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn empty_codebook_is_an_error() {
        let cb = Codebook::<f64>::new(Tensor::zeros(&[0, 2]), 0.9, 1e-5).unwrap();
        assert!(cb.assign(&[0.0, 0.0]).is_err());
    }

    #[test]
    fn straight_through_passes_gradient() {
        let mut rng = Rng::new(3);
        let cb = Codebook::new(Tensor::<f64>::from_fn(&[4, 3], |_| rng.normal()), 0.9, 1e-5).unwrap();
        let keys = Tensor::<f64>::from_fn(&[6, 3], |_| rng.normal());
        let mut g = Graph::new();
        let k = g.leaf(keys);
        let (khat, z) = g.quantize_st(k, &cb).unwrap();
        for (l, &s) in z.iter().enumerate() {
            assert_eq!(g.value(khat).row(l), cb.code(s));
        }
        let loss = g.sum(khat).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(k).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn commit_loss_examples() {
        let cb = book(&[&[0.0, 0.0]]);
        let k = Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap();
        assert_eq!(cb.commit_loss(&k, &[0]).unwrap(), 0.5);
        let exact = Tensor::from_f64(&[1, 2], &[0.0, 0.0]).unwrap();
        assert_eq!(cb.commit_loss(&exact, &[0]).unwrap(), 0.0);

        let mut g = Graph::new();
        let kv = g.leaf(k);
        let loss = g.commit_loss(kv, &cb, &[0]).unwrap();
        assert_eq!(g.scalar(loss), 0.5);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(kv).data(), &[1.0, 0.0]);
    }

    #[test]
    fn ema_zero_rate_gives_batch_means() {
        let mut cb = book(&[&[9.0, 9.0], &[-9.0, 3.0]]);
        cb.eta = 0.0;
        let keys = Tensor::from_f64(&[4, 2], &[1.0, 2.0, 3.0, 4.0, 10.0, 0.0, 20.0, 2.0]).unwrap();
        cb.ema_update(&keys, &[0, 0, 1, 1]).unwrap();
        assert!((cb.code(0)[0] - 2.0).abs() < 1e-12);
        assert!((cb.code(0)[1] - 3.0).abs() < 1e-12);
        assert!((cb.code(1)[0] - 15.0).abs() < 1e-12);
        assert!((cb.code(1)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ema_unused_code_decays() {
        let mut cb = book(&[&[1.0], &[5.0]]);
        let keys = Tensor::from_f64(&[1, 1], &[2.0]).unwrap();
        cb.ema_update(&keys, &[0]).unwrap();
        // Code 1: N = 0.99, m = 0.99 * 5; total = 1.0 + 0.99.
        let total = 1.0 + 0.99;
        let smoothed = (0.99 + 1e-5) / (total + 2e-5) * total;
        assert!((cb.ema_count()[1] - 0.99).abs() < 1e-15);
        assert!((cb.code(1)[0] - 0.99 * 5.0 / smoothed).abs() < 1e-12);
        // Without smoothing the code would not move at all.
        assert!((cb.code(1)[0] - 5.0).abs() < 1e-4);
    }

    #[test]
    fn zero_count_code_keeps_codeword() {
        let mut cb = book(&[&[1.0], &[5.0]]);
        cb.eta = 0.0;
        let keys = Tensor::from_f64(&[1, 1], &[2.0]).unwrap();
        cb.ema_update(&keys, &[0]).unwrap();
        assert_eq!(cb.code(1), &[5.0]);
    }

    #[test]
    fn seeding_picks_key_rows() {
        let mut rng = Rng::new(9);
        let keys = Tensor::<f64>::from_fn(&[20, 3], |_| rng.normal());
        let cb = Codebook::seed_from_keys(&keys, 5, 0.99, 1e-5, &mut rng).unwrap();
        for s in 0..5 {
            assert!((0..20).any(|r| keys.row(r) == cb.code(s)));
        }
        // All-identical keys fall back to uniform draws.
        let same = Tensor::<f64>::full(&[3, 2], 1.5);
        let cb = Codebook::seed_from_keys(&same, 4, 0.99, 1e-5, &mut rng).unwrap();
        assert!(cb.codes().data().iter().all(|&v| v == 1.5));
    }
}
