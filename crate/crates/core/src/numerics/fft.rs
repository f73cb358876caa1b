//! Causal convolution through zero-padded FFTs.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

use super::{Real, Tensor};

/// Forward/inverse transforms of length `next_pow2(2L)` for sequences of
/// length `L`. Zero padding to at least `2L` keeps the circular product free
/// of wrap-around for every causal output index.
pub struct ConvPlan<T: Real> {
    len: usize,
    n: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> ConvPlan<T> {
    pub fn new(len: usize) -> Self {
        let n = (2 * len.max(1)).next_power_of_two();
        let mut planner = FftPlanner::new();
        Self {
            len,
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn transform_len(&self) -> usize {
        self.n
    }

    /// Spectrum of `x` zero-padded to the transform length.
    pub fn spectrum(&self, x: &[T]) -> Vec<Complex<T>> {
        debug_assert!(x.len() <= self.n);
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        self.fwd.process(&mut buf);
        buf
    }

    /// Spectrum of `x` reversed within the sequence length, used for
    /// correlations (adjoint of the causal convolution).
    pub fn reversed_spectrum(&self, x: &[T]) -> Vec<Complex<T>> {
        let mut buf = vec![Complex::new(T::zero(), T::zero()); self.n];
        let l = x.len();
        for (i, &v) in x.iter().enumerate() {
            buf[l - 1 - i].re = v;
        }
        self.fwd.process(&mut buf);
        buf
    }

    /// First `len` real samples of the inverse transform of `spec`.
    pub fn inverse(&self, mut spec: Vec<Complex<T>>) -> Vec<T> {
        self.inv.process(&mut spec);
        let scale = T::one() / T::cast(self.n as f64);
        spec[..self.len].iter().map(|c| c.re * scale).collect()
    }

    /// Inverse transform, reversed within the sequence length.
    pub fn inverse_reversed(&self, spec: Vec<Complex<T>>) -> Vec<T> {
        let mut out = self.inverse(spec);
        out.reverse();
        out
    }

    /// `out[t] = sum_{j<=t} kernel[j] * signal[t-j]`.
    pub fn convolve(&self, kernel: &[T], signal: &[T]) -> Vec<T> {
        let ks = self.spectrum(kernel);
        self.convolve_with(&ks, signal)
    }

    /// Causal convolution against a precomputed kernel spectrum.
    pub fn convolve_with(&self, kernel_spec: &[Complex<T>], signal: &[T]) -> Vec<T> {
        let mut s = self.spectrum(signal);
        for (a, b) in s.iter_mut().zip(kernel_spec) {
            *a = *a * *b;
        }
        self.inverse(s)
    }

    /// `out[s] = sum_{t>=s} g[t] * kernel[t-s]`: the adjoint of
    /// [`convolve`](Self::convolve) with respect to the signal.
    pub fn correlate_with(&self, kernel_spec: &[Complex<T>], g: &[T]) -> Vec<T> {
        let mut s = self.reversed_spectrum(g);
        for (a, b) in s.iter_mut().zip(kernel_spec) {
            *a = *a * *b;
        }
        self.inverse_reversed(s)
    }
}

/// Causal convolution of two equal-length sequences.
pub fn conv_causal<T: Real>(kernel: &Tensor<T>, signal: &Tensor<T>) -> Result<Tensor<T>> {
    if kernel.len() != signal.len() || kernel.is_empty() {
        return Err(Error::shape(
            "conv_causal",
            format!("kernel {} vs signal {}", kernel.len(), signal.len()),
        ));
    }
    kernel.ensure_finite("conv_causal")?;
    signal.ensure_finite("conv_causal")?;
    let plan = ConvPlan::new(kernel.len());
    let out = Tensor::new(&[kernel.len()], plan.convolve(kernel.data(), signal.data()))?;
    out.ensure_finite("conv_causal")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn direct(k: &[f64], s: &[f64]) -> Vec<f64> {
        (0..s.len())
            .map(|t| (0..=t).map(|j| k[j] * s[t - j]).sum())
            .collect()
    }

    #[test]
    fn identity_and_delay() {
        let s = Tensor::<f64>::from_f64(&[3], &[2.0, -1.0, 5.0]).unwrap();
        let id = Tensor::from_f64(&[3], &[1.0, 0.0, 0.0]).unwrap();
        let delay = Tensor::from_f64(&[3], &[0.0, 1.0, 0.0]).unwrap();
        let a = conv_causal(&id, &s).unwrap();
        let b = conv_causal(&delay, &s).unwrap();
        for (x, y) in a.data().iter().zip([2.0, -1.0, 5.0]) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in b.data().iter().zip([0.0, 2.0, -1.0]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn random_l64_matches_direct_sum() {
        let mut rng = Rng::new(7);
        let k: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let s: Vec<f64> = (0..64).map(|_| rng.normal()).collect();
        let out: Tensor<f64> = conv_causal(
            &Tensor::from_f64(&[64], &k).unwrap(),
            &Tensor::from_f64(&[64], &s).unwrap(),
        )
        .unwrap();
        let want = direct(&k, &s);
        for (x, y) in out.data().iter().zip(&want) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn correlation_is_adjoint() {
        let mut rng = Rng::new(3);
        let l = 17;
        let k: Vec<f64> = (0..l).map(|_| rng.normal()).collect();
        let g: Vec<f64> = (0..l).map(|_| rng.normal()).collect();
        let plan = ConvPlan::<f64>::new(l);
        let got = plan.correlate_with(&plan.spectrum(&k), &g);
        for s in 0..l {
            let want: f64 = (s..l).map(|t| g[t] * k[t - s]).sum();
            assert!((got[s] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_mismatch_and_nan() {
        let a = Tensor::<f64>::zeros(&[3]);
        let b = Tensor::<f64>::zeros(&[4]);
        assert!(conv_causal(&a, &b).is_err());
        let c = Tensor::<f64>::from_f64(&[3], &[0.0, f64::NAN, 0.0]).unwrap();
        assert!(conv_causal(&a, &c).is_err());
    }
}
