use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Per-code counts and value sums for a set of shortcodes: `n = Delta 1` and
/// `U = Delta V` where `Delta` is the code-to-position indicator matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeStats<T: Real> {
    pub counts: Vec<T>,
    /// `S x v`.
    pub sums: Tensor<T>,
}

impl<T: Real> CodeStats<T> {
    pub fn zeros(size: usize, v_dim: usize) -> Self {
        Self {
            counts: vec![T::zero(); size],
            sums: Tensor::zeros(&[size, v_dim]),
        }
    }

    pub fn size(&self) -> usize {
        self.counts.len()
    }

    /// Add positions with shortcodes `z` and value rows `values` (`len(z) x v`).
    pub fn accumulate(&mut self, z: &[usize], values: &[T]) -> Result<()> {
        let size = self.size();
        let v_dim = self.sums.cols();
        if values.len() != z.len() * v_dim {
            return Err(Error::shape(
                "code_stats",
                format!("{} shortcodes with {} value entries", z.len(), values.len()),
            ));
        }
        for (l, &s) in z.iter().enumerate() {
            if s >= size {
                return Err(Error::Invalid(format!("shortcode {s} out of range for {size} codes")));
            }
            self.counts[s] = self.counts[s] + T::one();
            let row = self.sums.row_mut(s);
            for (a, &v) in row.iter_mut().zip(&values[l * v_dim..(l + 1) * v_dim]) {
                *a = *a + v;
            }
        }
        Ok(())
    }

    /// Statistics of one sequence.
    pub fn build(z: &[usize], values: &Tensor<T>, size: usize) -> Result<Self> {
        let (rows, v_dim) = values.dims2()?;
        if rows != z.len() {
            return Err(Error::shape("code_stats", format!("{} shortcodes for {rows} values", z.len())));
        }
        let mut stats = Self::zeros(size, v_dim);
        stats.accumulate(z, values.data())?;
        Ok(stats)
    }
}

/// `exp` of the entropy of the empirical shortcode distribution; 1 for an
/// empty sequence.
pub fn perplexity(z: &[usize], size: usize) -> f64 {
    if z.is_empty() {
        return 1.0;
    }
    let mut counts = vec![0usize; size.max(z.iter().max().map_or(0, |m| m + 1))];
    for &s in z {
        counts[s] += 1;
    }
    let total = z.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    entropy.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_summation() {
        let v = Tensor::from_f64(&[3, 1], &[1.0, 2.0, 3.0]).unwrap();
        let st = CodeStats::<f64>::build(&[0, 1, 0], &v, 3).unwrap();
        assert_eq!(st.counts, vec![2.0, 1.0, 0.0]);
        assert_eq!(st.sums.data(), &[4.0, 2.0, 0.0]);
        let empty = CodeStats::<f64>::build(&[], &Tensor::zeros(&[0, 2]), 3).unwrap();
        assert_eq!(empty, CodeStats::zeros(3, 2));
        assert!(CodeStats::<f64>::build(&[3], &Tensor::zeros(&[1, 1]), 3).is_err());
    }

    #[test]
    fn perplexity_examples() {
        assert!((perplexity(&[2, 2, 2], 4) - 1.0).abs() < 1e-12);
        assert!((perplexity(&[0, 1, 2, 3], 4) - 4.0).abs() < 1e-12);
        assert!((perplexity(&[0, 0, 1, 1], 4) - 2.0).abs() < 1e-12);
    }
}
