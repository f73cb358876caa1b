use super::dense::weights_for_rows;
use super::kernel::{KernelSpec, SeqView};
use crate::error::Result;
use crate::numerics::Real;

/// Normalized entropy of every attention row: the Shannon entropy of the
/// row's weight distribution divided by the log of its allowed key count.
/// `None` for rows with a single allowed key or all-zero weights.
pub fn row_entropies<T: Real>(x: &SeqView<'_, T>, spec: &KernelSpec) -> Result<Vec<Option<f64>>> {
    x.validate(spec)?;
    let len = x.len;
    let mut out = Vec::with_capacity(len);
    weights_for_rows(x, spec, |i, w| {
        let allowed = if spec.causal { i + 1 } else { len };
        let total: f64 = w.iter().map(|v| v.as_f64()).sum();
        if allowed < 2 || total <= 0.0 {
            out.push(None);
            return;
        }
        let h: f64 = w
            .iter()
            .map(|v| v.as_f64() / total)
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum();
        out.push(Some(h / (allowed as f64).ln()));
    });
    Ok(out)
}

/// Mean of the defined entries of `rows`.
pub fn mean_entropy(rows: &[Option<f64>]) -> Option<f64> {
    let vals: Vec<f64> = rows.iter().flatten().copied().collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
