//! Central finite differences: the independent oracle for every backward rule.

use super::{Real, Tensor};

/// `(f(p + eps e_i) - f(p - eps e_i)) / (2 eps)` for every coordinate of every
/// parameter tensor. Intended for 64-bit evaluation.
pub fn finite_diff<T: Real>(
    mut f: impl FnMut(&[Tensor<T>]) -> T,
    params: &[Tensor<T>],
    eps: f64,
) -> Vec<Tensor<T>> {
    assert!(eps > 0.0, "finite_diff: eps must be positive");
    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    let e = T::cast(eps);
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + e;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - e;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            grad.data_mut()[i] = (plus - minus) / (e + e);
        }
        out.push(grad);
    }
    out
}
