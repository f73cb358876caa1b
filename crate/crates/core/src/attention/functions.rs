use std::f64::consts::PI;
use std::fmt::Debug;
use std::sync::Arc;

use crate::registry::Registry;

/// Scalar function turning attention logits into weights.
///
/// Normalized functions are applied to logits shifted by the row maximum and
/// divided by the row sum; the rest are applied elementwise as is.
pub trait AttentionFn: Send + Sync + Debug {
    fn name(&self) -> &'static str;

    fn normalized(&self) -> bool;

    fn weight(&self, x: f64) -> f64;

    /// Derivative of [`weight`](Self::weight).
    fn weight_grad(&self, x: f64) -> f64;
}

#[derive(Debug)]
pub struct Softmax;

impl AttentionFn for Softmax {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn normalized(&self) -> bool {
        true
    }

    fn weight(&self, x: f64) -> f64 {
        x.exp()
    }

    fn weight_grad(&self, x: f64) -> f64 {
        x.exp()
    }
}

/// `relu(x)^2`.
#[derive(Debug)]
pub struct Relu2;

impl AttentionFn for Relu2 {
    fn name(&self) -> &'static str {
        "relu2"
    }

    fn normalized(&self) -> bool {
        false
    }

    fn weight(&self, x: f64) -> f64 {
        let r = x.max(0.0);
        r * r
    }

    fn weight_grad(&self, x: f64) -> f64 {
        2.0 * x.max(0.0)
    }
}

/// Gaussian CDF with mean `sqrt(1/2)` and standard deviation `sqrt(1/(4 pi))`,
/// a bounded approximation of `relu2` near the origin.
#[derive(Debug)]
pub struct Laplace;

impl Laplace {
    pub const MU: f64 = std::f64::consts::FRAC_1_SQRT_2;

    pub fn sigma() -> f64 {
        (0.25 / PI).sqrt()
    }
}

impl AttentionFn for Laplace {
    fn name(&self) -> &'static str {
        "laplace"
    }

    fn normalized(&self) -> bool {
        false
    }

    fn weight(&self, x: f64) -> f64 {
        0.5 * (1.0 + libm::erf((x - Self::MU) / (Self::sigma() * std::f64::consts::SQRT_2)))
    }

    fn weight_grad(&self, x: f64) -> f64 {
        let s = Self::sigma();
        let u = (x - Self::MU) / s;
        (-0.5 * u * u).exp() / (s * (2.0 * PI).sqrt())
    }
}

/// Registry of the built-in attention functions.
pub fn attention_functions() -> Registry<dyn AttentionFn> {
    let mut r: Registry<dyn AttentionFn> = Registry::new("attention function");
    for f in [Arc::new(Softmax) as Arc<dyn AttentionFn>, Arc::new(Relu2), Arc::new(Laplace)] {
        r.register(f.name(), f).expect("built-in names are distinct");
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_differences() {
        for name in ["softmax", "relu2", "laplace"] {
            let f = attention_functions().get(name).unwrap();
            for x in [-1.3, -0.2, 0.4, 0.75, 1.9] {
                let h = 1e-6;
                let fd = (f.weight(x + h) - f.weight(x - h)) / (2.0 * h);
                assert!((fd - f.weight_grad(x)).abs() < 1e-6, "{name} at {x}");
            }
        }
    }

    #[test]
    fn laplace_midpoint_and_limits() {
        let f = Laplace;
        assert!((f.weight(Laplace::MU) - 0.5).abs() < 1e-15);
        assert!(f.weight(-5.0) < 1e-12);
        assert!((f.weight(5.0) - 1.0).abs() < 1e-12);
        assert_eq!(Relu2.weight(-3.0), 0.0);
        assert_eq!(Relu2.weight(2.0), 4.0);
    }

    #[test]
    fn unknown_function_lists_known() {
        let err = attention_functions().get("cosine").unwrap_err().to_string();
        assert!(err.contains("softmax") && err.contains("laplace"));
    }
}
