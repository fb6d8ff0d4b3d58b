use crate::error::{Error, Result};

pub const MAX_BASIS: usize = 200;

// (2π)^{-1/4}
const H0_SCALE: f64 = 0.631_618_777_746_064_7;

/// Orthonormal Hermite functions `e_{k+1}(x) = √(φ(x)/k!)·He_k(x)` for
/// `k = 0..n`, with `φ` the standard normal density.
///
/// Values come from the three-term recurrence on the weighted functions
///
/// ```text
/// ψ₀ = (2π)^{-1/4} e^{-x²/4}
/// ψ_{k+1} = (x ψ_k − √k ψ_{k−1}) / √(k+1)
/// ψ_k'    = −(x/2) ψ_k + √k ψ_{k−1}
/// ```
///
/// so raw polynomials are never formed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HermiteBasis {
    n: usize,
}

impl HermiteBasis {
    pub fn new(n: usize) -> Result<Self> {
        if !(1..=MAX_BASIS).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "basis dimension must be in 1..={MAX_BASIS}, got {n}"
            )));
        }
        Ok(Self { n })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Fills `vals[k] = ψ_k(x)` for `k < vals.len()`.
    pub fn eval_into(&self, x: f64, vals: &mut [f64]) {
        hermite_functions(x, vals);
    }

    pub fn eval_with_derivatives(&self, x: f64, vals: &mut [f64], ders: &mut [f64]) {
        debug_assert_eq!(vals.len(), self.n);
        debug_assert_eq!(ders.len(), self.n);
        hermite_functions(x, vals);
        ders[0] = -0.5 * x * vals[0];
        for k in 1..self.n {
            ders[k] = -0.5 * x * vals[k] + (k as f64).sqrt() * vals[k - 1];
        }
    }

    pub fn values(&self, x: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.n];
        hermite_functions(x, &mut v);
        v
    }
}

/// `ψ_k(x)` for `k < out.len()`.
pub(crate) fn hermite_functions(x: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    out[0] = H0_SCALE * (-0.25 * x * x).exp();
    if out.len() > 1 {
        out[1] = x * out[0];
    }
    for k in 1..out.len().saturating_sub(1) {
        let kf = k as f64;
        out[k + 1] = (x * out[k] - kf.sqrt() * out[k - 1]) / (kf + 1.0).sqrt();
    }
}
