use nalgebra::{DMatrix, SymmetricEigen};

use super::basis::hermite_functions;
use crate::error::{Error, Result};

pub const MAX_QUAD_ORDER: usize = 400;

/// Gauss rule for `∫ q(x) e^{−x²/2} dx`, exact for polynomial `q` of degree
/// at most `2·order − 1`.
///
/// `scaled_weights[i] = weights[i]·e^{x_i²/2}` integrate functions that
/// already carry the Gaussian factor, `∫ f dx ≈ Σ ŵ_i f(x_i)`, without
/// forming the (tiny) plain weights and (huge) polynomial values separately.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
    pub scaled_weights: Vec<f64>,
}

/// Nodes from the eigenvalues of the Jacobi matrix of the `e^{−t²}` rule,
/// mapped by `x = √2·t` and polished by Newton steps on the orthonormal
/// Hermite function of degree `order`. Weights use the Christoffel form
/// `ŵ_i = 1 / Σ_{k<order} ψ_k(x_i)²`.
pub fn gauss_quadrature(order: usize) -> Result<GaussRule> {
    if !(1..=MAX_QUAD_ORDER).contains(&order) {
        return Err(Error::InvalidArgument(format!(
            "quadrature order must be in 1..={MAX_QUAD_ORDER}, got {order}"
        )));
    }
    let jacobi = DMatrix::from_fn(order, order, |i, j| {
        if i.abs_diff(j) == 1 {
            (i.max(j) as f64 / 2.0).sqrt()
        } else {
            0.0
        }
    });
    let mut t: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    t.sort_by(f64::total_cmp);

    let mut psi = vec![0.0; order + 1];
    let mut nodes: Vec<f64> = t
        .iter()
        .map(|&ti| {
            let mut x = std::f64::consts::SQRT_2 * ti;
            for _ in 0..3 {
                hermite_functions(x, &mut psi);
                // at a zero of ψ_n, ψ_n' = √n ψ_{n−1}
                let d = -0.5 * x * psi[order] + (order as f64).sqrt() * psi[order - 1];
                if d != 0.0 {
                    x -= psi[order] / d;
                }
            }
            x
        })
        .collect();
    for i in 0..order / 2 {
        let j = order - 1 - i;
        let m = 0.5 * (nodes[j] - nodes[i]);
        nodes[i] = -m;
        nodes[j] = m;
    }
    if order % 2 == 1 {
        nodes[order / 2] = 0.0;
    }

    let mut scaled_weights = Vec::with_capacity(order);
    let mut weights = Vec::with_capacity(order);
    let mut psi = vec![0.0; order];
    for &x in &nodes {
        hermite_functions(x, &mut psi);
        let s: f64 = psi.iter().map(|v| v * v).sum();
        let w_hat = 1.0 / s;
        scaled_weights.push(w_hat);
        weights.push(w_hat * (-0.5 * x * x).exp());
    }
    Ok(GaussRule {
        nodes,
        weights,
        scaled_weights,
    })
}

impl GaussRule {
    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// `∫ q(x) e^{−x²/2} dx`.
    pub fn integrate_weighted(&self, q: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&x, &w)| w * q(x)).sum()
    }

    /// `∫ f(x) dx` for `f` carrying its own `e^{−x²/2}` decay.
    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.scaled_weights)
            .map(|(&x, &w)| w * f(x))
            .sum()
    }

    /// `E[f(mean + sd·U)]` for `U ~ N(0, 1)`.
    pub fn normal_expectation(&self, mean: f64, sd: f64, f: impl Fn(f64) -> f64) -> f64 {
        let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        norm * self.integrate_weighted(|u| f(mean + sd * u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

    #[test]
    fn gaussian_integral_any_order() {
        for order in [1, 2, 3, 10, 57, 120, 400] {
            let r = gauss_quadrature(order).unwrap();
            assert!(
                (r.integrate_weighted(|_| 1.0) - SQRT_2PI).abs() < 1e-12,
                "order {order}"
            );
        }
    }

    #[test]
    fn second_moment_and_odd_symmetry() {
        for order in [2, 5, 64] {
            let r = gauss_quadrature(order).unwrap();
            assert!((r.integrate_weighted(|x| x * x) - SQRT_2PI).abs() < 1e-12);
            assert!(r.integrate_weighted(|x| x).abs() < 1e-14);
        }
    }

    #[test]
    fn exact_up_to_degree_2n_minus_1() {
        // E[U^{2k}] = (2k-1)!!
        let r = gauss_quadrature(6).unwrap();
        let mut dfact = 1.0;
        for k in 1..=5 {
            dfact *= (2 * k - 1) as f64;
            let got = r.integrate_weighted(|x| x.powi(2 * k)) / SQRT_2PI;
            assert!((got - dfact).abs() < 1e-10 * dfact, "k = {k}");
        }
        // degree 12 is beyond the rule
        let got = r.integrate_weighted(|x| x.powi(12)) / SQRT_2PI;
        assert!((got - 10395.0).abs() > 1.0);
    }

    #[test]
    fn rejects_bad_orders() {
        assert!(gauss_quadrature(0).is_err());
        assert!(gauss_quadrature(401).is_err());
    }

    #[test]
    fn scaled_weights_consistent() {
        let r = gauss_quadrature(40).unwrap();
        for ((&x, &w), &wh) in r.nodes.iter().zip(&r.weights).zip(&r.scaled_weights) {
            assert!((w - wh * (-0.5 * x * x).exp()).abs() <= 1e-15 * wh.max(1.0));
        }
        assert!(r.nodes.windows(2).all(|p| p[0] < p[1]));
    }
}
