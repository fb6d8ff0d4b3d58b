//! Hermite spectral Galerkin space and the matrices of the filter operators.
//!
//! With trial function `e_j` and test function `e_i` the assembled forms are
//!
//! ```text
//! G[i][j]  = −(A e_j', e_i') + (δ e_j, e_i') − ((λ−1) e_j, e_i)
//! Bm[i][j] = (h D⁻¹ e_j, e_i) + (B₁ e_j, e_i')
//! Cm[i][j] = ((λ−1) e_j, e_i)
//! ```
//!
//! i.e. the weak forms of `L* − C`, `B*` and `C` with every derivative on a
//! basis function.

mod basis;
mod quadrature;

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

pub use basis::{HermiteBasis, MAX_BASIS};
pub use quadrature::{gauss_quadrature, GaussRule, MAX_QUAD_ORDER};

use crate::error::{Error, Result};
use crate::model::DerivedCoefficients;

/// Extra quadrature nodes required beyond the basis dimension.
pub const SMOOTHNESS_MARGIN: usize = 8;

pub fn default_quad_order(n: usize) -> usize {
    (2 * n + 16).min(MAX_QUAD_ORDER)
}

pub fn min_quad_order(n: usize) -> usize {
    n + SMOOTHNESS_MARGIN
}

#[derive(Clone, Debug)]
pub struct SpectralSpace {
    basis: HermiteBasis,
    rule: GaussRule,
    /// Weak form of `L* − C`.
    pub g: DMatrix<f64>,
    /// Weak form of `B*`.
    pub bm: DMatrix<f64>,
    /// Multiplication by `λ − 1`.
    pub cm: DMatrix<f64>,
    /// `∫ e_i dx`.
    pub m0: DVector<f64>,
    /// `∫ x e_i dx`.
    pub m1: DVector<f64>,
    /// `∫ x² e_i dx`.
    pub m2: DVector<f64>,
    obs_variance: f64,
}

fn check_finite(m: &DMatrix<f64>, name: &'static str) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if !m[(i, j)].is_finite() {
                return Err(Error::NonFiniteEntry {
                    matrix: name,
                    row: i,
                    col: j,
                });
            }
        }
    }
    Ok(())
}

/// Assembles all Galerkin matrices and moment vectors.
pub fn assemble(derived: &DerivedCoefficients, basis: &HermiteBasis, rule: &GaussRule) -> Result<SpectralSpace> {
    let n = basis.n();
    if rule.order() < min_quad_order(n) {
        return Err(Error::InvalidArgument(format!(
            "quadrature order {} below minimum {} for basis dimension {n}",
            rule.order(),
            min_quad_order(n)
        )));
    }
    let model = derived.model();
    let mut g = DMatrix::zeros(n, n);
    let mut bm = DMatrix::zeros(n, n);
    let mut cm = DMatrix::zeros(n, n);
    let mut v = DVector::zeros(n);
    let mut d = DVector::zeros(n);
    for (&x, &w) in rule.nodes.iter().zip(&rule.scaled_weights) {
        basis.eval_with_derivatives(x, v.as_mut_slice(), d.as_mut_slice());
        let a = derived.a(x);
        let delta = derived.delta(x);
        let jump = model.intensity.eval(x) - 1.0;
        let obs = model.sensor.eval(x) * derived.d_inv;
        let b1 = derived.b1(x);
        // rank-one updates: (row = test i, col = trial j)
        g.ger(-w * a, &d, &d, 1.0);
        g.ger(w * delta, &d, &v, 1.0);
        g.ger(-w * jump, &v, &v, 1.0);
        bm.ger(w * obs, &v, &v, 1.0);
        bm.ger(w * b1, &d, &v, 1.0);
        cm.ger(w * jump, &v, &v, 1.0);
    }
    check_finite(&g, "G")?;
    check_finite(&bm, "Bm")?;
    check_finite(&cm, "Cm")?;

    // Moments integrate e^{−x²/4}·poly, so use the rule rescaled to that weight.
    let mut m0 = DVector::zeros(n);
    let mut m1 = DVector::zeros(n);
    let mut m2 = DVector::zeros(n);
    let s2 = std::f64::consts::SQRT_2;
    for (&u, &w) in rule.nodes.iter().zip(&rule.scaled_weights) {
        let x = s2 * u;
        let w = s2 * w;
        basis.eval_into(x, v.as_mut_slice());
        m0.axpy(w, &v, 1.0);
        m1.axpy(w * x, &v, 1.0);
        m2.axpy(w * x * x, &v, 1.0);
    }

    Ok(SpectralSpace {
        basis: basis.clone(),
        rule: rule.clone(),
        g,
        bm,
        cm,
        m0,
        m1,
        m2,
        obs_variance: derived.d,
    })
}

/// Builds basis, rule (default order when `quad_order` is `None`) and space.
pub fn build_space(derived: &DerivedCoefficients, n: usize, quad_order: Option<usize>) -> Result<SpectralSpace> {
    let basis = HermiteBasis::new(n)?;
    let rule = gauss_quadrature(quad_order.unwrap_or_else(|| default_quad_order(n)))?;
    assemble(derived, &basis, &rule)
}

impl SpectralSpace {
    pub fn n(&self) -> usize {
        self.basis.n()
    }

    pub fn basis(&self) -> &HermiteBasis {
        &self.basis
    }

    pub fn rule(&self) -> &GaussRule {
        &self.rule
    }

    pub fn quad_order(&self) -> usize {
        self.rule.order()
    }

    /// `D·λ_max(Bmᵀ Bm)`: largest Rayleigh quotient of `|B*p|²_D / ‖p‖²`
    /// over the space.
    pub fn observation_bound(&self) -> f64 {
        let gram = self.bm.transpose() * &self.bm;
        let eig = SymmetricEigen::new(gram).eigenvalues;
        self.obs_variance * eig.max()
    }

    /// Smallest eigenvalue of the symmetric part of `−G + α I`.
    pub fn coercivity_margin(&self, alpha: f64) -> f64 {
        let n = self.n();
        let sym = (&self.g + self.g.transpose()) * -0.5 + DMatrix::identity(n, n) * alpha;
        SymmetricEigen::new(sym).eigenvalues.min()
    }

    /// Gram matrix `⟨e_i, e_j⟩` by quadrature.
    pub fn mass_matrix(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        let mut v = DVector::zeros(n);
        for (&x, &w) in self.rule.nodes.iter().zip(&self.rule.scaled_weights) {
            self.basis.eval_into(x, v.as_mut_slice());
            m.ger(w, &v, &v, 1.0);
        }
        m
    }

    /// Writes `G.csv`, `Bm.csv`, `Cm.csv` and `moments.csv` into `dir`.
    pub fn dump_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, m) in [("G", &self.g), ("Bm", &self.bm), ("Cm", &self.cm)] {
            let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{name}.csv")))?);
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])).collect();
                writeln!(f, "{}", row.join(","))?;
            }
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("moments.csv"))?);
        writeln!(f, "i,m0,m1,m2")?;
        for i in 0..self.n() {
            writeln!(f, "{},{:e},{:e},{:e}", i + 1, self.m0[i], self.m1[i], self.m2[i])?;
        }
        Ok(())
    }
}

/// Coefficients of a Gaussian density in the basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coeffs: Vec<f64>,
    /// `‖p₀ − Σ c_i e_i‖_{L²}`.
    pub l2_error: f64,
    /// `‖p₀‖_{L²}`.
    pub l2_norm: f64,
}

impl Projection {
    pub fn relative_error(&self) -> f64 {
        self.l2_error / self.l2_norm
    }
}

/// `c_i = ⟨p₀, e_i⟩` for `p₀ = N(mean, var)`, computed as the expectation
/// `E[e_i(mean + sd·U)]`. The truncation error follows from Parseval.
pub fn project_gaussian(basis: &HermiteBasis, rule: &GaussRule, mean: f64, var: f64) -> Result<Projection> {
    if !(var > 0.0 && var.is_finite() && mean.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "projection needs finite mean and positive variance, got N({mean}, {var})"
        )));
    }
    let n = basis.n();
    let sd = var.sqrt();
    let mut coeffs = vec![0.0; n];
    let mut v = vec![0.0; n];
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    for (&u, &w) in rule.nodes.iter().zip(&rule.weights) {
        basis.eval_into(mean + sd * u, &mut v);
        for (c, vi) in coeffs.iter_mut().zip(&v) {
            *c += norm * w * vi;
        }
    }
    let norm_sq = 1.0 / (2.0 * sd * std::f64::consts::PI.sqrt());
    let captured: f64 = coeffs.iter().map(|c| c * c).sum();
    Ok(Projection {
        coeffs,
        l2_error: (norm_sq - captured).max(0.0).sqrt(),
        l2_norm: norm_sq.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{derive_coefficients, example1, example2, Coefficient, Diffusion};

    fn space_for(model: &crate::model::ModelSpec, n: usize) -> SpectralSpace {
        let d = derive_coefficients(model).unwrap();
        build_space(&d, n, None).unwrap()
    }

    #[test]
    fn orthonormal_basis() {
        for n in [1, 20, 48, 64] {
            let s = space_for(&example1(), n);
            let m = s.mass_matrix();
            let err = (m - DMatrix::<f64>::identity(n, n)).abs().max();
            assert!(err < 1e-10, "n = {n}: {err:e}");
        }
    }

    #[test]
    fn derivative_pairing_is_antisymmetric() {
        let n = 40;
        let basis = HermiteBasis::new(n).unwrap();
        let rule = gauss_quadrature(default_quad_order(n)).unwrap();
        let mut p = DMatrix::<f64>::zeros(n, n);
        let (mut v, mut d) = (DVector::zeros(n), DVector::zeros(n));
        for (&x, &w) in rule.nodes.iter().zip(&rule.scaled_weights) {
            basis.eval_with_derivatives(x, v.as_mut_slice(), d.as_mut_slice());
            p.ger(w, &d, &v, 1.0);
        }
        let err = (&p + p.transpose()).abs().max();
        assert!(err < 1e-10, "{err:e}");
    }

    #[test]
    fn uninformative_intensity_gives_zero_jump_matrix() {
        let s = space_for(&example1().with_constant_intensity(1.0), 32);
        assert!(s.cm.abs().max() < 1e-14);
    }

    #[test]
    fn jump_matrix_symmetric() {
        let s = space_for(&example1(), 48);
        assert!((&s.cm - s.cm.transpose()).abs().max() < 1e-12);
    }

    #[test]
    fn pure_diffusion_stiffness_against_finer_rule() {
        // g = 0, sigma = sqrt(2) (A = 1), lambda = 1: G = −(e_j', e_i').
        let mut m = example1().with_constant_intensity(1.0);
        m.drift = Coefficient::constant(0.0);
        m.diffusion = Diffusion::constant(std::f64::consts::SQRT_2);
        let n = 16;
        let s = space_for(&m, n);
        let basis = HermiteBasis::new(n).unwrap();
        let fine = gauss_quadrature(150).unwrap();
        let mut k = DMatrix::<f64>::zeros(n, n);
        let (mut v, mut d) = (vec![0.0; n], vec![0.0; n]);
        for (&x, &w) in fine.nodes.iter().zip(&fine.scaled_weights) {
            basis.eval_with_derivatives(x, &mut v, &mut d);
            for i in 0..n {
                for j in 0..n {
                    k[(i, j)] -= w * d[i] * d[j];
                }
            }
        }
        assert!((&s.g - &k).abs().max() < 1e-10);
        assert!((&s.g - s.g.transpose()).abs().max() < 1e-12);
        assert!(SymmetricEigen::new(s.g.clone()).eigenvalues.max() < 0.0);
    }

    #[test]
    fn first_moment_closed_form() {
        let s = space_for(&example1(), 1);
        // (2π)^{-1/4} · ∫e^{−x²/4} = (2π)^{-1/4} · 2√π
        let expected = (2.0 * std::f64::consts::PI).powf(-0.25) * 2.0 * std::f64::consts::PI.sqrt();
        assert!((s.m0[0] - expected).abs() < 1e-12);
        assert!((s.m0[0] - 2.239_04).abs() < 1e-5);
    }

    #[test]
    fn moments_match_recurrence() {
        // ∫ψ_{k+1} = √(k/(k+1)) ∫ψ_{k−1}, ∫xψ_k = 2√k ∫ψ_{k−1},
        // ∫x²ψ_k = √(k+1) ∫xψ_{k+1} + √k ∫xψ_{k−1}.
        let n = 48;
        let s = space_for(&example1(), n);
        let mut m0 = vec![0.0; n + 2];
        m0[0] = s.m0[0];
        for k in 1..n + 1 {
            m0[k + 1] = (k as f64 / (k + 1) as f64).sqrt() * m0[k - 1];
        }
        let m1: Vec<f64> = (0..n + 1)
            .map(|k| {
                if k == 0 {
                    0.0
                } else {
                    2.0 * (k as f64).sqrt() * m0[k - 1]
                }
            })
            .collect();
        for k in 0..n {
            let m2 = (k as f64 + 1.0).sqrt() * m1[k + 1] + if k > 0 { (k as f64).sqrt() * m1[k - 1] } else { 0.0 };
            assert!((s.m0[k] - m0[k]).abs() < 1e-12, "m0[{k}]");
            assert!((s.m1[k] - m1[k]).abs() < 1e-11, "m1[{k}]");
            assert!((s.m2[k] - m2).abs() < 1e-10, "m2[{k}]");
        }
    }

    #[test]
    fn quadrature_doubling_is_stable() {
        // smooth coefficients: spectral accuracy
        for model in [
            example1().with_constant_intensity(2.0),
            example2().with_constant_intensity(2.0),
        ] {
            let d = derive_coefficients(&model).unwrap();
            let n = 48;
            let a = build_space(&d, n, None).unwrap();
            let b = build_space(&d, n, Some(2 * default_quad_order(n))).unwrap();
            for (x, y) in [(&a.g, &b.g), (&a.bm, &b.bm), (&a.cm, &b.cm)] {
                assert!((x - y).abs().max() < 1e-10, "{}", model.name);
            }
        }
    }

    #[test]
    fn kinked_intensity_converges_slowly() {
        // clamp() has kinks, so the rule is only algebraically accurate there
        let d = derive_coefficients(&example1()).unwrap();
        let a = build_space(&d, 48, None).unwrap();
        let b = build_space(&d, 48, Some(2 * default_quad_order(48))).unwrap();
        let c = build_space(&d, 48, Some(MAX_QUAD_ORDER)).unwrap();
        let (ab, bc) = ((&a.cm - &b.cm).abs().max(), (&b.cm - &c.cm).abs().max());
        assert!(ab < 0.1 && bc < 0.1);
        assert!((&a.bm - &b.bm).abs().max() < 1e-10);
    }

    #[test]
    fn rejects_thin_quadrature() {
        let d = derive_coefficients(&example1()).unwrap();
        assert!(build_space(&d, 48, Some(50)).is_err());
        assert!(build_space(&d, 48, Some(56)).is_ok());
    }

    #[test]
    fn standard_normal_projection() {
        let n = 48;
        let basis = HermiteBasis::new(n).unwrap();
        let rule = gauss_quadrature(default_quad_order(n)).unwrap();
        let p = project_gaussian(&basis, &rule, 0.0, 1.0).unwrap();
        // c₁ = (2π)^{-3/4} ∫ e^{−3x²/4} dx = (2π)^{-3/4} √(4π/3)
        let pi = std::f64::consts::PI;
        let c1 = (2.0 * pi).powf(-0.75) * (4.0 * pi / 3.0).sqrt();
        assert!((p.coeffs[0] - c1).abs() < 1e-12);
        assert!((p.coeffs[0] - 0.515_715).abs() < 1e-6);
        assert!(p.coeffs[1].abs() < 1e-12);
        assert!(p.relative_error() < 1e-6);
    }

    #[test]
    fn second_moment_of_standard_normal() {
        let n = 48;
        let s = space_for(&example1(), n);
        let p = project_gaussian(s.basis(), s.rule(), 0.0, 1.0).unwrap();
        let c = DVector::from_vec(p.coeffs.clone());
        let mass = s.m0.dot(&c);
        assert!((mass - 1.0).abs() < 1e-8);
        assert!(s.m1.dot(&c).abs() < 1e-8);
        assert!((s.m2.dot(&c) - 1.0).abs() < 1e-8);
    }

    #[test]
    fn tight_prior_truncation_is_reported() {
        // N(5, 0.01) is much narrower than the basis resolves at x = 5.
        let basis = HermiteBasis::new(64).unwrap();
        let rule = gauss_quadrature(default_quad_order(64)).unwrap();
        let tight = project_gaussian(&basis, &rule, 5.0, 0.01).unwrap();
        assert!(tight.relative_error() > 0.4 && tight.relative_error() < 0.6);
        let wide = project_gaussian(&basis, &rule, 5.0, 0.5).unwrap();
        assert!(wide.relative_error() < 1e-4);
        assert!(project_gaussian(&basis, &rule, 5.0, 0.0).is_err());
    }

    #[test]
    fn coercivity_at_matrix_level() {
        for model in [example1(), example2(), example1().with_constant_intensity(2.0)] {
            let d = derive_coefficients(&model).unwrap();
            let s = build_space(&d, 48, None).unwrap();
            assert!(s.coercivity_margin(d.alpha) >= -1e-10, "{}", model.name);
        }
    }
}
