//! Filtering problem definition and the composite coefficients the
//! discretization is built from.
//!
//! The signal and observations are scalar:
//!
//! ```text
//! dX = g(X) dt + σ(X) dw
//! dY = h(X) dt + b dw + b̃ dv
//! Z  = Cox process with intensity λ(X)
//! ```

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;

/// A scalar coefficient function together with a human-readable label.
#[derive(Clone)]
pub struct Coefficient {
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    label: String,
}

impl Coefficient {
    pub fn new(label: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            f: Arc::new(f),
            label: label.into(),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(format!("{c}"), move |_| c)
    }

    pub fn from_expr(expr: Expr, label: impl Into<String>) -> Self {
        Self::new(label, move |x| expr.eval(x))
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Debug for Coefficient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Coefficient({})", self.label)
    }
}

/// Signal diffusion σ with its first two derivatives.
#[derive(Clone, Debug)]
pub struct Diffusion {
    pub value: Coefficient,
    pub d1: Coefficient,
    pub d2: Coefficient,
}

impl Diffusion {
    pub fn constant(s: f64) -> Self {
        Self {
            value: Coefficient::constant(s),
            d1: Coefficient::constant(0.0),
            d2: Coefficient::constant(0.0),
        }
    }

    pub fn from_expr(expr: Expr, label: impl Into<String>) -> Self {
        let d1 = expr.derivative();
        let d2 = d1.derivative();
        let label = label.into();
        Self {
            value: Coefficient::from_expr(expr, label.clone()),
            d1: Coefficient::from_expr(d1, format!("d/dx[{label}]")),
            d2: Coefficient::from_expr(d2, format!("d2/dx2[{label}]")),
        }
    }
}

/// One filtering problem.
#[derive(Clone, Debug)]
pub struct ModelSpec {
    pub name: String,
    pub drift: Coefficient,
    pub diffusion: Diffusion,
    pub sensor: Coefficient,
    /// Loading of the signal's Brownian driver in the observation.
    pub b: f64,
    /// Loading of the independent observation noise.
    pub b_tilde: f64,
    pub intensity: Coefficient,
    /// Declared bounds `[ϖ₁, ϖ₂]` of the intensity.
    pub intensity_bounds: (f64, f64),
    pub x0_mean: f64,
    pub x0_var: f64,
    pub horizon: f64,
}

/// Plain-text description of a model, for manifests and reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub name: String,
    pub drift: String,
    pub sigma: String,
    pub sensor: String,
    pub b: f64,
    pub b_tilde: f64,
    pub intensity: String,
    pub intensity_bounds: (f64, f64),
    pub x0_mean: f64,
    pub x0_var: f64,
    pub horizon: f64,
}

impl ModelSpec {
    /// Checks the structural constraints that do not need a grid.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(msg));
        if !(self.b.is_finite() && self.b_tilde.is_finite()) {
            return bad("observation loadings must be finite".into());
        }
        if self.obs_variance() <= 0.0 {
            return bad("D = b^2 + b_tilde^2 must be positive".into());
        }
        let (lo, hi) = self.intensity_bounds;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad(format!(
                "intensity bounds must satisfy 0 < lower <= upper < inf, got [{lo}, {hi}]"
            ));
        }
        if !(self.x0_var >= 0.0 && self.x0_var.is_finite() && self.x0_mean.is_finite()) {
            return bad("initial law needs finite mean and non-negative variance".into());
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be positive, got {}", self.horizon));
        }
        Ok(())
    }

    /// `D = b² + b̃²`.
    pub fn obs_variance(&self) -> f64 {
        self.b * self.b + self.b_tilde * self.b_tilde
    }

    pub fn summary(&self) -> ModelSummary {
        ModelSummary {
            name: self.name.clone(),
            drift: self.drift.label().to_string(),
            sigma: self.diffusion.value.label().to_string(),
            sensor: self.sensor.label().to_string(),
            b: self.b,
            b_tilde: self.b_tilde,
            intensity: self.intensity.label().to_string(),
            intensity_bounds: self.intensity_bounds,
            x0_mean: self.x0_mean,
            x0_var: self.x0_var,
            horizon: self.horizon,
        }
    }

    pub fn with_intensity(mut self, intensity: Coefficient, bounds: (f64, f64)) -> Self {
        self.intensity = intensity;
        self.intensity_bounds = bounds;
        self
    }

    /// Constant intensity `λ ≡ rate`.
    pub fn with_constant_intensity(self, rate: f64) -> Self {
        self.with_intensity(Coefficient::constant(rate), (rate, rate))
    }

    /// `λ(x) = clamp(scale·x², lo, hi)`.
    pub fn with_capped_quadratic_intensity(self, scale: f64, lo: f64, hi: f64) -> Self {
        self.with_intensity(
            Coefficient::new(format!("clamp({scale}*sqr(x), {lo}, {hi})"), move |x| {
                (scale * x * x).clamp(lo, hi)
            }),
            (lo, hi),
        )
    }

    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }

    pub fn with_initial(mut self, mean: f64, var: f64) -> Self {
        self.x0_mean = mean;
        self.x0_var = var;
        self
    }
}

pub const PRESETS: &[&str] = &["example1", "example2"];

/// Linear model: `dX = 0.5X dt + 2 dw`, `dY = X dt + 0.5 dw + dv`,
/// `X₀ ~ N(5, 0.01)`, intensity `clamp(3x², 0.5, 50)`, horizon 0.5.
pub fn example1() -> ModelSpec {
    ModelSpec {
        name: "example1".into(),
        drift: Coefficient::new("0.5*x", |x| 0.5 * x),
        diffusion: Diffusion::constant(2.0),
        sensor: Coefficient::new("x", |x| x),
        b: 0.5,
        b_tilde: 1.0,
        intensity: Coefficient::constant(1.0),
        intensity_bounds: (1.0, 1.0),
        x0_mean: 5.0,
        x0_var: 0.01,
        horizon: 0.5,
    }
    .with_capped_quadratic_intensity(3.0, 0.5, 50.0)
}

/// Nonlinear model: `dX = sin(X) dt + 2 dw`, `dY = 5.5X dt + 0.5 dw + dv`,
/// `X₀ ~ N(5, 0.01)`, intensity `clamp(3x², 0.1, 50)`, horizon 0.5.
pub fn example2() -> ModelSpec {
    ModelSpec {
        name: "example2".into(),
        drift: Coefficient::new("sin(x)", f64::sin),
        diffusion: Diffusion::constant(2.0),
        sensor: Coefficient::new("5.5*x", |x| 5.5 * x),
        b: 0.5,
        b_tilde: 1.0,
        intensity: Coefficient::constant(1.0),
        intensity_bounds: (1.0, 1.0),
        x0_mean: 5.0,
        x0_var: 0.01,
        horizon: 0.5,
    }
    .with_capped_quadratic_intensity(3.0, 0.1, 50.0)
}

pub fn preset(name: &str) -> Result<ModelSpec> {
    match name {
        "example1" => Ok(example1()),
        "example2" => Ok(example2()),
        other => Err(Error::Config(format!(
            "unknown model preset `{other}` (valid presets: {})",
            PRESETS.join(", ")
        ))),
    }
}

/// Sample points on which coefficient bounds are estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for ValidationGrid {
    fn default() -> Self {
        Self {
            lo: -10.0,
            hi: 10.0,
            points: 2001,
        }
    }
}

impl ValidationGrid {
    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        let n = self.points.max(1);
        let step = if n > 1 {
            (self.hi - self.lo) / (n - 1) as f64
        } else {
            0.0
        };
        (0..n).map(move |i| self.lo + step * i as f64)
    }

    fn inner_half(&self) -> ValidationGrid {
        let mid = 0.5 * (self.lo + self.hi);
        let half = 0.25 * (self.hi - self.lo);
        ValidationGrid {
            lo: mid - half,
            hi: mid + half,
            points: self.points.div_ceil(2).max(1),
        }
    }
}

/// Quantities derived from a [`ModelSpec`] that the spectral operators and
/// the particle oracle share.
#[derive(Clone, Debug)]
pub struct DerivedCoefficients {
    model: ModelSpec,
    pub d: f64,
    pub d_inv: f64,
    /// `√(1 − b²/D)`.
    pub b2_factor: f64,
    /// Upper bound for the observation-operator constant `M`.
    pub m_bound: f64,
    /// Lower ellipticity bound `α₁` (grid minimum of `A`).
    pub alpha1: f64,
    pub alpha2: f64,
    /// Grid sup-norm squared of `δ`.
    pub delta_sup_sq: f64,
    /// Coercivity shift `α`.
    pub alpha: f64,
    /// Coercivity constant `β₂`.
    pub beta2: f64,
    /// Stabilization shift from [`select_mu`] without override.
    pub mu: f64,
}

impl DerivedCoefficients {
    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    /// `A(x) = σ(x)²/2`.
    #[inline]
    pub fn a(&self, x: f64) -> f64 {
        let s = self.model.diffusion.value.eval(x);
        0.5 * s * s
    }

    /// `A'(x) = σ(x)σ'(x)`.
    #[inline]
    pub fn a_prime(&self, x: f64) -> f64 {
        self.model.diffusion.value.eval(x) * self.model.diffusion.d1.eval(x)
    }

    /// `δ(x) = g(x) − A'(x)`.
    #[inline]
    pub fn delta(&self, x: f64) -> f64 {
        self.model.drift.eval(x) - self.a_prime(x)
    }

    /// `B₁(x) = σ(x)·b/D`.
    #[inline]
    pub fn b1(&self, x: f64) -> f64 {
        self.model.diffusion.value.eval(x) * self.model.b * self.d_inv
    }

    #[inline]
    pub fn b1_prime(&self, x: f64) -> f64 {
        self.model.diffusion.d1.eval(x) * self.model.b * self.d_inv
    }

    /// `B₂(x) = σ(x)·√(1 − b²/D)`.
    #[inline]
    pub fn b2(&self, x: f64) -> f64 {
        self.model.diffusion.value.eval(x) * self.b2_factor
    }

    /// Raises `m_bound` to at least `spectral_m` (a Rayleigh-quotient
    /// estimate from the assembled observation matrix) and re-selects `mu`.
    pub fn refine_m_bound(&mut self, spectral_m: f64) {
        if spectral_m > self.m_bound {
            self.m_bound = spectral_m;
        }
        self.mu = full_mu(self);
    }
}

/// Derives all composite coefficients on the default validation grid.
pub fn derive_coefficients(model: &ModelSpec) -> Result<DerivedCoefficients> {
    derive_coefficients_on(model, &ValidationGrid::default())
}

pub fn derive_coefficients_on(model: &ModelSpec, grid: &ValidationGrid) -> Result<DerivedCoefficients> {
    model.check()?;
    let d = model.obs_variance();
    let radicand = 1.0 - model.b * model.b / d;
    if radicand < 0.0 {
        return Err(Error::InvalidModel(format!(
            "1 - b^2/D = {radicand:e} is negative; B2 would be imaginary"
        )));
    }
    let mut derived = DerivedCoefficients {
        model: model.clone(),
        d,
        d_inv: 1.0 / d,
        b2_factor: radicand.sqrt(),
        m_bound: 0.0,
        alpha1: f64::INFINITY,
        alpha2: f64::NEG_INFINITY,
        delta_sup_sq: 0.0,
        alpha: 0.0,
        beta2: 0.0,
        mu: 0.0,
    };
    let mut m_grid: f64 = 0.0;
    for x in grid.iter() {
        let a = derived.a(x);
        derived.alpha1 = derived.alpha1.min(a);
        derived.alpha2 = derived.alpha2.max(a);
        let delta = derived.delta(x);
        derived.delta_sup_sq = derived.delta_sup_sq.max(delta * delta);
        let h = model.sensor.eval(x);
        let b1p = derived.b1_prime(x);
        m_grid = m_grid.max(2.0 * (h * h * derived.d_inv + d * b1p * b1p));
    }
    if !(derived.alpha1.is_finite() && derived.delta_sup_sq.is_finite() && m_grid.is_finite()) {
        return Err(Error::InvalidModel(
            "coefficients are not finite on the validation grid".into(),
        ));
    }
    derived.m_bound = m_grid;
    let (lower, _) = model.intensity_bounds;
    let margin = if derived.alpha1 > 0.0 {
        lower - 1.0 - derived.delta_sup_sq / (2.0 * derived.alpha1)
    } else {
        f64::NEG_INFINITY
    };
    derived.alpha = (-margin).max(0.0) + 1.0;
    derived.beta2 = (0.5 * derived.alpha1).min(derived.alpha + margin);
    derived.mu = full_mu(&derived);
    Ok(derived)
}

fn full_mu(derived: &DerivedCoefficients) -> f64 {
    let upper = derived.model.intensity_bounds.1;
    (3.0 * derived.alpha)
        .max(1.5 * derived.m_bound)
        .max(1.5 * (upper * upper - 1.0))
        + 1.0
}

/// Result of [`select_mu`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MuSelection {
    pub value: f64,
    /// Set when an override undercuts the automatic choice.
    pub warning: Option<String>,
}

/// Stabilization shift: `max{3α, (3/2)M, (3/2)(ϖ₂² − 1)} + 1`, or the
/// override when one is given.
pub fn select_mu(derived: &DerivedCoefficients, override_mu: Option<f64>) -> Result<MuSelection> {
    let auto = full_mu(derived);
    match override_mu {
        None => Ok(MuSelection {
            value: auto,
            warning: None,
        }),
        Some(v) if !(v >= 0.0) || !v.is_finite() => Err(Error::InvalidArgument(format!(
            "mu override must be finite and non-negative, got {v}"
        ))),
        Some(v) => Ok(MuSelection {
            value: v,
            warning: (v < auto)
                .then(|| format!("mu override {v} is below the automatic value {auto}; stability is not guaranteed")),
        }),
    }
}

/// How the shift used by the splitting scheme is chosen at run time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", content = "value", rename_all = "snake_case")]
pub enum MuRule {
    /// [`select_mu`] without override, using the refined `M` bound.
    Full,
    /// `3α + 1`: enough for the implicit elliptic step to be a contraction.
    #[default]
    Coercive,
    Fixed(f64),
}

impl MuRule {
    pub fn resolve(&self, derived: &DerivedCoefficients) -> Result<f64> {
        match *self {
            MuRule::Full => Ok(full_mu(derived)),
            MuRule::Coercive => Ok(3.0 * derived.alpha + 1.0),
            MuRule::Fixed(v) => select_mu(derived, Some(v)).map(|s| s.value),
        }
    }
}

impl std::str::FromStr for MuRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" | "auto" => Ok(MuRule::Full),
            "coercive" => Ok(MuRule::Coercive),
            other => other
                .parse::<f64>()
                .map(MuRule::Fixed)
                .map_err(|_| Error::Config(format!("mu must be `full`, `coercive` or a number, got `{other}`"))),
        }
    }
}

/// A violated (or suspect) assumption found on the validation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Violation {
    /// `A = σ²/2` reaches zero or below.
    Degenerate {
        min_a: f64,
    },
    /// λ falls below the declared lower bound or is not positive.
    IntensityBelow {
        x: f64,
        value: f64,
        bound: f64,
    },
    IntensityAbove {
        x: f64,
        value: f64,
        bound: f64,
    },
    /// |h| keeps growing towards the grid edge.
    UnboundedSensor {
        edge_max: f64,
        inner_max: f64,
    },
    UnboundedDrift {
        edge_max: f64,
        inner_max: f64,
    },
    NonFinite {
        what: String,
        x: f64,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Degenerate { min_a } => write!(f, "A = sigma^2/2 not uniformly positive (min {min_a})"),
            Violation::IntensityBelow { x, value, bound } => {
                write!(f, "intensity {value} at x = {x} below lower bound {bound}")
            }
            Violation::IntensityAbove { x, value, bound } => {
                write!(f, "intensity {value} at x = {x} above upper bound {bound}")
            }
            Violation::UnboundedSensor { edge_max, inner_max } => write!(
                f,
                "unbounded sensor, H2 violated beyond grid (|h| {inner_max} -> {edge_max})"
            ),
            Violation::UnboundedDrift { edge_max, inner_max } => write!(
                f,
                "unbounded drift, H2 violated beyond grid (|g| {inner_max} -> {edge_max})"
            ),
            Violation::NonFinite { what, x } => write!(f, "{what} not finite at x = {x}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub grid: ValidationGrid,
    pub a_range: (f64, f64),
    pub intensity_range: (f64, f64),
    pub sensor_abs_max: f64,
    pub drift_abs_max: f64,
    /// Estimates of `α₁, α₂` (range of `A`).
    pub alpha1: f64,
    pub alpha2: f64,
    /// Estimates of `ϖ₁, ϖ₂` (range of λ).
    pub varpi1: f64,
    pub varpi2: f64,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn abs_max(f: &Coefficient, grid: &ValidationGrid) -> f64 {
    grid.iter().map(|x| f.eval(x).abs()).fold(0.0, f64::max)
}

/// Reports coefficient ranges on `grid` and flags violated assumptions.
pub fn validate_assumptions(model: &ModelSpec, grid: &ValidationGrid) -> ValidationReport {
    let mut violations = Vec::new();
    let (mut a_lo, mut a_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut l_lo, mut l_hi) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut l_lo_x, mut l_hi_x) = (f64::NAN, f64::NAN);
    let (bound_lo, bound_hi) = model.intensity_bounds;
    for x in grid.iter() {
        let s = model.diffusion.value.eval(x);
        let a = 0.5 * s * s;
        let lam = model.intensity.eval(x);
        for (what, v) in [
            ("sigma", s),
            ("intensity", lam),
            ("sensor", model.sensor.eval(x)),
            ("drift", model.drift.eval(x)),
        ] {
            if !v.is_finite() {
                violations.push(Violation::NonFinite { what: what.into(), x });
            }
        }
        a_lo = a_lo.min(a);
        a_hi = a_hi.max(a);
        if lam < l_lo {
            l_lo = lam;
            l_lo_x = x;
        }
        if lam > l_hi {
            l_hi = lam;
            l_hi_x = x;
        }
    }
    if !(a_lo > 0.0) {
        violations.push(Violation::Degenerate { min_a: a_lo });
    }
    if !(l_lo > 0.0) || l_lo < bound_lo {
        violations.push(Violation::IntensityBelow {
            x: l_lo_x,
            value: l_lo,
            bound: bound_lo.max(0.0),
        });
    }
    if l_hi > bound_hi {
        violations.push(Violation::IntensityAbove {
            x: l_hi_x,
            value: l_hi,
            bound: bound_hi,
        });
    }
    let inner = grid.inner_half();
    let sensor_max = abs_max(&model.sensor, grid);
    let sensor_inner = abs_max(&model.sensor, &inner);
    if grows_to_edge(sensor_max, sensor_inner) {
        violations.push(Violation::UnboundedSensor {
            edge_max: sensor_max,
            inner_max: sensor_inner,
        });
    }
    let drift_max = abs_max(&model.drift, grid);
    let drift_inner = abs_max(&model.drift, &inner);
    if grows_to_edge(drift_max, drift_inner) {
        violations.push(Violation::UnboundedDrift {
            edge_max: drift_max,
            inner_max: drift_inner,
        });
    }
    ValidationReport {
        grid: grid.clone(),
        a_range: (a_lo, a_hi),
        intensity_range: (l_lo, l_hi),
        sensor_abs_max: sensor_max,
        drift_abs_max: drift_max,
        alpha1: a_lo,
        alpha2: a_hi,
        varpi1: l_lo,
        varpi2: l_hi,
        violations,
    }
}

// A bounded coefficient saturates: its sup over the full grid is close to
// the sup over the inner half. Linear growth gives a ratio of 2.
fn grows_to_edge(full: f64, inner: f64) -> bool {
    full > 1e-12 && full > 1.5 * inner
}
