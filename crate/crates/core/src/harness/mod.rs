//! Experiment drivers: strong-convergence study, conditional-std reduction
//! and oracle cross-checks, plus report serialization.

mod report;

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{emit_report, write_dkappa_csv};

use crate::error::{Error, Result};
use crate::model::{derive_coefficients, DerivedCoefficients, ModelSpec, ModelSummary, MuRule};
use crate::oracle::{kalman_bucy, particle_filter, LinearGaussian, ParticleOptions};
use crate::rng::SeedRecord;
use crate::simulate::{coarsen_path, simulate_path, PathBundle};
use crate::spectral::{build_space, default_quad_order, SpectralSpace};
use crate::zakai::{run_filter, DensityState, FilterOptions, FilterTrajectory, SplittingScheme};

/// Fraction of excluded paths above which a level invalidates the report.
pub const MAX_EXCLUDED_FRACTION: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub model: ModelSpec,
    /// Reference grid has `2^ref_level` steps.
    pub ref_level: u32,
    /// Test grids have `2^level` steps.
    pub levels: Vec<u32>,
    pub paths: usize,
    pub basis: usize,
    pub quad_order: Option<usize>,
    pub mu: MuRule,
    pub mass_floor: f64,
    pub particles: usize,
    pub seed: u64,
    /// Keep per-path trajectories in the report.
    pub keep_trajectories: bool,
}

impl StudyConfig {
    pub fn new(model: ModelSpec) -> Self {
        Self {
            model,
            ref_level: 14,
            levels: (8..=11).collect(),
            paths: 50,
            basis: 48,
            quad_order: None,
            mu: MuRule::default(),
            mass_floor: crate::zakai::DEFAULT_MASS_FLOOR,
            particles: 20_000,
            seed: 0,
            keep_trajectories: false,
        }
    }

    /// Checks shared by every study; convergence studies also check levels.
    pub fn validate_common(&self) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::Config("at least one path is required".into()));
        }
        if self.ref_level > 24 {
            return Err(Error::Config(format!(
                "reference level 2^{} is too large",
                self.ref_level
            )));
        }
        self.model.check().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_common()?;
        if self.levels.is_empty() {
            return Err(Error::Config("no test levels given".into()));
        }
        if let Some(&bad) = self.levels.iter().find(|&&l| l > self.ref_level) {
            return Err(Error::Config(format!(
                "level 2^{bad} does not divide the reference grid 2^{}",
                self.ref_level
            )));
        }
        Ok(())
    }

    pub fn ref_steps(&self) -> usize {
        1 << self.ref_level
    }

    pub fn filter_options(&self) -> FilterOptions {
        FilterOptions {
            mass_floor: self.mass_floor,
        }
    }
}

/// Everything needed to reproduce a study.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub paths: usize,
    pub basis: usize,
    pub quad_order: usize,
    pub mu: f64,
    pub mu_rule: MuRule,
    pub mass_floor: f64,
    pub ref_level: u32,
    pub levels: Vec<u32>,
    pub model: ModelSummary,
    pub version: String,
}

/// Coefficients, space and shift shared by every run of a study.
pub struct Prepared {
    pub derived: DerivedCoefficients,
    pub space: SpectralSpace,
    pub mu: f64,
}

impl Prepared {
    pub fn new(model: &ModelSpec, basis: usize, quad_order: Option<usize>, rule: MuRule) -> Result<Self> {
        let mut derived = derive_coefficients(model)?;
        let space = build_space(&derived, basis, quad_order)?;
        if rule == MuRule::Full {
            derived.refine_m_bound(space.observation_bound());
        }
        let mu = rule.resolve(&derived)?;
        Ok(Self { derived, space, mu })
    }

    pub fn scheme(&self, kappa: f64) -> Result<SplittingScheme<'_>> {
        SplittingScheme::new(&self.space, kappa, self.mu)
    }

    pub fn initial_state(&self) -> Result<DensityState> {
        let m = self.derived.model();
        DensityState::gaussian(&self.space, m.x0_mean, m.x0_var).map(|(s, _)| s)
    }

    /// Filters one path at its own resolution.
    pub fn filter(&self, path: &PathBundle, opts: FilterOptions) -> Result<FilterTrajectory> {
        run_filter(&self.scheme(path.kappa)?, path, &self.initial_state()?, opts)
    }

    fn provenance(&self, cfg: &StudyConfig) -> Provenance {
        Provenance {
            seed: cfg.seed,
            paths: cfg.paths,
            basis: cfg.basis,
            quad_order: self.space.quad_order(),
            mu: self.mu,
            mu_rule: cfg.mu,
            mass_floor: cfg.mass_floor,
            ref_level: cfg.ref_level,
            levels: cfg.levels.clone(),
            model: cfg.model.summary(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelResult {
    pub level: u32,
    pub n_steps: usize,
    pub kappa: f64,
    /// Root-mean-square distance to the reference means.
    pub d: f64,
    /// Delta-method standard error of `d` across paths.
    pub std_error: f64,
    pub used_paths: usize,
    pub degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathTrajectories {
    pub path: u64,
    pub reference: FilterTrajectory,
    pub levels: Vec<FilterTrajectory>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub levels: Vec<LevelResult>,
    /// Least-squares slope of `log₂ d` against `log₂ κ`.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub reference_degenerate: usize,
    pub valid: bool,
    pub warnings: Vec<String>,
    pub runtime_secs: f64,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectories: Vec<PathTrajectories>,
}

/// Ordinary least squares `y = a + s·x`; `None` with fewer than two
/// distinct abscissae.
pub fn fit_line(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

struct PathOutcome {
    reference_ok: bool,
    /// Per level: mean squared error over coarse grid points, `None` when
    /// the coarse run degenerated.
    errors: Vec<Option<f64>>,
    trajectories: Option<PathTrajectories>,
}

fn run_path(cfg: &StudyConfig, prep: &Prepared, schemes: &[(u32, SplittingScheme<'_>)], j: u64) -> Result<PathOutcome> {
    let p0 = prep.initial_state()?;
    let opts = cfg.filter_options();
    let fine = simulate_path(&cfg.model, cfg.ref_steps(), SeedRecord::new(cfg.seed, j))?;
    let reference = run_filter(&prep.scheme(fine.kappa)?, &fine, &p0, opts)?;
    let mut errors = Vec::with_capacity(schemes.len());
    let mut kept = Vec::new();
    for (level, scheme) in schemes {
        let factor = 1usize << (cfg.ref_level - level);
        let coarse = coarsen_path(&fine, factor)?;
        let traj = run_filter(scheme, &coarse, &p0, opts)?;
        errors.push((!traj.is_degenerate()).then(|| {
            let n = coarse.n_steps;
            (1..=n)
                .map(|r| (reference.means[r * factor] - traj.means[r]).powi(2))
                .sum::<f64>()
                / n as f64
        }));
        if cfg.keep_trajectories {
            kept.push(traj);
        }
    }
    let reference_ok = !reference.is_degenerate();
    Ok(PathOutcome {
        reference_ok,
        errors,
        trajectories: cfg.keep_trajectories.then_some(PathTrajectories {
            path: j,
            reference,
            levels: kept,
        }),
    })
}

/// Strong-error study: every level of path `j` is a coarsening of the same
/// fine path, filtered independently and compared with the fine-grid filter
/// at the shared grid points.
pub fn convergence_study(cfg: &StudyConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let start = Instant::now();
    let prep = Prepared::new(&cfg.model, cfg.basis, cfg.quad_order, cfg.mu)?;
    let mut levels = cfg.levels.clone();
    levels.sort_unstable();
    levels.dedup();
    let horizon = cfg.model.horizon;
    let schemes = levels
        .iter()
        .map(|&l| Ok((l, prep.scheme(horizon / (1usize << l) as f64)?)))
        .collect::<Result<Vec<_>>>()?;
    let outcomes = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|j| run_path(cfg, &prep, &schemes, j))
        .collect::<Result<Vec<_>>>()?;

    let mut warnings = Vec::new();
    if cfg.paths == 1 {
        warnings.push("a single path gives a noisy estimate with no standard error".into());
    }
    let reference_degenerate = outcomes.iter().filter(|o| !o.reference_ok).count();
    let mut results = Vec::with_capacity(levels.len());
    for (i, &level) in levels.iter().enumerate() {
        let errs: Vec<f64> = outcomes
            .iter()
            .filter(|o| o.reference_ok)
            .filter_map(|o| o.errors[i])
            .collect();
        let used = errs.len();
        let mean = if used > 0 {
            errs.iter().sum::<f64>() / used as f64
        } else {
            f64::NAN
        };
        let d = mean.sqrt();
        let std_error = if used > 1 && d > 0.0 {
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (used - 1) as f64;
            (var / used as f64).sqrt() / (2.0 * d)
        } else {
            0.0
        };
        let n_steps = 1usize << level;
        results.push(LevelResult {
            level,
            n_steps,
            kappa: horizon / n_steps as f64,
            d,
            std_error,
            used_paths: used,
            degenerate: cfg.paths - used,
        });
    }
    let mut valid = true;
    for r in &results {
        if r.degenerate as f64 > MAX_EXCLUDED_FRACTION * cfg.paths as f64 {
            valid = false;
            warnings.push(format!(
                "level 2^{}: {} of {} paths excluded as degenerate",
                r.level, r.degenerate, cfg.paths
            ));
        }
    }
    let points: Vec<(f64, f64)> = results
        .iter()
        .filter(|r| r.d > 0.0 && r.d.is_finite())
        .map(|r| (r.kappa.log2(), r.d.log2()))
        .collect();
    let fit = fit_line(&points);
    if fit.is_none() && !results.is_empty() {
        warnings.push("fewer than two levels with positive finite error; no slope fitted".into());
    }
    if fit.is_some_and(|(s, _)| !s.is_finite()) {
        valid = false;
    }
    let trajectories = outcomes.into_iter().filter_map(|o| o.trajectories).collect();
    Ok(ConvergenceReport {
        levels: results,
        slope: fit.map(|f| f.0),
        intercept: fit.map(|f| f.1),
        reference_degenerate,
        valid,
        warnings,
        runtime_secs: start.elapsed().as_secs_f64(),
        provenance: prep.provenance(cfg),
        trajectories,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdReductionRow {
    pub label: String,
    pub intensity: String,
    /// Time-averaged conditional std, one per path.
    pub per_path: Vec<f64>,
    pub mean_std: f64,
    pub degenerate: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StdReductionTable {
    pub n_steps: usize,
    pub rows: Vec<StdReductionRow>,
}

/// Filters the same signal and continuous observation under each model
/// variant (typically differing only in intensity) and reports the
/// time-averaged conditional standard deviation. Jumps are drawn per
/// variant from the shared signal with the shared jump substream.
pub fn std_reduction_study(cfg: &StudyConfig, variants: &[(String, ModelSpec)]) -> Result<StdReductionTable> {
    cfg.validate_common()?;
    let n_steps = cfg.ref_steps();
    let mut rows = Vec::with_capacity(variants.len());
    for (label, model) in variants {
        let prep = Prepared::new(model, cfg.basis, cfg.quad_order, cfg.mu)?;
        let per: Vec<Option<f64>> = (0..cfg.paths as u64)
            .into_par_iter()
            .map(|j| {
                let path = simulate_path(model, n_steps, SeedRecord::new(cfg.seed, j))?;
                let traj = prep.filter(&path, cfg.filter_options())?;
                Ok((!traj.is_degenerate()).then(|| traj.stds.iter().sum::<f64>() / traj.len() as f64))
            })
            .collect::<Result<Vec<_>>>()?;
        let per_path: Vec<f64> = per.iter().flatten().copied().collect();
        rows.push(StdReductionRow {
            label: label.clone(),
            intensity: model.intensity.label().to_string(),
            mean_std: per_path.iter().sum::<f64>() / per_path.len() as f64,
            degenerate: per.len() - per_path.len(),
            per_path,
        });
    }
    Ok(StdReductionTable { n_steps, rows })
}

/// Tolerances of the oracle checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTolerance {
    pub kalman_rmse: f64,
    pub kalman_var_rel: f64,
    /// Variance comparison starts after this time.
    pub kalman_burn_in: f64,
    /// Multiple of the time-averaged particle standard error.
    pub particle_se_factor: f64,
}

impl Default for OracleTolerance {
    fn default() -> Self {
        Self {
            kalman_rmse: 0.05,
            kalman_var_rel: 0.1,
            kalman_burn_in: 0.05,
            particle_se_factor: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub path: u64,
    pub degenerate: bool,
    pub particle_rmse: Option<f64>,
    /// Root-mean-square over time of the particle standard error.
    pub particle_se: Option<f64>,
    pub particle_ok: Option<bool>,
    pub kalman_rmse: Option<f64>,
    /// Largest relative variance gap after the burn-in.
    pub kalman_var_rel: Option<f64>,
    pub kalman_ok: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTable {
    pub n_steps: usize,
    pub tolerance: OracleTolerance,
    pub rows: Vec<OracleRow>,
    pub provenance: Provenance,
}

fn time_rmse(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Spectral filter against the particle filter (when `cfg.particles > 0`)
/// and against Kalman–Bucy (when the model is linear-Gaussian), path by
/// path on `2^ref_level` steps.
pub fn oracle_comparison(cfg: &StudyConfig, tol: OracleTolerance) -> Result<OracleTable> {
    cfg.validate_common()?;
    let prep = Prepared::new(&cfg.model, cfg.basis, cfg.quad_order, cfg.mu)?;
    let linear = LinearGaussian::from_model(&cfg.model).ok();
    let n_steps = cfg.ref_steps();
    let rows = (0..cfg.paths as u64)
        .into_par_iter()
        .map(|j| {
            let seed = SeedRecord::new(cfg.seed, j);
            let path = simulate_path(&cfg.model, n_steps, seed)?;
            let traj = prep.filter(&path, cfg.filter_options())?;
            let mut row = OracleRow {
                path: j,
                degenerate: traj.is_degenerate(),
                particle_rmse: None,
                particle_se: None,
                particle_ok: None,
                kalman_rmse: None,
                kalman_var_rel: None,
                kalman_ok: None,
            };
            if cfg.particles > 0 {
                let opts = ParticleOptions {
                    n_particles: cfg.particles,
                    resample_threshold: Some(0.5),
                };
                let p = particle_filter(&prep.derived, &path, opts, seed)?;
                let rmse = time_rmse(&traj.means, &p.means);
                let se = (p.std_errors.iter().map(|s| s * s).sum::<f64>() / p.std_errors.len() as f64).sqrt();
                row.particle_rmse = Some(rmse);
                row.particle_se = Some(se);
                row.particle_ok = Some(!row.degenerate && rmse < tol.particle_se_factor * se);
            }
            if let Some(lg) = &linear {
                let k = kalman_bucy(lg, &path);
                let rmse = time_rmse(&traj.means, &k.means);
                let var_rel = (0..=n_steps)
                    .filter(|&r| r as f64 * path.kappa > tol.kalman_burn_in)
                    .map(|r| (traj.stds[r].powi(2) / k.vars[r] - 1.0).abs())
                    .fold(0.0, f64::max);
                row.kalman_rmse = Some(rmse);
                row.kalman_var_rel = Some(var_rel);
                row.kalman_ok = Some(!row.degenerate && rmse < tol.kalman_rmse && var_rel < tol.kalman_var_rel);
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleTable {
        n_steps,
        tolerance: tol,
        rows,
        provenance: prep.provenance(cfg),
    })
}

/// `2n + 16` unless overridden; exposed for manifests.
pub fn effective_quad_order(cfg: &StudyConfig) -> usize {
    cfg.quad_order.unwrap_or_else(|| default_quad_order(cfg.basis))
}
