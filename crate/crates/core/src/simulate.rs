//! Sample paths of the signal, the continuous observation and the Cox
//! counting observation on a uniform grid.

use std::io::Write;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::rng::{SeedRecord, Substream};

/// One realization on the grid `t_r = r·κ`, `r = 0..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub kappa: f64,
    pub n_steps: usize,
    horizon: f64,
    /// Signal at every grid point (`N + 1` values).
    pub x: Vec<f64>,
    /// Observation `Y(t_r)` with `Y(0) = 0`. Increments are differences of
    /// these values, so coarsening subsamples and nests exactly.
    pub y: Vec<f64>,
    /// `Y(t_{r+1}) − Y(t_r)`.
    pub dy: Vec<f64>,
    /// `Z(t_{r+1}) − Z(t_r)`.
    pub dz: Vec<u32>,
    /// Grid index of each jump; repeated when a coarse step holds several.
    pub jump_times: Vec<usize>,
    pub seed: SeedRecord,
}

impl PathBundle {
    /// Increments are taken from `y`; `kappa = horizon / n_steps`.
    pub fn new(horizon: f64, x: Vec<f64>, y: Vec<f64>, dz: Vec<u32>, jump_times: Vec<usize>, seed: SeedRecord) -> Self {
        let n_steps = x.len() - 1;
        assert!(y.len() == n_steps + 1 && dz.len() == n_steps, "grid lengths disagree");
        Self {
            kappa: horizon / n_steps as f64,
            n_steps,
            horizon,
            dy: y.windows(2).map(|w| w[1] - w[0]).collect(),
            x,
            y,
            dz,
            jump_times,
            seed,
        }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn total_jumps(&self) -> u64 {
        self.dz.iter().map(|&z| z as u64).sum()
    }

    pub fn time(&self, r: usize) -> f64 {
        r as f64 * self.kappa
    }

    /// Writes `r,t_r,x,dy,dz`; the last row has no increments.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "r,t_r,x,dy,dz")?;
        for r in 0..=self.n_steps {
            if r < self.n_steps {
                writeln!(w, "{},{},{},{},{}", r, self.time(r), self.x[r], self.dy[r], self.dz[r])?;
            } else {
                writeln!(w, "{},{},{},,", r, self.time(r), self.x[r])?;
            }
        }
        Ok(())
    }
}

fn finite(v: f64, what: &'static str, step: usize, x: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what, step, x })
    }
}

/// Euler–Maruyama for the signal and the matching observation increments.
///
/// The signal noise `Δw` is shared between `dX` and `dY`; `Δv` comes from a
/// separate substream.
pub fn simulate_signal_observation(
    model: &ModelSpec,
    n_steps: usize,
    seed: &SeedRecord,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_steps == 0 {
        return Err(Error::InvalidArgument("n_steps must be at least 1".into()));
    }
    model.check()?;
    let kappa = model.horizon / n_steps as f64;
    let sqrt_k = kappa.sqrt();
    let mut init = seed.stream(Substream::InitialCondition);
    let mut sig = seed.stream(Substream::Signal);
    let mut obs = seed.stream(Substream::Observation);

    let z0: f64 = init.sample(StandardNormal);
    let mut x = Vec::with_capacity(n_steps + 1);
    x.push(model.x0_mean + model.x0_var.sqrt() * z0);
    let mut dy = Vec::with_capacity(n_steps);
    for r in 0..n_steps {
        let xr = x[r];
        let dw = sqrt_k * sig.sample::<f64, _>(StandardNormal);
        let dv = sqrt_k * obs.sample::<f64, _>(StandardNormal);
        let g = finite(model.drift.eval(xr), "drift", r, xr)?;
        let s = finite(model.diffusion.value.eval(xr), "diffusion", r, xr)?;
        let h = finite(model.sensor.eval(xr), "sensor", r, xr)?;
        dy.push(h * kappa + model.b * dw + model.b_tilde * dv);
        x.push(finite(xr + g * kappa + s * dw, "signal", r + 1, xr)?);
    }
    Ok((x, dy))
}

/// Jump times by the accumulated-intensity rule: with `ℰ ~ Exp(1)` and the
/// last jump at grid index `i`, the next jump is the first `r` with
/// `κ Σ_{j=i}^{r−1} λ(X_j) ≥ ℰ`. Returns `(dz, jump_times)`.
pub fn simulate_jump_times<R: Rng + ?Sized>(
    model: &ModelSpec,
    x: &[f64],
    kappa: f64,
    rng: &mut R,
) -> (Vec<u32>, Vec<usize>) {
    let n_steps = x.len().saturating_sub(1);
    let mut dz = vec![0u32; n_steps];
    let mut jumps = Vec::new();
    let mut threshold: f64 = rng.sample(Exp1);
    let mut acc = 0.0;
    for r in 1..=n_steps {
        acc += kappa * model.intensity.eval(x[r - 1]);
        if acc >= threshold {
            dz[r - 1] = 1;
            jumps.push(r);
            acc = 0.0;
            threshold = rng.sample(Exp1);
        }
    }
    (dz, jumps)
}

/// Full path: signal, observation increments and jumps.
pub fn simulate_path(model: &ModelSpec, n_steps: usize, seed: SeedRecord) -> Result<PathBundle> {
    let (x, dy) = simulate_signal_observation(model, n_steps, &seed)?;
    let kappa = model.horizon / n_steps as f64;
    let (dz, jump_times) = simulate_jump_times(model, &x, kappa, &mut seed.stream(Substream::Jumps));
    let mut y = Vec::with_capacity(n_steps + 1);
    y.push(0.0);
    let mut acc = 0.0;
    for d in dy {
        acc += d;
        y.push(acc);
    }
    Ok(PathBundle::new(model.horizon, x, y, dz, jump_times, seed))
}

/// Aggregates `factor` consecutive fine steps into one coarse step. The
/// signal is subsampled, not re-simulated.
pub fn coarsen_path(fine: &PathBundle, factor: usize) -> Result<PathBundle> {
    if factor == 0 || !fine.n_steps.is_multiple_of(factor) {
        return Err(Error::InvalidArgument(format!(
            "coarsening factor {factor} does not divide {} steps",
            fine.n_steps
        )));
    }
    if factor == 1 {
        return Ok(fine.clone());
    }
    Ok(PathBundle::new(
        fine.horizon,
        fine.x.iter().step_by(factor).copied().collect(),
        fine.y.iter().step_by(factor).copied().collect(),
        fine.dz.chunks(factor).map(|c| c.iter().sum()).collect(),
        fine.jump_times.iter().map(|&r| r.div_ceil(factor)).collect(),
        fine.seed,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{example1, Coefficient, Diffusion};

    fn frozen_model() -> ModelSpec {
        let mut m = example1();
        m.drift = Coefficient::constant(0.0);
        m.diffusion = Diffusion::constant(0.0);
        m.x0_mean = 5.0;
        m.x0_var = 0.0;
        m
    }

    #[test]
    fn deterministic_constant_signal() {
        let p = simulate_path(&frozen_model(), 64, SeedRecord::new(1, 0)).unwrap();
        assert!(p.x.iter().all(|&v| v == 5.0));
    }

    #[test]
    fn pure_noise_increment_variance() {
        let mut m = example1();
        m.sensor = Coefficient::constant(0.0);
        m.b = 0.0;
        m.b_tilde = 1.0;
        let n = 100_000;
        let (_, dy) = simulate_signal_observation(&m, n, &SeedRecord::new(3, 0)).unwrap();
        let kappa = m.horizon / n as f64;
        let mean = dy.iter().sum::<f64>() / n as f64;
        let var = dy.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((var / kappa - 1.0).abs() < 0.05, "var/kappa = {}", var / kappa);
    }

    #[test]
    fn bookkeeping_invariants() {
        let m = example1();
        let p = simulate_path(&m, 1024, SeedRecord::new(11, 2)).unwrap();
        assert_eq!(p.x.len(), 1025);
        assert_eq!(p.dy.len(), 1024);
        assert_eq!(p.total_jumps() as usize, p.jump_times.len());
        assert!(p.dz.iter().all(|&z| z <= 1));
        assert!((p.horizon() - m.horizon).abs() <= 1e-12 * m.horizon);
        assert!(p.jump_times.windows(2).all(|w| w[0] < w[1]));
        for &r in &p.jump_times {
            assert_eq!(p.dz[r - 1], 1);
        }
    }

    #[test]
    fn single_step_below_threshold_has_no_jump() {
        let m = example1().with_constant_intensity(1.0);
        // Search a seed whose first exponential exceeds kappa * lambda.
        let kappa = 0.5;
        let x = vec![5.0, 5.0];
        let seed = (0..100)
            .map(|s| SeedRecord::new(s, 0))
            .find(|s| s.stream(Substream::Jumps).sample::<f64, _>(Exp1) > kappa)
            .unwrap();
        let (dz, jumps) = simulate_jump_times(&m, &x, kappa, &mut seed.stream(Substream::Jumps));
        assert_eq!(dz, vec![0]);
        assert!(jumps.is_empty());
    }

    #[test]
    fn coarsening_sums_increments() {
        let p = PathBundle::new(
            1.0,
            vec![0.0, 1.0, 2.0, 3.0, 4.0],
            vec![0.0, 1.0, 3.0, 6.0, 10.0],
            vec![1, 0, 1, 1],
            vec![1, 3, 4],
            SeedRecord::new(0, 0),
        );
        assert_eq!(p.dy, vec![1.0, 2.0, 3.0, 4.0]);
        let c = coarsen_path(&p, 2).unwrap();
        assert_eq!(c.dy, vec![3.0, 7.0]);
        assert_eq!(c.dz, vec![1, 2]);
        assert_eq!(c.x, vec![0.0, 2.0, 4.0]);
        assert_eq!(c.jump_times, vec![1, 2, 2]);
        assert_eq!(c.kappa, 0.5);
        assert_eq!(coarsen_path(&p, 1).unwrap(), p);
        assert!(coarsen_path(&p, 3).is_err());
        assert!(coarsen_path(&p, 0).is_err());
    }

    #[test]
    fn csv_has_one_row_per_grid_point() {
        let p = simulate_path(&example1(), 8, SeedRecord::new(5, 1)).unwrap();
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "r,t_r,x,dy,dz");
        assert_eq!(lines.len(), 1 + 9);
    }

    #[test]
    fn rejects_nonfinite_coefficients() {
        let mut m = example1();
        m.drift = Coefficient::new("1/x", |x| 1.0 / x);
        m.x0_mean = 0.0;
        m.x0_var = 0.0;
        let err = simulate_path(&m, 4, SeedRecord::new(0, 0)).unwrap_err();
        assert!(matches!(
            err,
            Error::NonFinite {
                what: "drift",
                step: 0,
                ..
            }
        ));
    }
}
