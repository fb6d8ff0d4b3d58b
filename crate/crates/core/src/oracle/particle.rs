use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DerivedCoefficients;
use crate::rng::{SeedRecord, Substream};
use crate::simulate::PathBundle;

pub const MIN_PARTICLES: usize = 100;

/// One Euler step of the signal written against the observation:
/// `dX = (g − B₁h) dt + B₁ dY + B₂ dỸ`.
#[inline]
pub fn propagate_tilde(derived: &DerivedCoefficients, x: f64, dy: f64, dtilde_y: f64, kappa: f64) -> f64 {
    let m = derived.model();
    let b1 = derived.b1(x);
    x + (m.drift.eval(x) - b1 * m.sensor.eval(x)) * kappa + b1 * dy + derived.b2(x) * dtilde_y
}

/// Per-step increment of `log η`:
/// `h D⁻¹ ΔY − ½ h² D⁻¹ κ − (λ − 1) κ + ΔZ log λ`.
#[inline]
pub fn log_weight_increment(derived: &DerivedCoefficients, x: f64, dy: f64, dz: u32, kappa: f64) -> f64 {
    let m = derived.model();
    let h = m.sensor.eval(x);
    let lambda = m.intensity.eval(x);
    let mut inc = h * derived.d_inv * (dy - 0.5 * h * kappa) - (lambda - 1.0) * kappa;
    if dz > 0 {
        inc += if lambda > 0.0 {
            dz as f64 * lambda.ln()
        } else {
            f64::NEG_INFINITY
        };
    }
    inc
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleOptions {
    pub n_particles: usize,
    /// Resample when `ESS < threshold · n`; `None` never resamples.
    pub resample_threshold: Option<f64>,
}

impl Default for ParticleOptions {
    fn default() -> Self {
        Self {
            n_particles: 10_000,
            resample_threshold: Some(0.5),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    pub states: Vec<f64>,
    pub log_weights: Vec<f64>,
    pub seed: SeedRecord,
}

impl ParticleCloud {
    fn normalized_weights(&self) -> Vec<f64> {
        let top = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.log_weights.iter().map(|&l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    pub fn effective_sample_size(&self) -> f64 {
        let w = self.normalized_weights();
        1.0 / w.iter().map(|v| v * v).sum::<f64>()
    }

    /// Self-normalized mean, standard deviation and the delta-method
    /// standard error of the mean.
    pub fn estimates(&self) -> (f64, f64, f64) {
        let w = self.normalized_weights();
        let mean: f64 = w.iter().zip(&self.states).map(|(w, x)| w * x).sum();
        let var: f64 = w.iter().zip(&self.states).map(|(w, x)| w * (x - mean).powi(2)).sum();
        let se2: f64 = w.iter().zip(&self.states).map(|(w, x)| (w * (x - mean)).powi(2)).sum();
        (mean, var.max(0.0).sqrt(), se2.sqrt())
    }

    fn resample<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let w = self.normalized_weights();
        let mut cdf = Vec::with_capacity(w.len());
        let mut acc = 0.0;
        for v in &w {
            acc += v;
            cdf.push(acc);
        }
        let u = Uniform::new(0.0, acc).expect("positive total weight");
        let old = std::mem::take(&mut self.states);
        self.states = (0..old.len())
            .map(|_| {
                let target = u.sample(rng);
                let i = cdf.partition_point(|&c| c < target).min(old.len() - 1);
                old[i]
            })
            .collect();
        self.log_weights.iter_mut().for_each(|l| *l = 0.0);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleTrajectory {
    pub kappa: f64,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub ess: Vec<f64>,
    pub resample_steps: Vec<usize>,
    /// Particles dropped after a non-finite propagation.
    pub aborted: usize,
}

impl ParticleTrajectory {
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,mean,std,se")?;
        for r in 0..self.means.len() {
            writeln!(
                w,
                "{},{},{},{}",
                r as f64 * self.kappa,
                self.means[r],
                self.stds[r],
                self.std_errors[r]
            )?;
        }
        Ok(())
    }
}

/// Importance-weighted particle estimate of the conditional law along
/// `path`. The weight increment of step `r` is evaluated at the particle
/// position at `t_r`, before it moves.
pub fn particle_filter(
    derived: &DerivedCoefficients,
    path: &PathBundle,
    opts: ParticleOptions,
    seed: SeedRecord,
) -> Result<ParticleTrajectory> {
    let n = opts.n_particles;
    if n < MIN_PARTICLES {
        return Err(Error::InvalidArgument(format!(
            "particle filter needs at least {MIN_PARTICLES} particles, got {n}"
        )));
    }
    let model = derived.model();
    let kappa = path.kappa;
    let sqrt_k = kappa.sqrt();
    let mut noise = seed.stream(Substream::Particles);
    let mut resampling = seed.stream(Substream::Resampling);
    let sd0 = model.x0_var.sqrt();
    let mut cloud = ParticleCloud {
        states: (0..n)
            .map(|_| model.x0_mean + sd0 * noise.sample::<f64, _>(StandardNormal))
            .collect(),
        log_weights: vec![0.0; n],
        seed,
    };
    let mut out = ParticleTrajectory {
        kappa,
        means: Vec::with_capacity(path.n_steps + 1),
        stds: Vec::with_capacity(path.n_steps + 1),
        std_errors: Vec::with_capacity(path.n_steps + 1),
        ess: Vec::with_capacity(path.n_steps + 1),
        resample_steps: Vec::new(),
        aborted: 0,
    };
    let record = |cloud: &ParticleCloud, out: &mut ParticleTrajectory| {
        let (m, s, se) = cloud.estimates();
        out.means.push(m);
        out.stds.push(s);
        out.std_errors.push(se);
        out.ess.push(cloud.effective_sample_size());
    };
    record(&cloud, &mut out);
    for r in 0..path.n_steps {
        let (dy, dz) = (path.dy[r], path.dz[r]);
        for (x, lw) in cloud.states.iter_mut().zip(cloud.log_weights.iter_mut()) {
            let dtilde = sqrt_k * noise.sample::<f64, _>(StandardNormal);
            if !lw.is_finite() {
                continue;
            }
            *lw += log_weight_increment(derived, *x, dy, dz, kappa);
            let next = propagate_tilde(derived, *x, dy, dtilde, kappa);
            if next.is_finite() && lw.is_finite() {
                *x = next;
            } else {
                *lw = f64::NEG_INFINITY;
                out.aborted += 1;
            }
        }
        let top = cloud.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !top.is_finite() {
            return Err(Error::WeightCollapse { step: r + 1 });
        }
        cloud.log_weights.iter_mut().for_each(|l| *l -= top);
        record(&cloud, &mut out);
        if let Some(th) = opts.resample_threshold {
            if out.ess[r + 1] < th * n as f64 {
                cloud.resample(&mut resampling);
                out.resample_steps.push(r + 1);
            }
        }
    }
    Ok(out)
}
