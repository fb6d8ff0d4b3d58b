use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::simulate::PathBundle;

/// `dX = aX dt + σ dw`, `dY = cX dt + b̃ dv`, unit-rate jumps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussian {
    pub a: f64,
    pub sigma: f64,
    pub c: f64,
    /// Observation noise variance `D = b̃²`.
    pub d: f64,
    pub m0: f64,
    pub p0: f64,
}

const PROBES: [f64; 6] = [-7.3, -2.0, -0.4, 0.9, 3.1, 11.0];

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

impl LinearGaussian {
    /// Recovers the linear coefficients by probing the model, rejecting
    /// anything outside the Kalman–Bucy setting.
    pub fn from_model(model: &ModelSpec) -> Result<Self> {
        if model.b != 0.0 {
            return Err(Error::NotLinear(format!("correlated noise b = {}", model.b)));
        }
        let a = model.drift.eval(1.0) - model.drift.eval(0.0);
        let c = model.sensor.eval(1.0) - model.sensor.eval(0.0);
        let sigma = model.diffusion.value.eval(0.0);
        for x in PROBES {
            if !close(model.drift.eval(x), a * x) {
                return Err(Error::NotLinear(format!("drift {} is not a·x", model.drift.label())));
            }
            if !close(model.sensor.eval(x), c * x) {
                return Err(Error::NotLinear(format!("sensor {} is not c·x", model.sensor.label())));
            }
            if !close(model.diffusion.value.eval(x), sigma) {
                return Err(Error::NotLinear(format!(
                    "diffusion {} is not constant",
                    model.diffusion.value.label()
                )));
            }
            if !close(model.intensity.eval(x), 1.0) {
                return Err(Error::NotLinear(format!(
                    "intensity {} is not identically 1",
                    model.intensity.label()
                )));
            }
        }
        Ok(Self {
            a,
            sigma,
            c,
            d: model.obs_variance(),
            m0: model.x0_mean,
            p0: model.x0_var,
        })
    }

    fn riccati_rhs(&self, p: f64) -> f64 {
        2.0 * self.a * p + self.sigma * self.sigma - p * p * self.c * self.c / self.d
    }

    fn rk4(&self, p: f64, h: f64) -> f64 {
        let k1 = self.riccati_rhs(p);
        let k2 = self.riccati_rhs(p + 0.5 * h * k1);
        let k3 = self.riccati_rhs(p + 0.5 * h * k2);
        let k4 = self.riccati_rhs(p + h * k3);
        p + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    }

    /// `P∞ = (aD + √(a²D² + σ²c²D)) / c²`.
    pub fn steady_state_variance(&self) -> Option<f64> {
        (self.c != 0.0).then(|| {
            let (a, d) = (self.a, self.d);
            (a * d + (a * a * d * d + self.sigma * self.sigma * self.c * self.c * d).sqrt()) / (self.c * self.c)
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanTrajectory {
    pub kappa: f64,
    pub means: Vec<f64>,
    pub vars: Vec<f64>,
}

/// Variance path on `n_steps + 1` grid points, RK4 per step.
pub fn riccati_variance(lg: &LinearGaussian, kappa: f64, n_steps: usize) -> Vec<f64> {
    let mut p = Vec::with_capacity(n_steps + 1);
    p.push(lg.p0);
    for r in 0..n_steps {
        p.push(lg.rk4(p[r], kappa));
    }
    p
}

/// Mean by an Euler step of `dm = am dt + (Pc/D)(dY − cm dt)`; variance
/// from [`riccati_variance`].
pub fn kalman_bucy(lg: &LinearGaussian, path: &PathBundle) -> KalmanTrajectory {
    let kappa = path.kappa;
    let vars = riccati_variance(lg, kappa, path.n_steps);
    let mut means = Vec::with_capacity(path.n_steps + 1);
    means.push(lg.m0);
    for r in 0..path.n_steps {
        let m = means[r];
        let gain = vars[r] * lg.c / lg.d;
        means.push(m + lg.a * m * kappa + gain * (path.dy[r] - lg.c * m * kappa));
    }
    KalmanTrajectory { kappa, means, vars }
}
