//! Reference filters that share nothing with the spectral code except the
//! sampled observations.

mod kalman;
mod particle;

pub use kalman::{kalman_bucy, riccati_variance, KalmanTrajectory, LinearGaussian};
pub use particle::{
    log_weight_increment, particle_filter, propagate_tilde, ParticleCloud, ParticleOptions, ParticleTrajectory,
};
