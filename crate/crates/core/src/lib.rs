//! Splitting-up solver for the Zakai equation of a diffusion observed
//! through a correlated continuous channel and a Cox counting process,
//! discretized in a Hermite spectral Galerkin space.

// `!(a > b)` is used on purpose so that NaN takes the failing branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod expr;
pub mod harness;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod simulate;
pub mod spectral;
pub mod zakai;

pub use error::{Error, Result};
pub use harness::{ConvergenceReport, StudyConfig};
pub use model::{derive_coefficients, preset, select_mu, DerivedCoefficients, ModelSpec, MuRule, MuSelection};
pub use rng::{SeedRecord, Substream};
pub use simulate::{coarsen_path, simulate_path, PathBundle};
pub use spectral::{build_space, project_gaussian, HermiteBasis, Projection, SpectralSpace};
pub use zakai::{run_filter, DensityState, FilterOptions, FilterTrajectory, SplittingScheme};
