//! difflab: a verification-grade numerical laboratory for diffusion
//! generative processes on continuous (Gaussian/SDE) and discrete
//! (categorical/CTMC) state spaces.
//!
//! Every kernel, limit, time reversal, and training objective is implemented
//! in closed form and cross-checked at desk scale against independent
//! brute-force references: enumerated Bayes posteriors, dense chain
//! composition, quadrature, and finite differences.
//!
//! Module map:
//! - [`schedule`]: noise schedules (alpha_t, sigma_t) and SDE coefficients
//! - [`gaussian`]: discrete-time Gaussian kernels and parameterisations
//! - [`categorical`]: discrete-state transition matrices and posteriors
//! - [`ctmc`]: rate matrices, master equation, jump simulation, reversal
//! - [`sde`]: 1-D mixture engine, reverse SDE, probability-flow likelihood
//! - [`losses`]: ELBO decompositions, DSM, DSE, MLM reduction
//! - [`generator`]: finite-state operator formalism and Girsanov checks
//! - [`trainer`]: exact-gradient tabular denoiser training
//! - [`oracle`]: brute-force references the other modules are tested against
//! - [`verify`]: named property suites behind `difflab verify`
//! - [`cli`]: the `difflab` command-line frontend
//!
//! See the crate examples for one runnable tour per subsystem.

pub mod categorical;
pub mod ctmc;
pub mod error;
pub mod gaussian;
pub mod generator;
pub mod losses;
pub mod oracle;
pub mod rng;
pub mod schedule;
pub mod sde;
pub mod simplex;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
