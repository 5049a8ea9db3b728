//! Safe learning-based state observers.
//!
//! The crate implements a three-phase observer workflow for discrete-time
//! systems `x⁺ = Ax + Bu + φ(C_q x)`, `y = Cx` whose nonlinearity `φ` is
//! unknown:
//!
//! 1. [`lmi`]: synthesize an initial gain `L₀` that renders the estimation
//!    error locally input-to-state stable with respect to the coefficient
//!    error, by semidefinite programming plus a line search over the
//!    admissible Lipschitz constant.
//! 2. [`bayes`]: learn the coefficients of a basis expansion `φ̂ = pᵀψ` by
//!    Bayesian optimization ([`gp`] surrogate, expected improvement) on a
//!    reward computed from simulated output residuals ([`system`]).
//! 3. [`lmi`] again: re-estimate the Lipschitz constant of the learned model
//!    ([`lipschitz`]) and redesign the gain with a certificate.
//!
//! [`pipeline`] wires the phases together, persists artifacts, and hosts the
//! Van der Pol reproduction scenario.

pub mod bayes;
pub mod error;
pub mod gp;
pub mod linalg;
pub mod lipschitz;
pub mod lmi;
pub mod numerics;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod system;

pub use error::{Error, Result};
pub use numerics::NumericsConfig;
