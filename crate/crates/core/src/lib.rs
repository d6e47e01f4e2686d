//! Two-sided exit problems for Markov-modulated fluid processes.
//!
//! A finite-state, possibly time-inhomogeneous, sub-Markovian chain `X`
//! drives the level `φ_t = ∫ v(X_u) du`. This crate computes expectations of
//! payoffs at the first exit of `φ` from `[-ℓ⁻, ℓ⁺]`:
//!
//! * [`wh_factor`] solves for the Wiener–Hopf factors `(Q±, J±)` of a
//!   time-homogeneous generator;
//! * [`exit_ops`] assembles the one-sided and two-sided exit operators from
//!   them, through a Neumann series or a resolvent;
//! * [`mc_engine`] simulates the chain exactly (by thinning) and provides an
//!   independent Monte Carlo oracle, including for time-inhomogeneous
//!   schedules where no closed form is available.

pub mod exit_ops;
pub mod mc_engine;
pub mod model;
pub mod numerics;
pub mod wh_factor;

pub use exit_ops::{one_sided, two_sided, ExitError, ExpDecayFunction, Method, TwoSidedResult};
pub use model::{load_model, validate_model, ModelSpec, Side, ValidatedModel};
pub use numerics::DenseMatrix;
pub use wh_factor::{factorize, tilt_factorize, FactorConfig, WienerHopfFactors};
