//! Exact-event Monte Carlo for time-inhomogeneous sub-Markovian chains.
//!
//! Paths are simulated by thinning ([`path`]), passages are located exactly
//! on the piecewise-linear level, and every estimator reduces per-path values
//! in a fixed order so a given `(seed, n)` gives the same bits whether the
//! paths ran on one thread or many ([`stats`], [`stream`]).

pub mod estimate;
pub mod path;
pub mod stats;
pub mod stream;
pub mod verify;

pub use estimate::{estimate, estimate_with_paths, McConfig, McError, PathOutcome, Payoff, Query};
pub use path::{crossing, sample_path, CrossingKind, CrossingResult, PathSample};
pub use stats::{EstimateWithCI, ExecMode};
pub use verify::{
    composite_bound_check, exit_census, first_jump_probability, nested_chain, verify_decomposition,
    CompositeBoundReport, DecompositionReport, ExitCensus,
};
