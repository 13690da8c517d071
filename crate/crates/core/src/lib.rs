//! Sufficient-statistics dynamics of one-pass SGD for two-layer networks with
//! squared activation learning a noisy phase-retrieval target.
//!
//! Three dynamics tiers share one state type ([`OverlapState`]): explicit SGD
//! in dimension `d` ([`sgd`]), the deterministic high-dimensional ODE
//! ([`ode`]) and its first-order stochastic correction ([`sde`]). On top sit
//! the exit-time formulas ([`exit_time`]), the `p = 1` landscape
//! ([`landscape`]) and the experiment protocols used by the CLI
//! ([`experiments`]).

pub mod ensemble;
pub mod error;
pub mod exit_time;
pub mod experiments;
pub mod hypergeometric;
pub mod landscape;
pub mod moments;
pub mod ode;
pub mod rng;
pub mod sde;
pub mod sgd;
pub mod state;

pub use error::{Error, Result};
pub use moments::{MonomialIndex, OmegaMatrix};
pub use state::{OverlapState, TaskParams, Trajectory};
