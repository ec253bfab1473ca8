//! Simulation and estimation toolkit for winner-takes-all tournaments in which
//! luck either decides outcomes directly (a coin flip) or tilts opportunities
//! (productivity multipliers, additive headstarts), and impartial spectators
//! decide how much of the prize to redistribute.
//!
//! Module map:
//!
//! - [`effort`]: worker effort models and the ratio/difference laws they imply.
//! - [`environments`]: match mechanics for each luck environment.
//! - [`meritprob`]: the merit probability `pi`, its curves, bins and shape checks.
//! - [`agents`]: spectator decision policies and population mixtures.
//! - [`experiment`]: twelve-round session designs and simulated studies.
//! - [`econometrics`]: clustered OLS and the redistribution-gap analyses.
//!
//! Every stochastic routine takes an explicit seed; parallel and sequential
//! execution produce identical results.
// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
mod csvio;
pub mod econometrics;
pub mod effort;
pub mod environments;
pub mod error;
pub mod experiment;
pub mod meritprob;
pub mod par;
pub mod rng;

pub use error::{Error, Result};
pub use par::Execution;
