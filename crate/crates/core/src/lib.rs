//! Stochastic model predictive control for linear systems under correlated,
//! unbounded Gaussian disturbances.
//!
//! Constraints are tightened with probabilistic reachable sets (PRS) of the
//! closed-loop error, and the nominal state is propagated by its own
//! prediction, which keeps the closed-loop error dynamics linear.
//!
//! Module map:
//! - [`lti`]: models, Lyapunov solves, stacked prediction matrices.
//! - [`gaussians`]: Gaussian sequences, conditioning, sampling, chi-squared levels.
//! - [`prs`]: ellipsoids, polytopes, tightening schedules.
//! - [`qp`]: dense convex QP solver (dual active-set with an ADMM fallback).
//! - [`smpc`]: the controller and its variants.
//! - [`simulate`]: scenarios, Monte Carlo trials, metrics and file output.

pub mod error;
pub mod gaussians;
pub mod lti;
pub mod prs;
pub mod qp;
pub mod simulate;
pub mod smpc;

pub use error::{Error, Result};
