//! Batch Pareto optimal Thompson sampling (qPOTS) for multiobjective
//! Bayesian optimization.
//!
//! Each objective gets an independent Gaussian process surrogate. Every
//! iteration draws one posterior sample path per objective, solves the cheap
//! multiobjective problem on those paths with NSGA-II, and picks a batch from
//! the predicted Pareto set by greedy maximin distance to the observed designs.
//!
//! All objectives are minimized internally.

pub mod acquisition;
pub mod baselines;
pub mod benchmarks;
pub mod error;
pub mod gp;
pub mod harness;
pub mod linalg;
pub mod nsga2;
pub mod oracle;
pub mod par;
pub mod pareto;
pub mod paths;
pub mod rng;

pub use error::{Error, Result};
