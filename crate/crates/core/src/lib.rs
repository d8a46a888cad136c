//! One-round Bayesian federated learning in predictive space.
//!
//! Each client draws posterior samples of a small dense network with cyclical
//! SGHMC and uploads them once. At prediction time the server turns every
//! client's samples into a local predictive distribution and multiplies them,
//! dividing out the prior predictive `n - 1` times:
//!
//! ```text
//! p(y | x, D) ∝ p(y | x)^{-(n-1)} · Π_i p(y | x, D_i)
//! ```
//!
//! Regression predictives are Gaussian, so the product reduces to a
//! precision-weighted combination; classification predictives are multiplied
//! class-wise in log space and renormalized.
//!
//! FedAvg (multi-round and single-round) and EP MCMC with diagonal Gaussian
//! local posteriors are included as baselines, together with a
//! heterogeneity-controlled partitioner and an experiment runner.

pub mod aggregation;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod posterior;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
