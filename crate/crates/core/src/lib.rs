//! Federated differentially private average-treatment-effect estimation.
//!
//! Sites hold `(treatment, outcome, covariate)` records and publish a
//! noisy ATE estimate together with a noisy variance estimate under a
//! per-site (ε, δ) budget; an untrusted server combines the reports by
//! picking the site subset that minimizes the predicted variance of the
//! weighted average. Observational data goes through a balanced
//! exact-matching estimator whose noise is calibrated to a closed-form
//! smooth-sensitivity envelope instead of the worst-case global
//! sensitivity.
//!
//! Modules:
//! - [`model`]: datasets, budgets, ledgers, reports, CSV I/O
//! - [`dp`]: seeded noise streams and the DP mechanisms
//! - [`matching`]: the matching estimator and its sensitivity analysis
//! - [`estimators`]: per-site report pipelines
//! - [`aggregation`]: server-side combination rules
//! - [`sim`]: synthetic data, experiment sweeps, brute-force oracles

pub mod aggregation;
pub mod dp;
pub mod error;
pub mod estimators;
pub mod matching;
pub mod model;
pub mod sim;

pub use error::{Error, Result};
