//! Penalized robust utility optimization.
//!
//! A trading policy (generator) and an adversarial market (discriminator) are
//! trained against each other on a shared penalized expected-utility objective.
//! Around that game the crate provides closed-form benchmark strategies,
//! friction-aware wealth simulation, and pooled worst-case evaluation.
//!
//! Module map:
//! - [`market_sim`]: time grids, noise datasets, Euler/GARCH/Student-t path simulation, noisy pools.
//! - [`portfolio`]: wealth recursion with proportional and base transaction costs, policy roll-outs.
//! - [`utility_penalty`]: power utilities and instantaneous / path-wise penalty functionals.
//! - [`closed_form`]: explicit saddle-point solvers, Merton and no-trade-region strategies.
//! - [`neural`]: reverse-mode tape, networks, parameter sets, Adam.
//! - [`gan_trainer`]: alternating generator/discriminator optimization with early stopping.
//! - [`evaluation`]: expected utility, pooled minimum, relative error, VaR, histograms.
//! - [`experiment`]: presets, configs, pipelines and grid search behind the `ruo` CLI.

pub mod closed_form;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gan_trainer;
pub mod linalg;
pub mod market_sim;
pub mod neural;
pub mod portfolio;
pub mod utility_penalty;

pub use error::{Error, Result};
