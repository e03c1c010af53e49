//! Asset-price path generation on a fixed time grid.
//!
//! All relative dynamics follow the multiplicative Euler form
//! `S_{n+1} = S_n + (S_n ⊙ μ_n) Δt + (S_n ⊙ σ_n) ΔW`, where row `i` of the
//! volatility matrix is scaled by `S^i`. GARCH markets are simulated in log
//! space; Student-t markets support both forms.

mod euler;
mod export;
mod garch;
mod increments;
mod noisy;
mod student_t;

pub use euler::{simulate_euler, PRICE_FLOOR};
pub use export::write_paths_csv;
pub use garch::{
    fit_garch, log_returns, make_noisy_garch_pool, simulate_garch, GarchFit, GarchFitDiagnostics,
    GarchModel, GarchParams,
};
pub use increments::{path_rng, NoiseIncrements};
pub use noisy::{make_noisy_pool, NoiseKind, NoiseScales, NoisyMarketScenario, PerPathScenarios};
pub use student_t::{simulate_student_t, ReturnConvention, StudentTMarket};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::{Error, Result};

/// Discretization `0 = t_0 < … < t_N = T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    steps: Vec<f64>,
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(horizon: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "uniform grid needs T > 0 and N ≥ 1 (T = {horizon}, N = {n_steps})"
            )));
        }
        let dt = horizon / n_steps as f64;
        let times = (0..=n_steps).map(|n| if n == n_steps { horizon } else { n as f64 * dt }).collect();
        Ok(Self { steps: vec![dt; n_steps], times })
    }

    pub fn from_steps(steps: Vec<f64>) -> Result<Self> {
        if steps.is_empty() || steps.iter().any(|dt| !(*dt > 0.0) || !dt.is_finite()) {
            return Err(Error::InvalidParameter("step sizes must be positive and finite".into()));
        }
        let mut times = Vec::with_capacity(steps.len() + 1);
        let mut t = 0.0;
        times.push(t);
        for dt in &steps {
            t += dt;
            times.push(t);
        }
        Ok(Self { steps, times })
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn horizon(&self) -> f64 {
        self.times[self.steps.len()]
    }

    /// Length of the step from `t_n` to `t_{n+1}`.
    pub fn dt(&self, n: usize) -> f64 {
        self.steps[n]
    }

    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
}

/// Per-step relative drift and volatility for every simulated path.
///
/// `vol` is row-major `d×d`; coefficients are pre-Hadamard, i.e. relative to
/// the current price.
pub trait MarketDynamics: Sync {
    fn dim(&self) -> usize;
    fn coefficients(&self, path: usize, step: usize, drift: &mut [f64], vol: &mut [f64]);
}

/// Constant-parameter Black–Scholes-type reference market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMarket {
    pub drift: Vec<f64>,
    /// Row-major lower-triangular square root of `covariance`.
    pub vol: Vec<f64>,
    pub covariance: Vec<f64>,
    pub rate: f64,
    pub initial_price: Vec<f64>,
}

impl ReferenceMarket {
    /// Builds the market from a volatility matrix; the covariance is `σσᵀ`.
    pub fn from_vol(drift: Vec<f64>, vol: Vec<f64>, rate: f64, initial_price: Vec<f64>) -> Result<Self> {
        let d = drift.len();
        if vol.len() != d * d || initial_price.len() != d {
            return Err(Error::Dimension(format!(
                "drift has {d} entries, vol {} and initial price {}",
                vol.len(),
                initial_price.len()
            )));
        }
        let covariance = linalg::gram(&vol, d);
        Self { drift, vol, covariance, rate, initial_price }.validated()
    }

    /// Builds the market from a covariance matrix, taking its Cholesky factor as `σ`.
    pub fn from_covariance(
        drift: Vec<f64>,
        covariance: Vec<f64>,
        rate: f64,
        initial_price: Vec<f64>,
    ) -> Result<Self> {
        let d = drift.len();
        if covariance.len() != d * d || initial_price.len() != d {
            return Err(Error::Dimension(format!("covariance must be {d}x{d}")));
        }
        let vol = linalg::cholesky_psd(&covariance, d)?;
        Self { drift, vol, covariance, rate, initial_price }.validated()
    }

    fn validated(self) -> Result<Self> {
        crate::error::ensure_finite(&self.drift, "drift")?;
        crate::error::ensure_finite(&self.vol, "vol")?;
        crate::error::ensure_finite(&[self.rate], "rate")?;
        if self.initial_price.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidParameter("initial prices must be positive".into()));
        }
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }

    /// Same market with another drift/covariance pair (e.g. an explicit worst case).
    pub fn with_parameters(&self, drift: Vec<f64>, covariance: Vec<f64>) -> Result<Self> {
        Self::from_covariance(drift, covariance, self.rate, self.initial_price.clone())
    }
}

impl MarketDynamics for ReferenceMarket {
    fn dim(&self) -> usize {
        self.drift.len()
    }

    fn coefficients(&self, _path: usize, _step: usize, drift: &mut [f64], vol: &mut [f64]) {
        drift.copy_from_slice(&self.drift);
        vol.copy_from_slice(&self.vol);
    }
}

/// Simulated price paths, optionally with the coefficients that produced them.
#[derive(Debug, Clone)]
pub struct PathBatch {
    /// `(paths, N+1, d)`
    pub prices: Array3<f64>,
    /// `(paths, N, d)` relative drifts, when recorded.
    pub drift: Option<Array3<f64>>,
    /// `(paths, N, d·d)` relative volatility matrices, when recorded.
    pub vol: Option<Array3<f64>>,
    /// Paths on which the price floor was hit at least once.
    pub floored: Vec<bool>,
}

impl PathBatch {
    pub fn n_paths(&self) -> usize {
        self.prices.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.prices.shape()[1].saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.prices.shape()[2]
    }

    pub fn empty(n_steps: usize, d: usize) -> Self {
        Self {
            prices: Array3::zeros((0, n_steps + 1, d)),
            drift: None,
            vol: None,
            floored: Vec::new(),
        }
    }
}
