use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{path_rng, MarketDynamics, ReferenceMarket, TimeGrid};
use crate::linalg;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// One draw per scenario, held for the whole horizon.
    Constant,
    /// A fresh draw on every step.
    NonConstant,
    /// Brownian parameter path from the reference values; the last step has
    /// the configured standard deviation.
    Cumulative,
}

/// Standard deviations of the Gaussian perturbations of the volatility-matrix
/// entries and of the drift entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseScales {
    pub vol: f64,
    pub drift: f64,
}

impl NoiseScales {
    pub const ZERO: NoiseScales = NoiseScales { vol: 0.0, drift: 0.0 };
}

/// One plausible market around the reference: per-step drift, volatility
/// and covariance paths.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyMarketScenario {
    pub kind: NoiseKind,
    /// `(N, d)`
    pub drift: Array2<f64>,
    /// `(N, d·d)` row-major volatility matrices.
    pub vol: Array2<f64>,
    /// `(N, d·d)` covariance `σσᵀ` per step.
    pub covariance: Array2<f64>,
}

impl NoisyMarketScenario {
    pub fn dim(&self) -> usize {
        self.drift.ncols()
    }
}

impl MarketDynamics for NoisyMarketScenario {
    fn dim(&self) -> usize {
        self.drift.ncols()
    }

    fn coefficients(&self, _path: usize, step: usize, drift: &mut [f64], vol: &mut [f64]) {
        drift.copy_from_slice(self.drift.row(step).as_slice().expect("contiguous"));
        vol.copy_from_slice(self.vol.row(step).as_slice().expect("contiguous"));
    }
}

/// Path `j` of a simulated batch runs in scenario `j`.
pub struct PerPathScenarios<'a>(pub &'a [NoisyMarketScenario]);

impl MarketDynamics for PerPathScenarios<'_> {
    fn dim(&self) -> usize {
        self.0.first().map_or(0, |s| s.dim())
    }

    fn coefficients(&self, path: usize, step: usize, drift: &mut [f64], vol: &mut [f64]) {
        self.0[path].coefficients(path, step, drift, vol)
    }
}

/// Draws `n_pool` independent noisy scenarios around `reference`.
///
/// The volatility noise perturbs the entries of the volatility matrix, so every
/// scenario covariance `σσᵀ` is PSD by construction.
pub fn make_noisy_pool(
    reference: &ReferenceMarket,
    grid: &TimeGrid,
    kind: NoiseKind,
    scales: NoiseScales,
    n_pool: usize,
    seed: u64,
) -> Result<Vec<NoisyMarketScenario>> {
    if n_pool == 0 {
        return Err(Error::InvalidParameter("noisy pool needs at least one scenario".into()));
    }
    if !(scales.vol >= 0.0 && scales.drift >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise scales must be ≥ 0, got {scales:?}")));
    }
    let d = reference.dim();
    let n_steps = grid.n_steps();
    let walk_scale = 1.0 / (n_steps as f64).sqrt();

    let pool = (0..n_pool)
        .into_par_iter()
        .map(|j| {
            let mut rng = path_rng(seed, j as u64);
            let mut drift = Array2::zeros((n_steps, d));
            let mut vol = Array2::zeros((n_steps, d * d));
            let mut covariance = Array2::zeros((n_steps, d * d));
            let mut vol_noise = vec![0.0; d * d];
            let mut drift_noise = vec![0.0; d];
            for n in 0..n_steps {
                match kind {
                    NoiseKind::Constant if n > 0 => {}
                    NoiseKind::Constant | NoiseKind::NonConstant => {
                        vol_noise.iter_mut().for_each(|z| *z = rng.sample(StandardNormal));
                        drift_noise.iter_mut().for_each(|z| *z = rng.sample(StandardNormal));
                    }
                    NoiseKind::Cumulative => {
                        for z in vol_noise.iter_mut() {
                            *z += walk_scale * rng.sample::<f64, _>(StandardNormal);
                        }
                        for z in drift_noise.iter_mut() {
                            *z += walk_scale * rng.sample::<f64, _>(StandardNormal);
                        }
                    }
                }
                let sigma: Vec<f64> =
                    reference.vol.iter().zip(&vol_noise).map(|(v, z)| v + scales.vol * z).collect();
                for i in 0..d {
                    drift[[n, i]] = reference.drift[i] + scales.drift * drift_noise[i];
                }
                let cov = linalg::gram(&sigma, d);
                for k in 0..d * d {
                    vol[[n, k]] = sigma[k];
                    covariance[[n, k]] = cov[k];
                }
            }
            NoisyMarketScenario { kind, drift, vol, covariance }
        })
        .collect();
    Ok(pool)
}
