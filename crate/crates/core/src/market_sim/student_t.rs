use ndarray::Array3;
use rand::Rng;
use rand_distr::StudentT;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{path_rng, PathBatch, TimeGrid, PRICE_FLOOR};
use crate::{Error, Result};

/// How the per-step t-variate `R = μ̃Δt + σ̃√Δt·T_ν` moves the price.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnConvention {
    /// `S_{n+1} = S_n (1 + R)`, the multiplicative Euler form; a price that
    /// would cross zero is floored and the path flagged.
    #[default]
    Simple,
    /// `S_{n+1} = S_n e^R`.
    Log,
}

/// One asset with i.i.d. Student-t returns.
///
/// `scale` is the t scale parameter, not the standard deviation: the per-year
/// return variance is `scale²·ν/(ν−2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentTMarket {
    pub dof: f64,
    pub drift: f64,
    pub scale: f64,
    pub rate: f64,
    #[serde(default)]
    pub convention: ReturnConvention,
}

impl StudentTMarket {
    pub fn validate(&self) -> Result<()> {
        if !(self.dof > 2.0) {
            return Err(Error::InvalidParameter(format!("Student-t needs ν > 2, got {}", self.dof)));
        }
        if !(self.scale >= 0.0) || !self.scale.is_finite() || !self.drift.is_finite() {
            return Err(Error::InvalidParameter(format!("invalid location/scale {self:?}")));
        }
        Ok(())
    }

    pub fn log_return_variance(&self) -> f64 {
        self.scale * self.scale * self.dof / (self.dof - 2.0)
    }
}

pub fn simulate_student_t(
    market: &StudentTMarket,
    grid: &TimeGrid,
    initial_price: f64,
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    market.validate()?;
    if !(initial_price > 0.0) {
        return Err(Error::InvalidParameter("initial price must be positive".into()));
    }
    let dist = StudentT::new(market.dof).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let n = grid.n_steps();
    let mut prices = Array3::zeros((n_paths, n + 1, 1));
    let mut floored = vec![false; n_paths];
    prices.outer_iter_mut().into_par_iter().zip(floored.par_iter_mut()).enumerate().for_each(
        |(p, (mut path, hit))| {
            let mut rng = path_rng(seed, p as u64);
            path[[0, 0]] = initial_price;
            for k in 0..n {
                let dt = grid.dt(k);
                let t: f64 = rng.sample(dist);
                let ret = market.drift * dt + market.scale * dt.sqrt() * t;
                let next = match market.convention {
                    ReturnConvention::Simple => path[[k, 0]] * (1.0 + ret),
                    ReturnConvention::Log => path[[k, 0]] * ret.exp(),
                };
                path[[k + 1, 0]] = if next > 0.0 {
                    next
                } else {
                    *hit = true;
                    PRICE_FLOOR
                };
            }
        },
    );
    Ok(PathBatch { prices, drift: None, vol: None, floored })
}
