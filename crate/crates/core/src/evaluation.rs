//! Monte Carlo scoring of trading policies against fixed markets and pools.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::market_sim::{
    simulate_euler, simulate_garch, simulate_student_t, GarchModel, NoiseIncrements, NoisyMarketScenario, PathBatch,
    ReferenceMarket, StudentTMarket, TimeGrid,
};
use crate::portfolio::{roll_out, CostSpec, Policy, WealthLedger};
use crate::utility_penalty::PowerUtility;
use crate::{Error, Result};

/// Below this `|E_u(π*)|` the relative error is replaced by the absolute one.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-12;

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub defaults: usize,
}

impl Estimate {
    pub fn from_samples(samples: &[f64], defaults: usize) -> Self {
        let n = samples.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_error: f64::NAN, n_paths: 0, defaults };
        }
        let nf = n as f64;
        let mean = samples.iter().sum::<f64>() / nf;
        if !mean.is_finite() {
            return Self { mean, std_error: f64::INFINITY, n_paths: n, defaults };
        }
        let var = if n > 1 { samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nf - 1.0) } else { 0.0 };
        Self { mean, std_error: (var / nf).sqrt(), n_paths: n, defaults }
    }
}

/// Shared evaluation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub utility: PowerUtility,
    pub costs: CostSpec,
    pub initial_wealth: f64,
    pub rate: f64,
}

impl EvalSettings {
    pub fn run(&self, policy: &dyn Policy, paths: &PathBatch, grid: &TimeGrid) -> Result<WealthLedger> {
        roll_out(policy, paths, grid, self.initial_wealth, self.rate, &self.costs, false)
    }

    /// Utility of the terminal wealth; any default makes the estimate `−∞`.
    pub fn score(&self, ledger: &WealthLedger) -> Estimate {
        let utilities: Vec<f64> = ledger.terminal().iter().map(|x| self.utility.value(*x)).collect();
        let mut est = Estimate::from_samples(&utilities, ledger.defaulted());
        if est.defaults > 0 {
            est.mean = f64::NEG_INFINITY;
            est.std_error = f64::INFINITY;
        }
        est
    }
}

/// `E[u(X_T)]` for `policy` on pre-simulated `paths`.
pub fn expected_utility(
    policy: &dyn Policy,
    paths: &PathBatch,
    grid: &TimeGrid,
    settings: &EvalSettings,
) -> Result<Estimate> {
    Ok(settings.score(&settings.run(policy, paths, grid)?))
}

/// A market a policy can be scored against.
#[derive(Debug, Clone)]
pub enum EvalMarket {
    Reference(ReferenceMarket),
    Noisy { scenario: NoisyMarketScenario, initial_price: Vec<f64> },
    Garch { model: GarchModel, initial_price: Vec<f64> },
    StudentT { market: StudentTMarket, initial_price: f64 },
}

impl EvalMarket {
    pub fn dim(&self) -> usize {
        match self {
            EvalMarket::Reference(m) => m.dim(),
            EvalMarket::Noisy { scenario, .. } => scenario.dim(),
            EvalMarket::Garch { model, .. } => model.dim(),
            EvalMarket::StudentT { .. } => 1,
        }
    }

    /// Simulates `n_paths` paths; Euler-type markets draw their increments from `seed`.
    pub fn simulate(&self, grid: &TimeGrid, n_paths: usize, seed: u64) -> Result<PathBatch> {
        match self {
            EvalMarket::Reference(m) => {
                let inc = NoiseIncrements::generate(n_paths, grid.n_steps(), m.dim(), seed);
                simulate_euler(grid, m, &m.initial_price, &inc, false)
            }
            EvalMarket::Noisy { scenario, initial_price } => {
                let inc = NoiseIncrements::generate(n_paths, grid.n_steps(), scenario.dim(), seed);
                simulate_euler(grid, scenario, initial_price, &inc, false)
            }
            EvalMarket::Garch { model, initial_price } => simulate_garch(model, grid, initial_price, n_paths, seed),
            EvalMarket::StudentT { market, initial_price } => {
                simulate_student_t(market, grid, *initial_price, n_paths, seed)
            }
        }
    }
}

/// Seed for scenario `j` of a pool evaluated with base seed `seed`.
pub fn scenario_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_add((j as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledUtility {
    /// `M_u`, the smallest per-scenario expected utility.
    pub min: f64,
    pub argmin: usize,
    pub per_scenario: Vec<Estimate>,
}

impl PooledUtility {
    pub fn min_estimate(&self) -> Estimate {
        self.per_scenario[self.argmin]
    }
}

/// `M_u = min_j E_u(π, S^j)` over `pool`, each scenario with `paths_per_scenario` paths.
///
/// Scenario `j` always uses the same driving noise for a given seed, so two
/// policies evaluated with the same seed share random numbers.
pub fn pooled_min_utility(
    policy: &dyn Policy,
    pool: &[EvalMarket],
    grid: &TimeGrid,
    paths_per_scenario: usize,
    settings: &EvalSettings,
    seed: u64,
) -> Result<PooledUtility> {
    if pool.is_empty() {
        return Err(Error::InvalidParameter("pool must contain at least one scenario".into()));
    }
    let per_scenario = pool
        .par_iter()
        .enumerate()
        .map(|(j, market)| {
            let paths = market.simulate(grid, paths_per_scenario, scenario_seed(seed, j))?;
            expected_utility(policy, &paths, grid, settings)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pooled_from(per_scenario))
}

pub fn pooled_from(per_scenario: Vec<Estimate>) -> PooledUtility {
    let (argmin, min) = per_scenario
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |(ai, am), (i, e)| if e.mean < am { (i, e.mean) } else { (ai, am) });
    let min = if per_scenario.iter().any(|e| e.mean.is_nan()) { f64::NAN } else { min };
    PooledUtility { min, argmin, per_scenario }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeError {
    /// `(E(π*) − E(π))/|E(π*)|`; negative when the candidate wins. Absolute
    /// difference when `absolute` is set.
    pub value: f64,
    pub absolute: bool,
    pub benchmark: Estimate,
    pub candidate: Estimate,
}

/// Relative utility gap of `candidate` behind `benchmark` on identical paths.
pub fn relative_error(
    benchmark: &dyn Policy,
    candidate: &dyn Policy,
    paths: &PathBatch,
    grid: &TimeGrid,
    settings: &EvalSettings,
) -> Result<RelativeError> {
    let b = expected_utility(benchmark, paths, grid, settings)?;
    let c = expected_utility(candidate, paths, grid, settings)?;
    let diff = b.mean - c.mean;
    let absolute = !(b.mean.abs() >= RELATIVE_ERROR_FLOOR);
    let value = if absolute { diff } else { diff / b.mean.abs() };
    Ok(RelativeError { value, absolute, benchmark: b, candidate: c })
}

/// `X₀ − q_α(e^{−rT} X_T)` with the lower empirical quantile.
pub fn value_at_risk(terminal: &[f64], alpha: f64, rate: f64, horizon: f64, initial_wealth: f64) -> Result<f64> {
    if terminal.is_empty() {
        return Err(Error::InvalidParameter("value at risk of an empty sample".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile level {alpha} outside (0, 1)")));
    }
    let discount = (-rate * horizon).exp();
    let mut xs: Vec<f64> = terminal.iter().map(|x| x * discount).collect();
    xs.sort_by(f64::total_cmp);
    let idx = (alpha * (xs.len() - 1) as f64).floor() as usize;
    Ok(initial_wealth - xs[idx])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    /// `√(6/n)`, the large-sample standard error of the skewness under normality.
    pub skewness_std_error: f64,
    pub bins: Vec<HistogramBin>,
}

impl HistogramReport {
    pub fn write_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["bin_left", "bin_right", "count"]).map_err(|e| Error::Format(e.to_string()))?;
        for b in &self.bins {
            w.write_record([b.left.to_string(), b.right.to_string(), b.count.to_string()])
                .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Moments and equal-width histogram of already discounted samples.
pub fn histogram_report(samples: &[f64], bins: usize) -> Result<HistogramReport> {
    if samples.is_empty() || bins == 0 {
        return Err(Error::InvalidParameter("histogram needs samples and at least one bin".into()));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let m2 = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = samples.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let skewness = if m2 > 0.0 { m3 / m2.powf(1.5) } else { 0.0 };
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for x in samples {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let bins = counts
        .into_iter()
        .enumerate()
        .map(|(k, count)| HistogramBin { left: lo + k as f64 * width, right: lo + (k + 1) as f64 * width, count })
        .collect();
    Ok(HistogramReport { mean, std: m2.sqrt(), skewness, skewness_std_error: (6.0 / n).sqrt(), bins })
}

/// All metrics for one strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: String,
    pub expected_utility: Estimate,
    pub pooled: Option<PooledUtility>,
    pub relative_error: Option<RelativeError>,
    pub value_at_risk: f64,
    pub var_level: f64,
    pub histogram: HistogramReport,
    pub n_pool: usize,
    pub b_test: usize,
}

impl EvalReport {
    /// Scores `policy` on `paths` and optionally on a pool.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        policy: &dyn Policy,
        paths: &PathBatch,
        grid: &TimeGrid,
        settings: &EvalSettings,
        var_level: f64,
        bins: usize,
        pooled: Option<PooledUtility>,
        relative_error: Option<RelativeError>,
    ) -> Result<Self> {
        let ledger = settings.run(policy, paths, grid)?;
        let terminal = ledger.terminal();
        let discount = (-settings.rate * grid.horizon()).exp();
        let discounted: Vec<f64> = terminal.iter().map(|x| x * discount).collect();
        Ok(Self {
            strategy: policy.name(),
            expected_utility: settings.score(&ledger),
            n_pool: pooled.as_ref().map_or(0, |p| p.per_scenario.len()),
            pooled,
            relative_error,
            value_at_risk: value_at_risk(&terminal, var_level, settings.rate, grid.horizon(), settings.initial_wealth)?,
            var_level,
            histogram: histogram_report(&discounted, bins)?,
            b_test: paths.n_paths(),
        })
    }
}

/// One row per report: strategy, E_u, its standard error, M_u, argmin,
/// err_rel, VaR, mean, std, skewness, defaults, n_pool, B_test.
pub fn write_reports_csv<P: AsRef<Path>>(path: P, reports: &[EvalReport]) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record([
        "strategy", "expected_utility", "std_error", "pooled_min", "pooled_argmin", "err_rel", "var", "mean", "std",
        "skewness", "defaults", "n_pool", "b_test",
    ])
    .map_err(fmt)?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for r in reports {
        w.write_record([
            r.strategy.clone(),
            r.expected_utility.mean.to_string(),
            r.expected_utility.std_error.to_string(),
            opt(r.pooled.as_ref().map(|p| p.min.to_string())),
            opt(r.pooled.as_ref().map(|p| p.argmin.to_string())),
            opt(r.relative_error.map(|e| e.value.to_string())),
            r.value_at_risk.to_string(),
            r.histogram.mean.to_string(),
            r.histogram.std.to_string(),
            r.histogram.skewness.to_string(),
            r.expected_utility.defaults.to_string(),
            r.n_pool.to_string(),
            r.b_test.to_string(),
        ])
        .map_err(fmt)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_sim::{make_noisy_pool, NoiseKind, NoiseScales};
    use crate::portfolio::{CashPolicy, ConstantWeights};

    fn setting(p: f64) -> EvalSettings {
        EvalSettings {
            utility: PowerUtility::unshifted(p),
            costs: CostSpec::proportional(0.01),
            initial_wealth: 1.0,
            rate: 0.015,
        }
    }

    fn market() -> ReferenceMarket {
        ReferenceMarket::from_vol(vec![0.055], vec![0.35], 0.015, vec![1.0]).unwrap()
    }

    #[test]
    fn cash_anchor_is_exact() {
        let grid = TimeGrid::uniform(1.0, 65).unwrap();
        let paths = EvalMarket::Reference(market()).simulate(&grid, 10, 0).unwrap();
        let e = expected_utility(&CashPolicy, &paths, &grid, &setting(0.5)).unwrap();
        assert!((e.mean - 2.0151).abs() < 5e-5);
        assert!(e.std_error < 1e-12);
    }

    #[test]
    fn self_relative_error_is_zero() {
        let grid = TimeGrid::uniform(1.0, 65).unwrap();
        let paths = EvalMarket::Reference(market()).simulate(&grid, 500, 2).unwrap();
        let pi = ConstantWeights::new("c", vec![0.6]);
        let e = relative_error(&pi, &pi, &paths, &grid, &setting(0.5)).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn cash_pool_minimum_is_pool_invariant() {
        let grid = TimeGrid::uniform(1.0, 65).unwrap();
        let m = market();
        let pool: Vec<EvalMarket> =
            make_noisy_pool(&m, &grid, NoiseKind::Cumulative, NoiseScales { vol: 0.075, drift: 0.01 }, 5, 1)
                .unwrap()
                .into_iter()
                .map(|scenario| EvalMarket::Noisy { scenario, initial_price: vec![1.0] })
                .collect();
        let s = setting(0.5);
        let pooled = pooled_min_utility(&CashPolicy, &pool, &grid, 20, &s, 3).unwrap();
        let expected = s.utility.value((1.0 + 0.015 / 65.0_f64).powi(65));
        assert!((pooled.min - expected).abs() < 1e-14);
    }

    #[test]
    fn pool_minimum_never_rises_with_more_scenarios() {
        let grid = TimeGrid::uniform(1.0, 20).unwrap();
        let m = market();
        let pool: Vec<EvalMarket> =
            make_noisy_pool(&m, &grid, NoiseKind::Constant, NoiseScales { vol: 0.1, drift: 0.02 }, 6, 1)
                .unwrap()
                .into_iter()
                .map(|scenario| EvalMarket::Noisy { scenario, initial_price: vec![1.0] })
                .collect();
        let pi = ConstantWeights::new("c", vec![0.6]);
        let s = setting(0.5);
        let small = pooled_min_utility(&pi, &pool[..3], &grid, 200, &s, 9).unwrap();
        let large = pooled_min_utility(&pi, &pool, &grid, 200, &s, 9).unwrap();
        assert!(large.min <= small.min);
        assert!(small.per_scenario.iter().all(|e| e.mean >= small.min));
    }

    #[test]
    fn var_anchors() {
        let x = (0.015_f64).exp();
        assert!(value_at_risk(&[x; 10], 0.05, 0.015, 1.0, 1.0).unwrap().abs() < 1e-15);
        let xs: Vec<f64> = (0..101).map(|i| i as f64 / 100.0).collect();
        assert!((value_at_risk(&xs, 0.05, 0.0, 1.0, 1.0).unwrap() - 0.95).abs() < 1e-12);
        let shifted: Vec<f64> = xs.iter().map(|x| x + 0.3).collect();
        assert!((value_at_risk(&shifted, 0.05, 0.0, 1.0, 1.0).unwrap() - 0.65).abs() < 1e-12);
    }

    #[test]
    fn histogram_of_constant_sample() {
        let h = histogram_report(&[2.0; 50], 10).unwrap();
        assert_eq!(h.std, 0.0);
        assert_eq!(h.bins.iter().filter(|b| b.count > 0).count(), 1);
    }

    #[test]
    fn symmetric_sample_has_small_skew() {
        let xs: Vec<f64> = (0..20_001).map(|i| ((i as f64) * 0.618_033_988_7).fract() - 0.5).collect();
        let h = histogram_report(&xs, 20).unwrap();
        assert!(h.skewness.abs() < 3.0 * h.skewness_std_error);
    }

    #[test]
    fn defaults_make_the_estimate_minus_infinity() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let m = ReferenceMarket::from_vol(vec![0.0], vec![3.0], 0.0, vec![1.0]).unwrap();
        let paths = EvalMarket::Reference(m).simulate(&grid, 300, 1).unwrap();
        let e = expected_utility(&ConstantWeights::new("lev", vec![8.0]), &paths, &grid, &setting(0.5)).unwrap();
        assert!(e.defaults > 0);
        assert_eq!(e.mean, f64::NEG_INFINITY);
    }
}
