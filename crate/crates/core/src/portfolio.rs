//! Self-financing wealth recursion with proportional and base transaction costs.

use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::market_sim::{PathBatch, TimeGrid};
use crate::{Error, Result};

/// A traded amount above this counts as a trade for the base cost.
pub const TRADE_TOLERANCE: f64 = 1e-12;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostSpec {
    /// Fraction of traded value.
    pub proportional: f64,
    /// Fixed charge per asset traded.
    pub base: f64,
}

impl CostSpec {
    pub const NONE: CostSpec = CostSpec { proportional: 0.0, base: 0.0 };

    pub fn proportional(c: f64) -> Self {
        Self { proportional: c, base: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.proportional >= 0.0 && self.base >= 0.0) || !self.proportional.is_finite() || !self.base.is_finite() {
            return Err(Error::InvalidParameter(format!("costs must be finite and ≥ 0, got {self:?}")));
        }
        Ok(())
    }
}

/// Result of one rebalancing step on one path.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub wealth: f64,
    /// Units of each asset held over the step.
    pub holdings: Vec<f64>,
    pub traded: Vec<f64>,
    pub cost: f64,
}

/// Rebalances to `weights` at `prices` and carries wealth to the next grid point.
///
/// `prev_holdings` are the units held before trading (all zero at `t_0`, so
/// the initial purchase is charged).
pub fn step_wealth(
    wealth: f64,
    weights: &[f64],
    prev_holdings: &[f64],
    prices: &[f64],
    next_prices: &[f64],
    rate: f64,
    dt: f64,
    costs: &CostSpec,
) -> StepOutcome {
    let d = weights.len();
    let mut holdings = vec![0.0; d];
    let mut traded = vec![0.0; d];
    let mut fee = 0.0;
    let mut gain = 0.0;
    let mut invested = 0.0;
    for i in 0..d {
        holdings[i] = wealth * weights[i] / prices[i];
        traded[i] = (holdings[i] - prev_holdings[i]).abs();
        fee += traded[i] * prices[i] * costs.proportional;
        if traded[i] > TRADE_TOLERANCE {
            fee += costs.base;
        }
        gain += holdings[i] * (next_prices[i] - prices[i]);
        invested += weights[i];
    }
    let cost = (1.0 + rate * dt) * fee;
    StepOutcome { wealth: wealth + gain + (1.0 - invested) * wealth * rate * dt - cost, holdings, traded, cost }
}

/// Bank-account growth factor `Π (1 + r Δt_n)`.
pub fn cash_growth(rate: f64, grid: &TimeGrid) -> f64 {
    grid.steps().iter().map(|dt| 1.0 + rate * dt).product()
}

/// What a policy may observe at `t_n` for a block of paths.
pub struct Observation<'a> {
    pub step: usize,
    pub time: f64,
    /// `t_n / T`
    pub time_frac: f64,
    /// `(paths, d)` current prices.
    pub prices: ArrayView2<'a, f64>,
    pub wealth: &'a [f64],
}

/// A trading strategy acting on a block of paths, one step at a time.
///
/// Policies may carry per-path state; `reset` is called before each roll-out
/// with the number of paths in the block.
pub trait Policy: Send + Sync {
    fn name(&self) -> String;
    fn reset(&mut self, n_paths: usize);
    /// Writes the `(paths, d)` portfolio weights for the current step.
    fn act(&mut self, obs: &Observation<'_>, weights: &mut Array2<f64>);
    fn clone_box(&self) -> Box<dyn Policy>;
}

impl Clone for Box<dyn Policy> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Everything in the bank account.
#[derive(Debug, Clone, Default)]
pub struct CashPolicy;

impl Policy for CashPolicy {
    fn name(&self) -> String {
        "cash".into()
    }

    fn reset(&mut self, _n_paths: usize) {}

    fn act(&mut self, _obs: &Observation<'_>, weights: &mut Array2<f64>) {
        weights.fill(0.0);
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

/// Rebalances to the same weights at every step.
#[derive(Debug, Clone)]
pub struct ConstantWeights {
    pub label: String,
    pub weights: Vec<f64>,
}

impl ConstantWeights {
    pub fn new(label: impl Into<String>, weights: Vec<f64>) -> Self {
        Self { label: label.into(), weights }
    }
}

impl Policy for ConstantWeights {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self, _n_paths: usize) {}

    fn act(&mut self, _obs: &Observation<'_>, weights: &mut Array2<f64>) {
        for mut row in weights.rows_mut() {
            row.iter_mut().zip(&self.weights).for_each(|(w, v)| *w = *v);
        }
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

/// Wealth trajectories of one roll-out.
#[derive(Debug, Clone)]
pub struct WealthLedger {
    pub initial_wealth: f64,
    /// `(paths, N+1)`
    pub wealth: Array2<f64>,
    /// `(paths, N, d)` units held over each step, when recorded.
    pub holdings: Option<Array3<f64>>,
    /// `(paths, N, d)` units traded at each step, when recorded.
    pub traded: Option<Array3<f64>>,
    /// `(paths, N)` costs paid at each step, when recorded.
    pub costs: Option<Array2<f64>>,
    /// First step index at which wealth was ≤ 0.
    pub default_step: Vec<Option<usize>>,
}

impl WealthLedger {
    pub fn n_paths(&self) -> usize {
        self.wealth.nrows()
    }

    pub fn terminal(&self) -> Vec<f64> {
        self.wealth.column(self.wealth.ncols() - 1).to_vec()
    }

    pub fn defaulted(&self) -> usize {
        self.default_step.iter().filter(|s| s.is_some()).count()
    }

    /// CSV with columns `t, path_id, X, H_1..H_d, A_1..A_d, C`; trade columns are
    /// empty on the terminal row.
    pub fn write_csv<P: AsRef<Path>>(&self, path: P, grid: &TimeGrid) -> Result<()> {
        let (Some(h), Some(a), Some(c)) = (&self.holdings, &self.traded, &self.costs) else {
            return Err(Error::InvalidParameter("ledger export needs a recorded roll-out".into()));
        };
        let d = h.shape()[2];
        let n = grid.n_steps();
        let fmt = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(fmt)?;
        let mut header = vec!["t".to_string(), "path_id".into(), "X".into()];
        header.extend((1..=d).map(|i| format!("H_{i}")));
        header.extend((1..=d).map(|i| format!("A_{i}")));
        header.push("C".into());
        w.write_record(&header).map_err(fmt)?;
        for p in 0..self.n_paths() {
            for k in 0..=n {
                let mut row = vec![grid.times()[k].to_string(), p.to_string(), self.wealth[[p, k]].to_string()];
                if k < n {
                    row.extend((0..d).map(|i| h[[p, k, i]].to_string()));
                    row.extend((0..d).map(|i| a[[p, k, i]].to_string()));
                    row.push(c[[p, k]].to_string());
                } else {
                    row.extend(std::iter::repeat_n(String::new(), 2 * d + 1));
                }
                w.write_record(&row).map_err(fmt)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs `policy` along every path of `paths`.
///
/// Paths are processed in independent blocks, each with its own clone of the
/// policy, so results do not depend on the thread count.
pub fn roll_out(
    policy: &dyn Policy,
    paths: &PathBatch,
    grid: &TimeGrid,
    initial_wealth: f64,
    rate: f64,
    costs: &CostSpec,
    record: bool,
) -> Result<WealthLedger> {
    costs.validate()?;
    if grid.n_steps() != paths.n_steps() {
        return Err(Error::Dimension(format!("grid has {} steps, paths {}", grid.n_steps(), paths.n_steps())));
    }
    let (b, n, d) = (paths.n_paths(), paths.n_steps(), paths.dim());
    let starts: Vec<usize> = (0..b).step_by(CHUNK).collect();
    let blocks = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(b);
            let prices = paths.prices.slice(s![start..end, .., ..]);
            roll_out_block(policy.clone_box(), prices, start, grid, initial_wealth, rate, costs, record)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut wealth = Array2::zeros((b, n + 1));
    let mut holdings = record.then(|| Array3::zeros((b, n, d)));
    let mut traded = record.then(|| Array3::zeros((b, n, d)));
    let mut cost_rec = record.then(|| Array2::zeros((b, n)));
    let mut default_step = Vec::with_capacity(b);
    for (start, block) in starts.into_iter().zip(blocks) {
        let end = start + block.wealth.nrows();
        wealth.slice_mut(s![start..end, ..]).assign(&block.wealth);
        if let (Some(h), Some(bh)) = (holdings.as_mut(), block.holdings.as_ref()) {
            h.slice_mut(s![start..end, .., ..]).assign(bh);
        }
        if let (Some(a), Some(ba)) = (traded.as_mut(), block.traded.as_ref()) {
            a.slice_mut(s![start..end, .., ..]).assign(ba);
        }
        if let (Some(c), Some(bc)) = (cost_rec.as_mut(), block.costs.as_ref()) {
            c.slice_mut(s![start..end, ..]).assign(bc);
        }
        default_step.extend(block.default_step);
    }
    Ok(WealthLedger { initial_wealth, wealth, holdings, traded, costs: cost_rec, default_step })
}

#[allow(clippy::too_many_arguments)]
fn roll_out_block(
    mut policy: Box<dyn Policy>,
    prices: ndarray::ArrayView3<'_, f64>,
    offset: usize,
    grid: &TimeGrid,
    initial_wealth: f64,
    rate: f64,
    costs: &CostSpec,
    record: bool,
) -> Result<WealthLedger> {
    let (b, n1, d) = prices.dim();
    let n = n1 - 1;
    let horizon = grid.horizon();
    policy.reset(b);
    let mut wealth = Array2::zeros((b, n + 1));
    wealth.column_mut(0).fill(initial_wealth);
    let mut holdings = Array2::<f64>::zeros((b, d));
    let mut weights = Array2::<f64>::zeros((b, d));
    let mut rec_h = record.then(|| Array3::zeros((b, n, d)));
    let mut rec_a = record.then(|| Array3::zeros((b, n, d)));
    let mut rec_c = record.then(|| Array2::zeros((b, n)));
    let mut default_step = vec![None; b];
    let mut current = vec![initial_wealth; b];
    for k in 0..n {
        let now = prices.index_axis(Axis(1), k);
        let obs = Observation {
            step: k,
            time: grid.times()[k],
            time_frac: grid.times()[k] / horizon,
            prices: now,
            wealth: &current,
        };
        policy.act(&obs, &mut weights);
        let dt = grid.dt(k);
        for p in 0..b {
            let w = weights.row(p);
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "policy '{}' produced {w} on path {} at step {k}",
                    policy.name(),
                    offset + p
                )));
            }
            let out = step_wealth(
                current[p],
                w.as_slice().expect("row-major weights"),
                holdings.row(p).as_slice().expect("row-major holdings"),
                now.row(p).as_slice().expect("contiguous prices"),
                prices.slice(s![p, k + 1, ..]).as_slice().expect("contiguous prices"),
                rate,
                dt,
                costs,
            );
            holdings.row_mut(p).iter_mut().zip(&out.holdings).for_each(|(h, v)| *h = *v);
            if let Some(r) = rec_h.as_mut() {
                r.slice_mut(s![p, k, ..]).iter_mut().zip(&out.holdings).for_each(|(h, v)| *h = *v);
            }
            if let Some(r) = rec_a.as_mut() {
                r.slice_mut(s![p, k, ..]).iter_mut().zip(&out.traded).for_each(|(h, v)| *h = *v);
            }
            if let Some(r) = rec_c.as_mut() {
                r[[p, k]] = out.cost;
            }
            current[p] = out.wealth;
            wealth[[p, k + 1]] = out.wealth;
            if default_step[p].is_none() && out.wealth <= 0.0 {
                default_step[p] = Some(k + 1);
            }
        }
    }
    Ok(WealthLedger { initial_wealth, wealth, holdings: rec_h, traded: rec_a, costs: rec_c, default_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_sim::{simulate_euler, NoiseIncrements, ReferenceMarket};

    fn market_1d() -> ReferenceMarket {
        ReferenceMarket::from_vol(vec![0.035], vec![0.25], 0.015, vec![1.0]).unwrap()
    }

    fn paths(m: &ReferenceMarket, b: usize, n: usize, seed: u64) -> (TimeGrid, PathBatch) {
        let grid = TimeGrid::uniform(1.0, n).unwrap();
        let inc = NoiseIncrements::generate(b, n, m.dim(), seed);
        let batch = simulate_euler(&grid, m, &m.initial_price, &inc, false).unwrap();
        (grid, batch)
    }

    #[test]
    fn bank_account_step() {
        let out = step_wealth(2.0, &[0.0], &[0.0], &[1.0], &[1.3], 0.015, 1.0 / 65.0, &CostSpec::NONE);
        assert_eq!(out.wealth, 2.0 * (1.0 + 0.015 / 65.0));
        assert_eq!(out.cost, 0.0);
    }

    #[test]
    fn initial_purchase_is_charged() {
        let out = step_wealth(1.0, &[0.5], &[0.0], &[1.0], &[1.0], 0.015, 1.0 / 65.0, &CostSpec::proportional(0.01));
        assert_eq!(out.traded, vec![0.5]);
        assert!((out.cost - 0.005_001_153_846).abs() < 1e-12, "{}", out.cost);
    }

    #[test]
    fn unchanged_holdings_cost_nothing() {
        let out = step_wealth(1.2, &[0.5], &[0.6], &[1.0], &[1.1], 0.0, 0.1, &CostSpec { proportional: 0.01, base: 0.0 });
        assert_eq!(out.traded, vec![0.0]);
        assert_eq!(out.cost, 0.0);
    }

    #[test]
    fn base_cost_needs_a_real_trade() {
        let c = CostSpec { proportional: 0.0, base: 0.1 };
        let quiet = step_wealth(1.0, &[0.5], &[0.5 + 1e-14], &[1.0], &[1.0], 0.0, 0.1, &c);
        assert_eq!(quiet.cost, 0.0);
        let trade = step_wealth(1.0, &[0.5, 0.2], &[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0], 0.0, 0.1, &c);
        assert!((trade.cost - 0.2).abs() < 1e-15);
    }

    #[test]
    fn cash_policy_compounds() {
        let m = market_1d();
        let (grid, batch) = paths(&m, 100, 65, 1);
        let ledger = roll_out(&CashPolicy, &batch, &grid, 1.0, 0.015, &CostSpec::proportional(0.01), false).unwrap();
        let expected = (1.0 + 0.015 / 65.0_f64).powi(65);
        for x in ledger.terminal() {
            assert!((x - expected).abs() < 1e-14);
        }
        assert!((cash_growth(0.015, &grid) - expected).abs() < 1e-14);
    }

    #[test]
    fn merton_log_wealth_matches_quadrature() {
        let m = market_1d();
        let (grid, batch) = paths(&m, 100_000, 65, 7);
        let pi = 0.02 / 0.0625;
        let policy = ConstantWeights::new("merton", vec![pi]);
        let ledger = roll_out(&policy, &batch, &grid, 1.0, 0.015, &CostSpec::NONE, false).unwrap();
        let logs: Vec<f64> = ledger.terminal().iter().map(|x| x.ln()).collect();
        let nb = logs.len() as f64;
        let mean = logs.iter().sum::<f64>() / nb;
        let se = (logs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (nb - 1.0) / nb).sqrt();

        // E ln(1 + a + bZ) per step by Simpson quadrature
        let dt = 1.0 / 65.0;
        let a = 0.015 * dt + pi * 0.02 * dt;
        let b = pi * 0.25 * dt.sqrt();
        let (lo, hi, k) = (-12.0, 12.0, 24_000);
        let h = (hi - lo) / k as f64;
        let f = |z: f64| (1.0 + a + b * z).ln() * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut acc = f(lo) + f(hi);
        for j in 1..k {
            acc += f(lo + j as f64 * h) * if j % 2 == 1 { 4.0 } else { 2.0 };
        }
        let exact = 65.0 * acc * h / 3.0;
        assert!((mean - exact).abs() < 3.0 * se, "{mean} vs {exact} (se {se})");
    }

    #[test]
    fn holdings_identity_and_defaults() {
        let m = ReferenceMarket::from_vol(vec![0.0], vec![2.0], 0.0, vec![1.0]).unwrap();
        let (grid, batch) = paths(&m, 200, 10, 3);
        let policy = ConstantWeights::new("lev", vec![5.0]);
        let ledger = roll_out(&policy, &batch, &grid, 1.0, 0.0, &CostSpec::NONE, true).unwrap();
        let h = ledger.holdings.as_ref().unwrap();
        for p in 0..200 {
            for k in 0..10 {
                let lhs = h[[p, k, 0]] * batch.prices[[p, k, 0]];
                assert!((lhs - 5.0 * ledger.wealth[[p, k]]).abs() < 1e-12 * (1.0 + lhs.abs()));
            }
            if let Some(s) = ledger.default_step[p] {
                assert!(ledger.wealth[[p, s]] <= 0.0);
                assert!(ledger.wealth.row(p).iter().take(s).all(|x| *x > 0.0));
            }
        }
        assert!(ledger.defaulted() > 0);
    }

    #[test]
    fn ledger_csv_layout() {
        let m = market_1d();
        let (grid, batch) = paths(&m, 2, 3, 3);
        let policy = ConstantWeights::new("c", vec![0.5]);
        let ledger = roll_out(&policy, &batch, &grid, 1.0, 0.01, &CostSpec::proportional(0.01), true).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("ledger.csv");
        ledger.write_csv(&f, &grid).unwrap();
        let text = std::fs::read_to_string(&f).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "t,path_id,X,H_1,A_1,C");
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(lines[4].ends_with(",,,"));
    }

    #[test]
    fn non_finite_weights_name_the_path() {
        struct Bad;
        impl Policy for Bad {
            fn name(&self) -> String {
                "bad".into()
            }
            fn reset(&mut self, _: usize) {}
            fn act(&mut self, obs: &Observation<'_>, w: &mut Array2<f64>) {
                w.fill(0.0);
                if obs.step == 2 {
                    w[[1, 0]] = f64::NAN;
                }
            }
            fn clone_box(&self) -> Box<dyn Policy> {
                Box::new(Bad)
            }
        }
        let m = market_1d();
        let (grid, batch) = paths(&m, 3, 4, 0);
        let err = roll_out(&Bad, &batch, &grid, 1.0, 0.0, &CostSpec::NONE, false).unwrap_err();
        assert!(err.to_string().contains("path 1"), "{err}");
    }
}
