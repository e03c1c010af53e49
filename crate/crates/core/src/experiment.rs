//! Named experiment presets, config files and the dataset → train → evaluate pipeline.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::closed_form::{
    self, solve_1d_robust_vol, solve_fully_robust, solve_multid_robust_vol, NoTradeBand, NoTradePolicy, SaddleSolution,
};
use crate::evaluation::{
    pooled_min_utility, relative_error, write_reports_csv, EvalMarket, EvalReport, EvalSettings, PooledUtility,
    RelativeError,
};
use crate::gan_trainer::{
    resume_with, Game, NetShape, RobustMode, TrainConfig, TrainState, ValidationMarket, ValidationSpec,
};
use crate::market_sim::{
    make_noisy_garch_pool, make_noisy_pool, simulate_euler, GarchModel, NoiseIncrements, NoiseKind, NoiseScales,
    PathBatch, ReferenceMarket, ReturnConvention, StudentTMarket, TimeGrid,
};
use crate::neural::{load_checkpoint, Architecture, ParamSet};
use crate::portfolio::{CashPolicy, ConstantWeights, CostSpec, Policy};
use crate::utility_penalty::{PenaltyKind, PowerUtility};
use crate::{Error, Result};

/// Environment variable naming the directory that receives run outputs.
pub const OUTPUT_ROOT_VAR: &str = "RUO_OUTPUT_ROOT";

pub const PRESET_NAMES: &[&str] = &[
    "merton-1d",
    "S",
    "AS",
    "PS",
    "PAS",
    "NAS",
    "5S",
    "S+SD",
    "S+AD",
    "AS+SD",
    "AS+AD",
    "PS+AD",
    "PAS+AD",
    "NAS+AD",
    "AS+AD-cost",
    "realistic",
    "small-cost-5.5",
    "small-cost-10",
    "student-t-20",
    "student-t-3.5",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketSpec {
    pub drift: Vec<f64>,
    /// Row-major `d×d` volatility matrix.
    pub vol: Vec<f64>,
    pub rate: f64,
    pub initial_price: Vec<f64>,
    pub horizon: f64,
    pub n_steps: usize,
}

impl MarketSpec {
    pub fn reference(&self) -> Result<ReferenceMarket> {
        ReferenceMarket::from_vol(self.drift.clone(), self.vol.clone(), self.rate, self.initial_price.clone())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.horizon, self.n_steps)
    }

    pub fn dim(&self) -> usize {
        self.drift.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseDistribution {
    Gaussian,
    /// Raw Student-t draws, matching the simple-return Student-t market.
    StudentT { dof: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub antithetic: bool,
    pub distribution: NoiseDistribution,
}

/// Disjoint training, validation and test increments.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub train: NoiseIncrements,
    pub val: NoiseIncrements,
    pub test: NoiseIncrements,
}

impl DataSpec {
    pub fn generate(&self, n_steps: usize, d: usize) -> Result<Datasets> {
        let total = self.n_train + self.n_val + self.n_test;
        let all = match self.distribution {
            NoiseDistribution::Gaussian if self.antithetic => {
                NoiseIncrements::generate_antithetic(total, n_steps, d, self.seed)
            }
            NoiseDistribution::Gaussian => NoiseIncrements::generate(total, n_steps, d, self.seed),
            NoiseDistribution::StudentT { dof } => {
                NoiseIncrements::generate_student_t(total, n_steps, d, dof, self.seed)?
            }
        };
        let (train, rest) = all.split(self.n_train)?;
        let (val, test) = rest.split(self.n_val)?;
        let test = test.split(self.n_test)?.0;
        Ok(Datasets { train, val, test })
    }
}

/// Closed-form strategy the learned policy is compared with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Benchmark {
    None,
    /// Volatility-penalized single asset; the penalty acts on `σ`.
    RobustVol1d,
    /// Covariance penalty `F_a` or `F_m`, drift fixed.
    RobustVol { penalty: PenaltyKind },
    /// Covariance and drift penalties, additive.
    FullyRobust,
    /// Asymptotic no-trade band around the frictionless power-utility weight.
    NoTrade { risk_aversion: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TestMarket {
    Reference,
    StudentT { dof: f64, convention: ReturnConvention },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum PoolSource {
    Noisy { kind: NoiseKind, scales: NoiseScales },
    Garch { model: GarchModel, se_factor: f64, corr_std: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub source: PoolSource,
    pub n_pool: usize,
    pub paths_per_scenario: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub benchmark: Benchmark,
    pub test_market: TestMarket,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
    pub var_level: f64,
    pub histogram_bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub market: MarketSpec,
    pub train: TrainConfig,
    pub data: DataSpec,
    pub eval: EvalSpec,
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// First 16 hex digits of SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Sets `key` (dotted path, e.g. `train.epochs`) to a TOML literal.
    pub fn set(&mut self, key: &str, literal: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {literal}"))
            .map(|mut t| t.remove("v").expect("parsed key"))
            .unwrap_or_else(|_| toml::Value::String(literal.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        set_path(&mut root, &parts, value, key)?;
        *self = root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key} = {literal}: {e}")))?;
        Ok(())
    }

    /// Multiplies dataset and pool sizes by `factor` (at least one path each).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(Error::Config(format!("scale must be positive, got {factor}")));
        }
        let s = |n: usize| ((n as f64 * factor).round() as usize).max(1);
        let mut out = self.clone();
        out.data.n_train = s(self.data.n_train);
        out.data.n_val = s(self.data.n_val);
        out.data.n_test = s(self.data.n_test);
        if let Some(p) = out.eval.pool.as_mut() {
            p.n_pool = s(p.n_pool);
            p.paths_per_scenario = s(p.paths_per_scenario);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.market.dim();
        if self.market.vol.len() != d * d || self.market.initial_price.len() != d {
            return Err(Error::Config("market vol must be d×d and initial price length d".into()));
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return Err(Error::Config("need training and test paths".into()));
        }
        if self.train.validation.is_some() && self.data.n_val == 0 {
            return Err(Error::Config("validation configured without validation paths".into()));
        }
        if matches!(self.eval.test_market, TestMarket::StudentT { .. }) && d != 1 {
            return Err(Error::Config("Student-t markets have one asset".into()));
        }
        if !(self.eval.var_level > 0.0 && self.eval.var_level < 1.0) {
            return Err(Error::Config(format!("VaR level {} outside (0, 1)", self.eval.var_level)));
        }
        self.train.validate()?;
        self.market.reference()?;
        self.market.grid()?;
        Ok(())
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            utility: self.train.utility,
            costs: self.train.costs,
            initial_wealth: self.train.initial_wealth,
            rate: self.market.rate,
        }
    }

    pub fn game(&self) -> Result<Game> {
        Game::new(self.train.clone(), self.market.reference()?, self.market.grid()?)
    }
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value, key: &str) -> Result<()> {
    let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("'{key}' does not name a table entry")))?;
    match parts {
        [last] => {
            if !table.contains_key(*last) && !is_optional_key(last) {
                return Err(Error::Config(format!("unknown key '{key}'")));
            }
            table.insert(last.to_string(), value);
            Ok(())
        }
        [head, rest @ ..] => {
            let child = table.get_mut(*head).ok_or_else(|| Error::Config(format!("unknown key '{key}'")))?;
            set_path(child, rest, value, key)
        }
        [] => Err(Error::Config("empty key".into())),
    }
}

fn is_optional_key(key: &str) -> bool {
    matches!(key, "max_grad_norm" | "validation" | "pool" | "patience")
}

fn diag(values: &[f64]) -> Vec<f64> {
    let d = values.len();
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        m[i * d + i] = values[i];
    }
    m
}

/// Lower-triangular volatility for two assets with the given vols and correlation.
fn correlated_vol(v1: f64, v2: f64, rho: f64) -> Vec<f64> {
    vec![v1, 0.0, rho * v2, v2 * (1.0 - rho * rho).sqrt()]
}

fn base_market(drift: Vec<f64>, vol: Vec<f64>) -> MarketSpec {
    let d = drift.len();
    MarketSpec { drift, vol, rate: 0.015, initial_price: vec![1.0; d], horizon: 1.0, n_steps: 65 }
}

fn default_data() -> DataSpec {
    DataSpec {
        n_train: 160_000,
        n_val: 0,
        n_test: 40_000,
        seed: 0,
        antithetic: false,
        distribution: NoiseDistribution::Gaussian,
    }
}

fn default_eval(benchmark: Benchmark) -> EvalSpec {
    EvalSpec { benchmark, test_market: TestMarket::Reference, pool: None, var_level: 0.05, histogram_bins: 50 }
}

fn vol_setting(name: &str) -> Option<Vec<f64>> {
    Some(match name {
        "S" => diag(&[0.25, 0.25]),
        "AS" => diag(&[0.15, 0.35]),
        "PS" => correlated_vol(0.25, 0.25, 0.9),
        "PAS" => correlated_vol(0.15, 0.35, 0.9),
        "NAS" => correlated_vol(0.15, 0.35, -0.9),
        "5S" => diag(&[0.25; 5]),
        _ => return None,
    })
}

fn drift_setting(name: &str) -> Option<Vec<f64>> {
    Some(match name {
        "SD" => vec![0.035, 0.035],
        "AD" => vec![0.035, 0.055],
        _ => return None,
    })
}

fn robust_config(mode: RobustMode, penalty: PenaltyKind, vol_scale: f64, drift_scale: f64) -> TrainConfig {
    TrainConfig { mode, penalty, vol_scale, drift_scale, ..TrainConfig::default() }
}

/// Cumulative-noise validation around the reference, at the given scales.
fn noisy_validation(vol: f64, drift: f64, seed: u64) -> ValidationSpec {
    ValidationSpec {
        market: ValidationMarket::Noisy { kind: NoiseKind::Cumulative, scales: NoiseScales { vol, drift }, seed },
        patience: None,
    }
}

fn noisy_pool(vol: f64, drift: f64) -> PoolSpec {
    PoolSpec {
        source: PoolSource::Noisy { kind: NoiseKind::Cumulative, scales: NoiseScales { vol, drift } },
        n_pool: 1000,
        paths_per_scenario: 40_000,
        seed: 7,
    }
}

/// Small-cost single-asset market `(μ̃_S, r)`, `σ̃ = 35%`, `ũ_{1/2}`.
fn small_cost(name: &str, excess: f64, rate: f64) -> ExperimentConfig {
    let mut market = base_market(vec![excess + rate], vec![0.35]);
    market.rate = rate;
    let mut train = robust_config(RobustMode::NonRobust, PenaltyKind::Pathwise, 10.0, 1.0);
    train.utility = PowerUtility::unshifted(0.5);
    train.costs = CostSpec::proportional(0.01);
    train.validation = Some(ValidationSpec { market: ValidationMarket::Fixed(market.reference().expect("preset market")), patience: None });
    ExperimentConfig {
        name: name.into(),
        market,
        train,
        data: DataSpec { n_val: 40_000, ..default_data() },
        eval: EvalSpec { pool: Some(noisy_pool(0.075, 0.01)), ..default_eval(Benchmark::NoTrade { risk_aversion: 0.5 }) },
    }
}

/// The configuration of a named preset.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let unknown = || Error::Config(format!("unknown preset '{name}'; known: {}", PRESET_NAMES.join(", ")));
    let cfg = match name {
        "merton-1d" => {
            let mut train = robust_config(RobustMode::VolRobust, PenaltyKind::Volatility, 10.0, 0.0);
            train.initial_wealth = 5.0;
            ExperimentConfig {
                name: name.into(),
                market: base_market(vec![0.035], vec![0.25]),
                train,
                data: default_data(),
                eval: default_eval(Benchmark::RobustVol1d),
            }
        }
        "S" | "AS" | "PS" | "PAS" | "NAS" | "5S" => {
            let vol = vol_setting(name).expect("listed");
            let d = (vol.len() as f64).sqrt() as usize;
            let mut train = robust_config(RobustMode::VolRobust, PenaltyKind::Additive, 1.0, 0.0);
            train.generator.architecture = Architecture::Rnn;
            train.discriminator.architecture = Architecture::Rnn;
            ExperimentConfig {
                name: name.into(),
                market: base_market(vec![0.035; d], vol),
                train,
                data: default_data(),
                eval: default_eval(Benchmark::RobustVol { penalty: PenaltyKind::Additive }),
            }
        }
        "AS+AD-cost" => {
            let mut cfg = preset("AS+AD")?;
            cfg.name = name.into();
            cfg.train.costs = CostSpec::proportional(0.01);
            cfg
        }
        "realistic" => {
            let mut train = robust_config(RobustMode::FullyRobust, PenaltyKind::Pathwise, 1.0, 1.0);
            train.utility = PowerUtility::shifted(0.5);
            train.costs = CostSpec::proportional(0.01);
            train.validation = Some(noisy_validation(0.15, 0.02, 11));
            ExperimentConfig {
                name: name.into(),
                market: base_market(drift_setting("AD").expect("listed"), vol_setting("AS").expect("listed")),
                train,
                data: DataSpec { n_val: 40_000, ..default_data() },
                eval: EvalSpec { pool: Some(noisy_pool(0.075, 0.01)), ..default_eval(Benchmark::None) },
            }
        }
        "small-cost-5.5" => small_cost(name, 0.04, 0.015),
        "small-cost-10" => small_cost(name, 0.07, 0.03),
        "student-t-20" | "student-t-3.5" => {
            let dof = if name == "student-t-20" { 20.0 } else { 3.5 };
            let mut cfg = small_cost(name, 0.07, 0.03);
            cfg.data.distribution = NoiseDistribution::StudentT { dof };
            cfg.train.validation = None;
            cfg.data.n_val = 0;
            cfg.eval.pool = None;
            cfg.eval.test_market = TestMarket::StudentT { dof, convention: ReturnConvention::Simple };
            cfg
        }
        _ => {
            let (vol_name, drift_name) = name.split_once('+').ok_or_else(unknown)?;
            let vol = vol_setting(vol_name).filter(|v| v.len() == 4).ok_or_else(unknown)?;
            let drift = drift_setting(drift_name).ok_or_else(unknown)?;
            let mut train = robust_config(RobustMode::FullyRobust, PenaltyKind::Additive, 1.0, 1.0);
            train.generator.architecture = Architecture::Rnn;
            train.discriminator.architecture = Architecture::Rnn;
            ExperimentConfig {
                name: name.into(),
                market: base_market(drift, vol),
                train,
                data: default_data(),
                eval: default_eval(Benchmark::FullyRobust),
            }
        }
    };
    Ok(cfg)
}

/// Worst-case market and strategy of a closed-form benchmark.
pub struct ExplicitSolution {
    pub solution: Option<SaddleSolution>,
    pub market: ReferenceMarket,
    pub policy: Box<dyn Policy>,
}

pub fn solve_explicit(cfg: &ExperimentConfig) -> Result<Option<ExplicitSolution>> {
    let reference = cfg.market.reference()?;
    let m = &cfg.market;
    let t = &cfg.train;
    let saddle = |sol: SaddleSolution| -> Result<ExplicitSolution> {
        let market = reference.with_parameters(sol.drift.clone(), sol.covariance.clone())?;
        let policy: Box<dyn Policy> = Box::new(ConstantWeights::new("explicit", sol.weights.clone()));
        Ok(ExplicitSolution { solution: Some(sol), market, policy })
    };
    Ok(Some(match &cfg.eval.benchmark {
        Benchmark::None => return Ok(None),
        Benchmark::RobustVol1d => {
            if m.dim() != 1 {
                return Err(Error::Config("single-asset benchmark on a multi-asset market".into()));
            }
            saddle(solve_1d_robust_vol(m.drift[0], m.rate, m.vol[0], t.vol_scale)?)?
        }
        Benchmark::RobustVol { penalty } => {
            saddle(solve_multid_robust_vol(&m.drift, m.rate, &reference.covariance, t.vol_scale, *penalty)?)?
        }
        Benchmark::FullyRobust => {
            saddle(solve_fully_robust(&m.drift, m.rate, &reference.covariance, t.vol_scale, t.drift_scale)?)?
        }
        Benchmark::NoTrade { risk_aversion } => {
            if m.dim() != 1 {
                return Err(Error::Config("no-trade benchmark needs one asset".into()));
            }
            let target = closed_form::merton_weight(m.drift[0] - m.rate, m.vol[0], *risk_aversion);
            let band = NoTradeBand::new(target, *risk_aversion, t.costs.proportional);
            ExplicitSolution { solution: None, market: reference, policy: Box::new(NoTradePolicy::new(band)) }
        }
    }))
}

/// Paths of the configured test market driven by the test increments.
pub fn test_paths(cfg: &ExperimentConfig, data: &Datasets) -> Result<PathBatch> {
    let grid = cfg.market.grid()?;
    match &cfg.eval.test_market {
        TestMarket::Reference => {
            let m = cfg.market.reference()?;
            simulate_euler(&grid, &m, &m.initial_price, &data.test, false)
        }
        TestMarket::StudentT { dof, convention } => {
            let market = StudentTMarket {
                dof: *dof,
                drift: cfg.market.drift[0],
                scale: cfg.market.vol[0],
                rate: cfg.market.rate,
                convention: *convention,
            };
            crate::market_sim::simulate_student_t(
                &market,
                &grid,
                cfg.market.initial_price[0],
                cfg.data.n_test,
                cfg.data.seed ^ 0x7E57,
            )
        }
    }
}

pub fn build_pool(cfg: &ExperimentConfig) -> Result<Option<Vec<EvalMarket>>> {
    let Some(spec) = &cfg.eval.pool else {
        return Ok(None);
    };
    let reference = cfg.market.reference()?;
    let pool = match &spec.source {
        PoolSource::Noisy { kind, scales } => {
            make_noisy_pool(&reference, &cfg.market.grid()?, *kind, *scales, spec.n_pool, spec.seed)?
                .into_iter()
                .map(|scenario| EvalMarket::Noisy { scenario, initial_price: reference.initial_price.clone() })
                .collect()
        }
        PoolSource::Garch { model, se_factor, corr_std } => {
            make_noisy_garch_pool(model, *se_factor, *corr_std, spec.n_pool, spec.seed)?
                .into_iter()
                .map(|model| EvalMarket::Garch { model, initial_price: reference.initial_price.clone() })
                .collect()
        }
    };
    Ok(Some(pool))
}

/// Scores each policy: test-market metrics, pooled minimum and, where a
/// benchmark exists, the relative error in its worst-case market.
pub fn evaluate_policies(cfg: &ExperimentConfig, data: &Datasets, policies: &[&dyn Policy]) -> Result<Vec<EvalReport>> {
    let grid = cfg.market.grid()?;
    let settings = cfg.eval_settings();
    let paths = test_paths(cfg, data)?;
    let explicit = solve_explicit(cfg)?;
    let worst_paths = match &explicit {
        Some(e) => Some(simulate_euler(&grid, &e.market, &e.market.initial_price, &data.test, false)?),
        None => None,
    };
    let pool = build_pool(cfg)?;
    let mut reports = Vec::with_capacity(policies.len());
    for policy in policies {
        let pooled: Option<PooledUtility> = match (&pool, &cfg.eval.pool) {
            (Some(p), Some(spec)) => {
                Some(pooled_min_utility(*policy, p, &grid, spec.paths_per_scenario, &settings, spec.seed)?)
            }
            _ => None,
        };
        let err: Option<RelativeError> = match (&explicit, &worst_paths) {
            (Some(e), Some(wp)) => Some(relative_error(e.policy.as_ref(), *policy, wp, &grid, &settings)?),
            _ => None,
        };
        reports.push(EvalReport::build(
            *policy,
            &paths,
            &grid,
            &settings,
            cfg.eval.var_level,
            cfg.eval.histogram_bins,
            pooled,
            err,
        )?);
    }
    Ok(reports)
}

/// Benchmark, frictionless constant weight (for no-trade benchmarks) and cash.
pub fn reference_policies(cfg: &ExperimentConfig) -> Result<Vec<Box<dyn Policy>>> {
    let mut out: Vec<Box<dyn Policy>> = vec![Box::new(CashPolicy)];
    if let Some(e) = solve_explicit(cfg)? {
        if let Benchmark::NoTrade { risk_aversion } = cfg.eval.benchmark {
            let target = closed_form::merton_weight(cfg.market.drift[0] - cfg.market.rate, cfg.market.vol[0], risk_aversion);
            out.push(Box::new(ConstantWeights::new("frictionless", vec![target])));
        }
        out.push(e.policy);
    }
    Ok(out)
}

/// Where a run's artifacts go: `$RUO_OUTPUT_ROOT/<name>-<hash>` (default root `runs`).
pub fn run_dir(cfg: &ExperimentConfig) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(format!("{}-{}", sanitize(&cfg.name), cfg.hash()))
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' }).collect()
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub hash: String,
    pub state: TrainState,
    pub reports: Vec<EvalReport>,
}

impl RunSummary {
    /// Report of the trained policy.
    pub fn learned(&self) -> &EvalReport {
        &self.reports[0]
    }
}

fn metadata(cfg: &ExperimentConfig, epoch: usize) -> serde_json::Value {
    serde_json::json!({ "config_hash": cfg.hash(), "name": cfg.name, "seed": cfg.train.seed, "epoch": epoch })
}

/// Dataset → training → evaluation. Resumes from `dir/state` when a partial
/// run with the same config hash is present.
pub fn run_in(cfg: &ExperimentConfig, dir: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let hash = cfg.hash();
    std::fs::write(dir.join(format!("config-{hash}.toml")), cfg.to_toml()?)?;

    let game = cfg.game()?;
    let data = cfg.data.generate(cfg.market.n_steps, cfg.market.dim())?;
    let state_dir = dir.join(format!("state-{hash}"));
    let state = if state_dir.join("state.json").exists() {
        log::info!("resuming from {}", state_dir.display());
        TrainState::load(&state_dir)?
    } else {
        TrainState::new(&game)?
    };
    let val = cfg.train.validation.as_ref().map(|_| &data.val);
    let state = resume_with(&game, state, &data.train, val, &mut |s| s.save(&state_dir, &metadata(cfg, s.epoch)))?;
    state.save(&state_dir, &metadata(cfg, state.epoch))?;
    state.write_history_csv(dir.join(format!("history-{hash}.csv")))?;

    let learned = game.policy(state.final_generator());
    let refs = reference_policies(cfg)?;
    let mut policies: Vec<&dyn Policy> = vec![&learned];
    policies.extend(refs.iter().map(|p| p.as_ref()));
    let reports = evaluate_policies(cfg, &data, &policies)?;
    write_outputs(dir, &hash, &reports)?;
    Ok(RunSummary { dir: dir.to_path_buf(), hash, state, reports })
}

pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary> {
    run_in(cfg, &run_dir(cfg))
}

pub fn write_outputs(dir: &Path, hash: &str, reports: &[EvalReport]) -> Result<()> {
    write_reports_csv(dir.join(format!("eval-{hash}.csv")), reports)?;
    let json = serde_json::to_string_pretty(reports).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(dir.join(format!("eval-{hash}.json")), json)?;
    for r in reports {
        r.histogram.write_csv(dir.join(format!("histogram-{}-{hash}.csv", sanitize(&r.strategy))))?;
    }
    Ok(())
}

/// Evaluates a saved generator checkpoint against the config's test setup.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let game = cfg.game()?;
    let (params, _) = load_checkpoint(checkpoint)?;
    check_layout(&game, &params)?;
    let data = cfg.data.generate(cfg.market.n_steps, cfg.market.dim())?;
    let learned = game.policy(&params);
    let refs = reference_policies(cfg)?;
    let mut policies: Vec<&dyn Policy> = vec![&learned];
    policies.extend(refs.iter().map(|p| p.as_ref()));
    evaluate_policies(cfg, &data, &policies)
}

fn check_layout(game: &Game, params: &ParamSet) -> Result<()> {
    let expected = crate::neural::ParamSet::new(&game.gen_spec.param_shapes());
    if expected.slices() != params.slices() {
        return Err(Error::Format("checkpoint layout does not match the configured generator".into()));
    }
    Ok(())
}

/// Reference strategies only (no training): cash, frictionless weight and the benchmark.
pub fn compare_reference(cfg: &ExperimentConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let data = cfg.data.generate(cfg.market.n_steps, cfg.market.dim())?;
    let refs = reference_policies(cfg)?;
    let policies: Vec<&dyn Policy> = refs.iter().map(|p| p.as_ref()).collect();
    evaluate_policies(cfg, &data, &policies)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub vol_scale: f64,
    pub drift_scale: f64,
    /// `M_u` of the learned policy, or its test-market utility without a pool.
    pub score: Option<f64>,
    pub error: Option<String>,
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best: Option<usize>,
    /// The best cell lies on the edge of the grid.
    pub boundary_best: bool,
}

/// Trains one model per `(λ₁, λ₂)` cell. Failed cells are recorded and skipped.
pub fn grid_search(cfg: &ExperimentConfig, vol_scales: &[f64], drift_scales: &[f64], root: &Path) -> Result<GridResult> {
    if vol_scales.is_empty() || drift_scales.is_empty() {
        return Err(Error::Config("empty penalty grid".into()));
    }
    let cells: Vec<(f64, f64)> =
        vol_scales.iter().flat_map(|a| drift_scales.iter().map(move |b| (*a, *b))).collect();
    let out: Vec<GridCell> = cells
        .par_iter()
        .map(|&(l1, l2)| {
            let mut cell = cfg.clone();
            cell.train.vol_scale = l1;
            cell.train.drift_scale = l2;
            cell.name = format!("{}-l1_{l1}-l2_{l2}", cfg.name);
            let dir = root.join(format!("{}-{}", sanitize(&cell.name), cell.hash()));
            match run_in(&cell, &dir) {
                Ok(summary) => {
                    let r = summary.learned();
                    let score = r.pooled.as_ref().map_or(r.expected_utility.mean, |p| p.min);
                    GridCell { vol_scale: l1, drift_scale: l2, score: Some(score), error: None, dir }
                }
                Err(e) => {
                    log::warn!("cell ({l1}, {l2}) failed: {e}");
                    GridCell { vol_scale: l1, drift_scale: l2, score: None, error: Some(e.to_string()), dir }
                }
            }
        })
        .collect();
    let best = out
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.score.filter(|s| !s.is_nan()).map(|s| (i, s)))
        .fold(None, |acc: Option<(usize, f64)>, (i, s)| match acc {
            Some((_, b)) if b >= s => acc,
            _ => Some((i, s)),
        })
        .map(|(i, _)| i);
    let boundary_best = best.is_some_and(|i| {
        let (r, c) = (i / drift_scales.len(), i % drift_scales.len());
        let edge = |k: usize, n: usize| n > 1 && (k == 0 || k + 1 == n);
        edge(r, vol_scales.len()) || edge(c, drift_scales.len())
    });
    if boundary_best {
        log::warn!("best penalty scales lie on the grid boundary; consider enlarging the grid");
    }
    let result = GridResult { cells: out, best, boundary_best };
    std::fs::create_dir_all(root)?;
    write_grid_csv(&root.join(format!("grid-{}.csv", cfg.hash())), &result)?;
    Ok(result)
}

fn write_grid_csv(path: &Path, grid: &GridResult) -> Result<()> {
    let fmt = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(fmt)?;
    w.write_record(["vol_scale", "drift_scale", "score", "best", "error"]).map_err(fmt)?;
    for (i, c) in grid.cells.iter().enumerate() {
        w.write_record([
            c.vol_scale.to_string(),
            c.drift_scale.to_string(),
            c.score.map_or(String::new(), |s| s.to_string()),
            (grid.best == Some(i)).to_string(),
            c.error.clone().unwrap_or_default(),
        ])
        .map_err(fmt)?;
    }
    w.flush()?;
    Ok(())
}

/// Small networks and datasets for smoke runs.
pub fn tiny(mut cfg: ExperimentConfig) -> ExperimentConfig {
    cfg.train.epochs = 2;
    cfg.train.batch_size = 32;
    cfg.train.generator = NetShape { hidden: vec![4], ..cfg.train.generator };
    cfg.train.discriminator = NetShape { hidden: vec![4], ..cfg.train.discriminator };
    cfg.market.n_steps = 5;
    cfg.data.n_train = 64;
    cfg.data.n_val = if cfg.train.validation.is_some() { 32 } else { 0 };
    cfg.data.n_test = 64;
    if let Some(p) = cfg.eval.pool.as_mut() {
        p.n_pool = 3;
        p.paths_per_scenario = 32;
    }
    cfg
}
