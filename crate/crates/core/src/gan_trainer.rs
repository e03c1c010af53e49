//! Adversarial training of a trading network against a market network.
//!
//! The generator outputs portfolio weights, the discriminator outputs drift
//! and volatility for the next Euler step. Both see `(t/T, S_t, X_t)`. The
//! generator minimises `−mean u(X_T) − R` and the discriminator the negative.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, Array3, ArrayView3, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::evaluation::{EvalSettings, Estimate};
use crate::linalg;
use crate::market_sim::{
    make_noisy_pool, path_rng, simulate_euler, NoiseIncrements, NoiseKind, NoiseScales, PathBatch, PerPathScenarios,
    ReferenceMarket, TimeGrid, PRICE_FLOOR,
};
use crate::neural::{
    load_checkpoint, lr_schedule, save_checkpoint, Adam, Architecture, NetSpec, OutputInit, ParamSet, Tape, Var,
};
use crate::portfolio::{CostSpec, Observation, Policy, TRADE_TOLERANCE};
use crate::utility_penalty::{PenaltyKind, PenaltyValue, PowerUtility, UtilityForm};
use crate::{Error, Result};

const DISC_SEED_OFFSET: u64 = 0x5DEE_CE66_D1CE_5EED;
const SHUFFLE_STREAM: u64 = 1 << 40;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustMode {
    /// Market fixed at the reference; only the generator trains.
    NonRobust,
    /// Drift fixed at the reference, volatility adversarial.
    VolRobust,
    FullyRobust,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Player {
    Generator,
    Discriminator,
}

/// Generator and discriminator steps per cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alternation {
    pub gen_steps: usize,
    pub disc_steps: usize,
}

impl Default for Alternation {
    fn default() -> Self {
        Self { gen_steps: 1, disc_steps: 1 }
    }
}

impl Alternation {
    pub fn player(&self, iteration: u64, mode: RobustMode) -> Player {
        if mode == RobustMode::NonRobust {
            return Player::Generator;
        }
        let cycle = (self.gen_steps + self.disc_steps) as u64;
        if iteration % cycle < self.gen_steps as u64 {
            Player::Generator
        } else {
            Player::Discriminator
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetShape {
    pub architecture: Architecture,
    pub hidden: Vec<usize>,
}

impl Default for NetShape {
    fn default() -> Self {
        Self { architecture: Architecture::Ffnn, hidden: vec![64] }
    }
}

/// Market used for the early-stopping metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMarket {
    /// One noisy scenario per validation path, drawn around the reference.
    Noisy { kind: NoiseKind, scales: NoiseScales, seed: u64 },
    Fixed(ReferenceMarket),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationSpec {
    pub market: ValidationMarket,
    /// Stop after this many epochs without improvement.
    #[serde(default)]
    pub patience: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_every: usize,
    pub mode: RobustMode,
    pub penalty: PenaltyKind,
    /// Weight of the volatility penalty.
    pub vol_scale: f64,
    /// Weight of the drift penalty.
    pub drift_scale: f64,
    pub utility: PowerUtility,
    pub costs: CostSpec,
    pub initial_wealth: f64,
    /// Terminal wealth is clamped here before the utility during training.
    pub wealth_floor: f64,
    pub alternation: Alternation,
    pub generator: NetShape,
    pub discriminator: NetShape,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub validation: Option<ValidationSpec>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 1000,
            base_lr: 5e-4,
            lr_decay: 0.2,
            lr_every: 100,
            mode: RobustMode::FullyRobust,
            penalty: PenaltyKind::Additive,
            vol_scale: 1.0,
            drift_scale: 1.0,
            utility: PowerUtility::log(),
            costs: CostSpec::NONE,
            initial_wealth: 1.0,
            wealth_floor: 1e-4,
            alternation: Alternation::default(),
            generator: NetShape::default(),
            discriminator: NetShape::default(),
            max_grad_norm: None,
            validation: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.batch_size == 0 {
            return bad("batch size must be ≥ 1".into());
        }
        if !(self.base_lr > 0.0) || !(self.lr_decay > 0.0) {
            return bad(format!("learning rate {} and decay {} must be > 0", self.base_lr, self.lr_decay));
        }
        if !(self.vol_scale >= 0.0 && self.drift_scale >= 0.0) || !self.vol_scale.is_finite() || !self.drift_scale.is_finite() {
            return bad("penalty scales must be finite and ≥ 0; use the robustness mode for infinite scales".into());
        }
        if !(self.initial_wealth > 0.0) || !(self.wealth_floor > 0.0) {
            return bad("initial wealth and wealth floor must be > 0".into());
        }
        if self.alternation.gen_steps == 0 || (self.mode != RobustMode::NonRobust && self.alternation.disc_steps == 0) {
            return bad(format!("alternation {:?} starves a player", self.alternation));
        }
        self.costs.validate()
    }
}

/// Everything fixed during one training run.
pub struct Game {
    pub config: TrainConfig,
    pub market: ReferenceMarket,
    pub grid: TimeGrid,
    pub gen_spec: NetSpec,
    pub disc_spec: NetSpec,
    /// `K` with `vec(ΣΣ̃⁻¹) = vec(Σ) K`, for the multiplicative penalty.
    precision_map: Option<Array2<f64>>,
}

impl Game {
    pub fn new(config: TrainConfig, market: ReferenceMarket, grid: TimeGrid) -> Result<Self> {
        config.validate()?;
        let d = market.dim();
        let n = grid.n_steps();
        let input_dim = d + 2;
        let gen_spec = NetSpec {
            architecture: config.generator.architecture,
            input_dim,
            hidden: config.generator.hidden.clone(),
            output_dim: d,
            n_steps: n,
            output_init: OutputInit::Uniform,
        };
        let mut head = market.drift.clone();
        head.extend_from_slice(&market.vol);
        let disc_spec = NetSpec {
            architecture: config.discriminator.architecture,
            input_dim,
            hidden: config.discriminator.hidden.clone(),
            output_dim: d + d * d,
            n_steps: n,
            output_init: OutputInit::Constant(head),
        };
        gen_spec.validate()?;
        disc_spec.validate()?;
        let precision_map = match config.penalty {
            PenaltyKind::Multiplicative => {
                let p = linalg::inverse(&market.covariance, d)
                    .map_err(|_| Error::Singular("multiplicative penalty needs an invertible reference covariance".into()))?;
                let mut k = Array2::zeros((d * d, d * d));
                for i in 0..d {
                    for a in 0..d {
                        for j in 0..d {
                            k[[i * d + a, i * d + j]] = p[a * d + j];
                        }
                    }
                }
                Some(k)
            }
            _ => None,
        };
        Ok(Self { config, market, grid, gen_spec, disc_spec, precision_map })
    }

    pub fn dim(&self) -> usize {
        self.market.dim()
    }

    pub fn init_generator(&self) -> Result<ParamSet> {
        self.gen_spec.init(self.config.seed)
    }

    pub fn init_discriminator(&self) -> Result<ParamSet> {
        self.disc_spec.init(self.config.seed ^ DISC_SEED_OFFSET)
    }

    /// Records one joint roll-out of policy and market on `tape`.
    ///
    /// `increments` are `(paths, steps, d)` standard normals.
    pub fn episode<'t>(
        &self,
        tape: &'t Tape,
        gen: &[Var<'t>],
        disc: &[Var<'t>],
        increments: ArrayView3<'_, f64>,
    ) -> EpisodeVars<'t> {
        let cfg = &self.config;
        let d = self.dim();
        let (b, n_steps, _) = increments.dim();
        let horizon = self.grid.horizon();
        let rate = self.market.rate;

        let ref_drift = row(&self.market.drift);
        let ref_vol = row(&self.market.vol);
        let const_drift = tape.constant(ref_drift.clone());
        let const_vol = tape.constant(broadcast_rows(&ref_vol, b));
        let s0 = broadcast_rows(&row(&self.market.initial_price), b);

        let mut s = tape.constant(s0.clone());
        let mut x = tape.constant(Array2::from_elem((b, 1), cfg.initial_wealth));
        let mut h_prev = tape.constant(Array2::zeros((b, d)));
        let (mut gen_hidden, mut disc_hidden) = (None, None);
        let mut vol_acc: Option<Var<'t>> = None;
        let mut drift_acc: Option<Var<'t>> = None;
        let mut qcv: Option<Var<'t>> = None;
        let mut weights = Vec::with_capacity(n_steps);
        let mut drifts = Vec::with_capacity(n_steps);
        let mut vols = Vec::with_capacity(n_steps);
        let mut wealth = vec![x];
        let mut prices = vec![s];

        for n in 0..n_steps {
            let dt = self.grid.dt(n);
            let time = tape.constant(Array2::from_elem((b, 1), self.grid.times()[n] / horizon));
            let input = Var::concat_cols(&[time, s, x]);
            let (pi, gh) = self.gen_spec.forward(gen, n, input, gen_hidden);
            gen_hidden = gh;
            let (drift, vol) = match cfg.mode {
                RobustMode::NonRobust => (const_drift, const_vol),
                mode => {
                    let (out, dh) = self.disc_spec.forward(disc, n, input, disc_hidden);
                    disc_hidden = dh;
                    let vol = out.cols(d, d * d);
                    let drift = if mode == RobustMode::VolRobust { const_drift } else { out.cols(0, d) };
                    (drift, vol)
                }
            };

            let shocks = tape.constant(increments.slice(s![.., n, ..]).mapv(|z| z * dt.sqrt()));
            let s_next = (s + s * drift * dt + s * vol.batch_matvec(shocks)).clamp_min(PRICE_FLOOR);

            // rebalance at t_n, carry to t_{n+1}
            let held = x * pi / s;
            let mut x_next = x + (held * (s_next - s)).sum_cols() + (pi.sum_cols().scale(-1.0).offset(1.0) * x).scale(rate * dt);
            if cfg.costs.proportional > 0.0 || cfg.costs.base > 0.0 {
                let traded = (held - h_prev).abs();
                let mut fee = (traded * s).sum_cols().scale(cfg.costs.proportional);
                if cfg.costs.base > 0.0 {
                    let count = traded.with_value(|a| {
                        a.map_axis(Axis(1), |r| r.iter().filter(|v| **v > TRADE_TOLERANCE).count() as f64 * cfg.costs.base)
                            .insert_axis(Axis(1))
                    });
                    fee = fee + tape.constant(count);
                }
                x_next = x_next - fee.scale(1.0 + rate * dt);
            }

            if cfg.mode != RobustMode::NonRobust {
                match cfg.penalty {
                    PenaltyKind::Pathwise => {
                        let inc = (s_next / s).ln();
                        let outer = inc.batch_outer(inc);
                        qcv = Some(qcv.map_or(outer, |q| q + outer));
                    }
                    kind => {
                        let ref_vol_c = tape.constant(ref_vol.clone());
                        let dev = match kind {
                            PenaltyKind::Volatility => (vol - ref_vol_c).square(),
                            PenaltyKind::Additive => {
                                (vol.batch_gram() - tape.constant(row(&self.market.covariance))).square()
                            }
                            _ => {
                                let k = tape.constant(self.precision_map.clone().expect("precision map"));
                                (vol.batch_gram().matmul(k) - tape.constant(row(&linalg::identity(d)))).square()
                            }
                        };
                        let step = dev.sum_cols().scale(dt);
                        vol_acc = Some(vol_acc.map_or(step, |a| a + step));
                        if cfg.mode == RobustMode::FullyRobust {
                            let step = (drift - const_drift).square().sum_cols().scale(dt);
                            drift_acc = Some(drift_acc.map_or(step, |a| a + step));
                        }
                    }
                }
            }

            weights.push(pi);
            drifts.push(drift);
            vols.push(vol);
            h_prev = held;
            s = s_next;
            x = x_next;
            wealth.push(x);
            prices.push(s);
        }

        let zero = tape.scalar(0.0);
        let (vol_term, drift_term) = match (cfg.mode, cfg.penalty) {
            (RobustMode::NonRobust, _) => (zero, zero),
            (_, PenaltyKind::Pathwise) => {
                let target = tape.constant(row(&self.market.covariance).mapv(|c| c * horizon));
                let qcv = qcv.unwrap_or(zero);
                let vol_term = (qcv - target).square().sum_cols().mean();
                let growth = tape.constant(row(&self.market.drift).mapv(|m| (m * horizon).exp()));
                let drift_term = ((s / tape.constant(s0)).mean_rows() - growth).square().sum();
                (vol_term, drift_term)
            }
            _ => (vol_acc.map_or(zero, |v| v.mean()), drift_acc.map_or(zero, |v| v.mean())),
        };
        let penalty = vol_term.scale(cfg.vol_scale) + drift_term.scale(cfg.drift_scale);
        let utility = utility_on_tape(&cfg.utility, x.clamp_min(cfg.wealth_floor)).mean();
        let gen_loss = -utility - penalty;
        EpisodeVars { gen_loss, utility, vol_term, drift_term, terminal_wealth: x, weights, drifts, vols, wealth, prices }
    }

    /// Loss and flat gradient for `player`; the other player's parameters are constants.
    pub fn loss_and_gradient(
        &self,
        gen: &ParamSet,
        disc: &ParamSet,
        increments: ArrayView3<'_, f64>,
        player: Player,
    ) -> (f64, Vec<f64>) {
        let tape = Tape::new();
        let g = gen.leaves(&tape, player == Player::Generator);
        let dl = disc.leaves(&tape, player == Player::Discriminator);
        let ep = self.episode(&tape, &g, &dl, increments);
        let gen_loss = ep.gen_loss.scalar_value();
        match player {
            Player::Generator => {
                let grads = tape.backward(ep.gen_loss);
                (gen_loss, gen.flat_gradient(&grads, &g))
            }
            Player::Discriminator => {
                let disc_loss = -ep.gen_loss;
                let grads = tape.backward(disc_loss);
                (-gen_loss, disc.flat_gradient(&grads, &dl))
            }
        }
    }

    /// Values of one roll-out without gradients.
    pub fn trace(&self, gen: &ParamSet, disc: &ParamSet, increments: ArrayView3<'_, f64>) -> EpisodeTrace {
        let tape = Tape::new();
        let g = gen.leaves(&tape, false);
        let dl = disc.leaves(&tape, false);
        let ep = self.episode(&tape, &g, &dl, increments);
        let (b, n, d) = increments.dim();
        let mut prices = Array3::zeros((b, n + 1, d));
        let mut wealth = Array2::zeros((b, n + 1));
        for (k, (sv, xv)) in ep.prices.iter().zip(&ep.wealth).enumerate() {
            prices.slice_mut(s![.., k, ..]).assign(&sv.value());
            wealth.slice_mut(s![.., k]).assign(&xv.value().column(0));
        }
        let mut weights = Array3::zeros((b, n, d));
        let mut drift = Array3::zeros((b, n, d));
        let mut vol = Array3::zeros((b, n, d * d));
        for k in 0..n {
            weights.slice_mut(s![.., k, ..]).assign(&ep.weights[k].value());
            drift.slice_mut(s![.., k, ..]).assign(&ep.drifts[k].value().broadcast((b, d)).expect("drift rows"));
            vol.slice_mut(s![.., k, ..]).assign(&ep.vols[k].value());
        }
        let floored = (0..b).map(|p| prices.slice(s![p, .., ..]).iter().any(|v| *v <= PRICE_FLOOR)).collect();
        EpisodeTrace {
            paths: PathBatch { prices, drift: Some(drift), vol: Some(vol), floored },
            wealth,
            weights,
            gen_loss: ep.gen_loss.scalar_value(),
            mean_utility: ep.utility.scalar_value(),
            penalty: PenaltyValue {
                vol_term: self.config.vol_scale * ep.vol_term.scalar_value(),
                drift_term: self.config.drift_scale * ep.drift_term.scalar_value(),
            },
        }
    }

    pub fn policy(&self, params: &ParamSet) -> NeuralPolicy {
        NeuralPolicy::new(self.gen_spec.clone(), params.clone(), "gan")
    }

    pub fn eval_settings(&self) -> EvalSettings {
        EvalSettings {
            utility: self.config.utility,
            costs: self.config.costs,
            initial_wealth: self.config.initial_wealth,
            rate: self.market.rate,
        }
    }

    /// Simulates the validation paths once; they do not depend on the policy.
    pub fn validation_paths(&self, increments: &NoiseIncrements) -> Result<Option<PathBatch>> {
        let Some(spec) = &self.config.validation else {
            return Ok(None);
        };
        let paths = match &spec.market {
            ValidationMarket::Fixed(m) => simulate_euler(&self.grid, m, &m.initial_price, increments, false)?,
            ValidationMarket::Noisy { kind, scales, seed } => {
                let pool = make_noisy_pool(&self.market, &self.grid, *kind, *scales, increments.n_paths(), *seed)?;
                simulate_euler(&self.grid, &PerPathScenarios(&pool), &self.market.initial_price, increments, false)?
            }
        };
        Ok(Some(paths))
    }
}

/// Recorded quantities of one episode.
pub struct EpisodeVars<'t> {
    pub gen_loss: Var<'t>,
    /// `mean u(max(X_T, floor))`
    pub utility: Var<'t>,
    /// Unscaled volatility penalty.
    pub vol_term: Var<'t>,
    /// Unscaled drift penalty.
    pub drift_term: Var<'t>,
    pub terminal_wealth: Var<'t>,
    pub weights: Vec<Var<'t>>,
    pub drifts: Vec<Var<'t>>,
    pub vols: Vec<Var<'t>>,
    pub wealth: Vec<Var<'t>>,
    pub prices: Vec<Var<'t>>,
}

/// Plain values of one episode.
#[derive(Debug, Clone)]
pub struct EpisodeTrace {
    /// Prices with the market coefficients used at every step.
    pub paths: PathBatch,
    pub wealth: Array2<f64>,
    pub weights: Array3<f64>,
    pub gen_loss: f64,
    pub mean_utility: f64,
    /// Scaled penalty terms.
    pub penalty: PenaltyValue,
}

fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

fn broadcast_rows(r: &Array2<f64>, b: usize) -> Array2<f64> {
    r.broadcast((b, r.ncols())).expect("row broadcast").to_owned()
}

fn utility_on_tape<'t>(u: &PowerUtility, x: Var<'t>) -> Var<'t> {
    if u.is_log() {
        return x.ln();
    }
    let q = 1.0 - u.power;
    match u.form {
        UtilityForm::Shifted => x.powf(q).offset(-1.0).scale(1.0 / q),
        UtilityForm::Unshifted => x.powf(q).scale(1.0 / q),
    }
}

/// A trained generator used as a trading policy.
#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    spec: Arc<NetSpec>,
    params: Arc<ParamSet>,
    label: String,
    hidden: Option<Array2<f64>>,
}

impl NeuralPolicy {
    pub fn new(spec: NetSpec, params: ParamSet, label: &str) -> Self {
        Self { spec: Arc::new(spec), params: Arc::new(params), label: label.into(), hidden: None }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }
}

impl Policy for NeuralPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn reset(&mut self, _n_paths: usize) {
        self.hidden = None;
    }

    fn act(&mut self, obs: &Observation<'_>, weights: &mut Array2<f64>) {
        let (b, d) = obs.prices.dim();
        let mut input = Array2::zeros((b, d + 2));
        input.column_mut(0).fill(obs.time_frac);
        input.slice_mut(s![.., 1..d + 1]).assign(&obs.prices);
        input.column_mut(d + 1).iter_mut().zip(obs.wealth).for_each(|(a, w)| *a = *w);
        let (out, hidden) = self.spec.forward_plain(&self.params, obs.step, &input, self.hidden.as_ref());
        self.hidden = hidden;
        weights.assign(&out);
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}

/// `(1/B) Σ_j u(X_T^j)` with one path per validation scenario; `−∞` on any default.
pub fn early_stopping_metric(policy: &dyn Policy, paths: &PathBatch, grid: &TimeGrid, settings: &EvalSettings) -> Result<Estimate> {
    let ledger = settings.run(policy, paths, grid)?;
    Ok(settings.score(&ledger))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub gen_loss: f64,
    pub disc_loss: f64,
    pub val_metric: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub epoch: usize,
    pub metric: f64,
    pub generator: ParamSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: ParamSet,
    pub discriminator: ParamSet,
    /// Completed epochs.
    pub epoch: usize,
    pub iteration: u64,
    pub best: Option<Snapshot>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

impl TrainState {
    pub fn new(game: &Game) -> Result<Self> {
        Ok(Self {
            generator: game.init_generator()?,
            discriminator: game.init_discriminator()?,
            epoch: 0,
            iteration: 0,
            best: None,
            history: vec![],
            stopped_early: false,
        })
    }

    /// Best validated generator, or the latest one without validation.
    pub fn final_generator(&self) -> &ParamSet {
        self.best.as_ref().map_or(&self.generator, |b| &b.generator)
    }

    pub fn write_history_csv<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "gen_loss", "disc_loss", "val_metric", "lr"]).map_err(csv_err)?;
        for r in &self.history {
            w.write_record([
                r.epoch.to_string(),
                r.gen_loss.to_string(),
                r.disc_loss.to_string(),
                r.val_metric.map_or(String::new(), |v| v.to_string()),
                r.lr.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    iteration: u64,
    best_epoch: Option<usize>,
    best_metric: Option<f64>,
    history: Vec<EpochRecord>,
    stopped_early: bool,
}

impl TrainState {
    /// Writes `generator.ckpt`, `discriminator.ckpt`, `best.ckpt` and `state.json` into `dir`.
    pub fn save(&self, dir: &Path, metadata: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(dir.join("generator.ckpt"), &self.generator, metadata)?;
        save_checkpoint(dir.join("discriminator.ckpt"), &self.discriminator, metadata)?;
        if let Some(b) = &self.best {
            save_checkpoint(dir.join("best.ckpt"), &b.generator, metadata)?;
        }
        let meta = StateMeta {
            epoch: self.epoch,
            iteration: self.iteration,
            best_epoch: self.best.as_ref().map(|b| b.epoch),
            best_metric: self.best.as_ref().map(|b| b.metric),
            history: self.history.clone(),
            stopped_early: self.stopped_early,
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(dir.join("state.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("state.json"))?;
        let meta: StateMeta = serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let (generator, _) = load_checkpoint(dir.join("generator.ckpt"))?;
        let (discriminator, _) = load_checkpoint(dir.join("discriminator.ckpt"))?;
        let best = match (meta.best_epoch, meta.best_metric) {
            (Some(epoch), Some(metric)) => {
                Some(Snapshot { epoch, metric, generator: load_checkpoint(dir.join("best.ckpt"))?.0 })
            }
            _ => None,
        };
        Ok(Self {
            generator,
            discriminator,
            epoch: meta.epoch,
            iteration: meta.iteration,
            best,
            history: meta.history,
            stopped_early: meta.stopped_early,
        })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Trains from scratch.
pub fn train(game: &Game, data: &NoiseIncrements, validation: Option<&NoiseIncrements>) -> Result<TrainState> {
    let state = TrainState::new(game)?;
    resume(game, state, data, validation)
}

/// Continues `state` until `config.epochs` epochs are complete.
pub fn resume(
    game: &Game,
    state: TrainState,
    data: &NoiseIncrements,
    validation: Option<&NoiseIncrements>,
) -> Result<TrainState> {
    resume_with(game, state, data, validation, &mut |_| Ok(()))
}

/// As [`resume`], calling `on_epoch` after every completed epoch.
pub fn resume_with(
    game: &Game,
    mut state: TrainState,
    data: &NoiseIncrements,
    validation: Option<&NoiseIncrements>,
    on_epoch: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    let cfg = &game.config;
    if data.dim() != game.dim() || data.n_steps() != game.grid.n_steps() {
        return Err(Error::Dimension(format!(
            "training data is {:?}, game needs (_, {}, {})",
            data.data.dim(),
            game.grid.n_steps(),
            game.dim()
        )));
    }
    if data.n_paths() == 0 {
        return Err(Error::InvalidParameter("empty training set".into()));
    }
    let val_paths = match (&cfg.validation, validation) {
        (Some(_), Some(inc)) => game.validation_paths(inc)?,
        (Some(_), None) => return Err(Error::InvalidParameter("validation configured but no validation data".into())),
        (None, _) => None,
    };
    let settings = game.eval_settings();
    let adam = Adam { max_grad_norm: cfg.max_grad_norm, ..Adam::default() };
    let n_train = data.n_paths();
    let batch = cfg.batch_size.min(n_train);
    let batches = n_train / batch;
    let mut since_best = state.best.as_ref().map_or(0, |b| state.epoch.saturating_sub(b.epoch + 1));

    while state.epoch < cfg.epochs && !state.stopped_early {
        let epoch = state.epoch;
        let lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_decay, cfg.lr_every);
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut path_rng(cfg.seed, SHUFFLE_STREAM + epoch as u64));
        let mut loss_sum = 0.0;
        for k in 0..batches {
            let idx = &order[k * batch..(k + 1) * batch];
            let inc = data.data.select(Axis(0), idx);
            let player = cfg.alternation.player(state.iteration, cfg.mode);
            let (loss, grad) = game.loss_and_gradient(&state.generator, &state.discriminator, inc.view(), player);
            let gen_loss = if player == Player::Generator { loss } else { -loss };
            if !gen_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    iteration: state.iteration as usize,
                    reason: format!("{player:?} loss {loss}"),
                });
            }
            let target = match player {
                Player::Generator => &mut state.generator,
                Player::Discriminator => &mut state.discriminator,
            };
            adam.step(target, &grad, lr)?;
            loss_sum += gen_loss;
            state.iteration += 1;
        }
        let gen_loss = loss_sum / batches as f64;

        let val_metric = match &val_paths {
            Some(paths) => {
                let policy = game.policy(&state.generator);
                Some(early_stopping_metric(&policy, paths, &game.grid, &settings)?.mean)
            }
            None => None,
        };
        if let Some(m) = val_metric {
            if state.best.as_ref().is_none_or(|b| m > b.metric) {
                state.best = Some(Snapshot { epoch, metric: m, generator: state.generator.clone() });
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        log::info!("epoch {epoch}: gen loss {gen_loss:.6}, val {val_metric:?}, lr {lr:e}");
        state.history.push(EpochRecord { epoch, gen_loss, disc_loss: -gen_loss, val_metric, lr });
        state.epoch += 1;
        if let Some(p) = cfg.validation.as_ref().and_then(|v| v.patience) {
            if since_best >= p {
                log::info!("no validation improvement for {p} epochs, stopping");
                state.stopped_early = true;
            }
        }
        on_epoch(&state)?;
    }
    Ok(state)
}
