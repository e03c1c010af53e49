//! Central-difference oracle for roll-out gradients.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ruo_core::gan_trainer::{Game, NetShape, Player, RobustMode, TrainConfig};
use ruo_core::market_sim::{NoiseIncrements, ReferenceMarket, TimeGrid};
use ruo_core::neural::{Architecture, ParamSet};
use ruo_core::portfolio::CostSpec;
use ruo_core::utility_penalty::{PenaltyKind, PowerUtility};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn loss(game: &Game, gen: &ParamSet, disc: &ParamSet, inc: &Array3<f64>, player: Player) -> f64 {
    game.loss_and_gradient(gen, disc, inc.view(), player).0
}

/// Worst relative error over all parameters of `player`.
pub fn worst_error(game: &Game, gen: &ParamSet, disc: &ParamSet, inc: &Array3<f64>, player: Player) -> f64 {
    let (_, grad) = game.loss_and_gradient(gen, disc, inc.view(), player);
    let mut worst: f64 = 0.0;
    for i in 0..grad.len() {
        let (mut up, mut down) = (gen.clone(), disc.clone());
        let (mut gu, mut du) = (gen.clone(), disc.clone());
        match player {
            Player::Generator => {
                gu.values[i] += STEP;
                up.values[i] -= STEP;
                let fd = (loss(game, &gu, disc, inc, player) - loss(game, &up, disc, inc, player)) / (2.0 * STEP);
                worst = worst.max(relative_error(grad[i], fd));
            }
            Player::Discriminator => {
                du.values[i] += STEP;
                down.values[i] -= STEP;
                let fd = (loss(game, gen, &du, inc, player) - loss(game, gen, &down, inc, player)) / (2.0 * STEP);
                worst = worst.max(relative_error(grad[i], fd));
            }
        }
    }
    worst
}

pub fn instance(seed: u64, architecture: Architecture) -> (Game, ParamSet, ParamSet, Array3<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let penalty = [PenaltyKind::Volatility, PenaltyKind::Additive, PenaltyKind::Multiplicative, PenaltyKind::Pathwise]
        [(seed % 4) as usize];
    let utility = [PowerUtility::log(), PowerUtility::shifted(0.5), PowerUtility::unshifted(2.0)][(seed % 3) as usize];
    let market = ReferenceMarket::from_vol(
        vec![rng.random_range(0.02..0.08)],
        vec![rng.random_range(0.15..0.4)],
        0.015,
        vec![1.0],
    )
    .unwrap();
    let config = TrainConfig {
        mode: RobustMode::FullyRobust,
        penalty,
        vol_scale: rng.random_range(0.1..10.0),
        drift_scale: rng.random_range(0.1..10.0),
        utility,
        costs: CostSpec { proportional: rng.random_range(0.001..0.02), base: 0.0 },
        initial_wealth: rng.random_range(1.0..5.0),
        generator: NetShape { architecture, hidden: vec![6] },
        discriminator: NetShape { architecture, hidden: vec![5] },
        seed,
        ..TrainConfig::default()
    };
    let game = Game::new(config, market, TimeGrid::uniform(1.0, 5).unwrap()).unwrap();
    let gen = game.init_generator().unwrap();
    let mut disc = game.init_discriminator().unwrap();
    // move the market away from its constant head
    for v in disc.values.iter_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let inc = NoiseIncrements::generate(4, 5, 1, seed).data;
    (game, gen, disc, inc)
}

/// Instances `0..n` of `architecture` whose worst error misses the tolerance.
pub fn failures(architecture: Architecture, n: u64) -> Vec<(u64, Player, f64)> {
    let mut out = vec![];
    for seed in 0..n {
        let (game, gen, disc, inc) = instance(seed, architecture);
        for player in [Player::Generator, Player::Discriminator] {
            let err = worst_error(&game, &gen, &disc, &inc, player);
            if !(err < TOLERANCE) {
                out.push((seed, player, err));
            }
        }
    }
    out
}
