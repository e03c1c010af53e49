//! Reverse-mode gradients through full roll-outs against central differences.

mod common;

use common::gradcheck::{failures, worst_error, TOLERANCE};
use ruo_core::gan_trainer::{Game, NetShape, Player, RobustMode, TrainConfig};
use ruo_core::market_sim::{NoiseIncrements, ReferenceMarket, TimeGrid};
use ruo_core::neural::Architecture;
use ruo_core::portfolio::CostSpec;
use ruo_core::utility_penalty::PenaltyKind;

fn check(architecture: Architecture) {
    let failed = failures(architecture, 100);
    assert!(failed.is_empty(), "{architecture:?}: {failed:?}");
}

#[test]
fn feed_forward_roll_out_gradients() {
    check(Architecture::Ffnn);
}

#[test]
fn recurrent_roll_out_gradients() {
    check(Architecture::Rnn);
}

#[test]
fn time_grid_roll_out_gradients() {
    check(Architecture::TimeGrid);
}

#[test]
fn recurrent_gradient_through_ten_steps() {
    let market = ReferenceMarket::from_vol(vec![0.05], vec![0.3], 0.015, vec![1.0]).unwrap();
    let config = TrainConfig {
        mode: RobustMode::VolRobust,
        penalty: PenaltyKind::Volatility,
        vol_scale: 2.0,
        costs: CostSpec::proportional(0.01),
        generator: NetShape { architecture: Architecture::Rnn, hidden: vec![4] },
        discriminator: NetShape { architecture: Architecture::Rnn, hidden: vec![4] },
        ..TrainConfig::default()
    };
    let game = Game::new(config, market, TimeGrid::uniform(1.0, 10).unwrap()).unwrap();
    let gen = game.init_generator().unwrap();
    let mut disc = game.init_discriminator().unwrap();
    disc.values.iter_mut().enumerate().for_each(|(i, v)| *v += 0.03 * (i as f64).cos());
    let inc = NoiseIncrements::generate(6, 10, 1, 77).data;
    for player in [Player::Generator, Player::Discriminator] {
        let err = worst_error(&game, &gen, &disc, &inc, player);
        assert!(err < TOLERANCE, "{player:?}: {err}");
    }
}
