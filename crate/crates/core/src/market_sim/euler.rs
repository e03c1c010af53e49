use ndarray::{Array3, Axis, Zip};
use rayon::prelude::*;

use super::{MarketDynamics, NoiseIncrements, PathBatch, TimeGrid};
use crate::{Error, Result};

/// Prices are clamped here when a coarse Euler step would cross zero.
pub const PRICE_FLOOR: f64 = 1e-8;

/// Euler–Maruyama simulation of the multiplicative dynamics
/// `S_{n+1} = S_n + (S_n ⊙ μ_n) Δt_{n+1} + (S_n ⊙ σ_n) ΔW_{n+1}`.
///
/// `increments` holds standard normals and is scaled by `√Δt` here. With
/// `record` set, the per-step coefficients are stored in the batch.
pub fn simulate_euler(
    grid: &TimeGrid,
    dynamics: &dyn MarketDynamics,
    initial_price: &[f64],
    increments: &NoiseIncrements,
    record: bool,
) -> Result<PathBatch> {
    let d = dynamics.dim();
    let n_steps = grid.n_steps();
    if initial_price.len() != d || increments.dim() != d {
        return Err(Error::Dimension(format!(
            "market has {d} assets, initial price {} and increments {}",
            initial_price.len(),
            increments.dim()
        )));
    }
    if increments.n_steps() != n_steps {
        return Err(Error::Dimension(format!(
            "grid has {n_steps} steps, increments {}",
            increments.n_steps()
        )));
    }
    let n_paths = increments.n_paths();
    let sqrt_dt: Vec<f64> = grid.steps().iter().map(|dt| dt.sqrt()).collect();

    let mut prices = Array3::zeros((n_paths, n_steps + 1, d));
    let mut drift_rec = Array3::zeros((if record { n_paths } else { 0 }, n_steps, d));
    let mut vol_rec = Array3::zeros((if record { n_paths } else { 0 }, n_steps, d * d));
    let mut floored = vec![false; n_paths];

    let simulate_path = |p: usize,
                         mut path: ndarray::ArrayViewMut2<f64>,
                         mut drift_out: Option<ndarray::ArrayViewMut2<f64>>,
                         mut vol_out: Option<ndarray::ArrayViewMut2<f64>>|
     -> Result<bool> {
        let mut drift = vec![0.0; d];
        let mut vol = vec![0.0; d * d];
        let mut hit_floor = false;
        for i in 0..d {
            path[[0, i]] = initial_price[i];
        }
        for n in 0..n_steps {
            dynamics.coefficients(p, n, &mut drift, &mut vol);
            if let Some(bad) = drift.iter().chain(vol.iter()).find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("market coefficient {bad} on path {p}, step {n}")));
            }
            let dt = grid.dt(n);
            for i in 0..d {
                let s = path[[n, i]];
                let mut shock = 0.0;
                for k in 0..d {
                    shock += vol[i * d + k] * increments.data[[p, n, k]] * sqrt_dt[n];
                }
                let mut next = s + s * drift[i] * dt + s * shock;
                if next <= 0.0 {
                    next = PRICE_FLOOR;
                    hit_floor = true;
                }
                path[[n + 1, i]] = next;
            }
            if let Some(out) = drift_out.as_mut() {
                out.row_mut(n).as_slice_mut().expect("contiguous").copy_from_slice(&drift);
            }
            if let Some(out) = vol_out.as_mut() {
                out.row_mut(n).as_slice_mut().expect("contiguous").copy_from_slice(&vol);
            }
        }
        Ok(hit_floor)
    };

    let results: Vec<Result<bool>> = if record {
        Zip::indexed(prices.axis_iter_mut(Axis(0)))
            .and(drift_rec.axis_iter_mut(Axis(0)))
            .and(vol_rec.axis_iter_mut(Axis(0)))
            .into_par_iter()
            .map(|(p, path, dr, vo)| simulate_path(p, path, Some(dr), Some(vo)))
            .collect()
    } else {
        prices
            .axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .map(|(p, path)| simulate_path(p, path, None, None))
            .collect()
    };
    for (p, r) in results.into_iter().enumerate() {
        floored[p] = r?;
    }

    Ok(PathBatch {
        prices,
        drift: record.then_some(drift_rec),
        vol: record.then_some(vol_rec),
        floored,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_sim::ReferenceMarket;

    fn market(mu: f64, sigma: f64) -> ReferenceMarket {
        ReferenceMarket::from_vol(vec![mu], vec![sigma], 0.015, vec![1.0]).unwrap()
    }

    #[test]
    fn zero_vol_compounds_deterministically() {
        let grid = TimeGrid::uniform(1.0, 65).unwrap();
        let inc = NoiseIncrements::generate(4, 65, 1, 3);
        let paths = simulate_euler(&grid, &market(0.035, 0.0), &[2.0], &inc, false).unwrap();
        let expected = 2.0 * (1.0 + 0.035 / 65.0_f64).powi(65);
        for p in 0..4 {
            assert!((paths.prices[[p, 65, 0]] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_noise_zero_drift_is_flat() {
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let inc = NoiseIncrements { seed: 0, data: Array3::zeros((3, 10, 1)) };
        let paths = simulate_euler(&grid, &market(0.0, 0.3), &[1.5], &inc, false).unwrap();
        assert!(paths.prices.iter().all(|s| *s == 1.5));
    }

    #[test]
    fn terminal_mean_matches_euler_compounding() {
        let grid = TimeGrid::uniform(1.0, 65).unwrap();
        let inc = NoiseIncrements::generate(100_000, 65, 1, 42);
        let paths = simulate_euler(&grid, &market(0.035, 0.25), &[1.0], &inc, false).unwrap();
        let st: Vec<f64> = (0..100_000).map(|p| paths.prices[[p, 65, 0]]).collect();
        let n = st.len() as f64;
        let mean = st.iter().sum::<f64>() / n;
        let var = st.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        let exact = (1.0 + 0.035 / 65.0_f64).powi(65);
        assert!((mean - exact).abs() < 3.0 * se, "mean {mean} exact {exact} se {se}");
    }

    #[test]
    fn hadamard_scales_vol_rows_by_price() {
        // two assets, second driven only by the first Brownian motion
        let m = ReferenceMarket::from_vol(vec![0.0, 0.0], vec![0.0, 0.0, 0.5, 0.0], 0.0, vec![1.0, 4.0]).unwrap();
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let mut data = Array3::zeros((1, 1, 2));
        data[[0, 0, 0]] = 1.0;
        let inc = NoiseIncrements { seed: 0, data };
        let paths = simulate_euler(&grid, &m, &[1.0, 4.0], &inc, true).unwrap();
        assert_eq!(paths.prices[[0, 1, 0]], 1.0);
        assert!((paths.prices[[0, 1, 1]] - (4.0 + 4.0 * 0.5)).abs() < 1e-15);
        assert_eq!(paths.vol.as_ref().unwrap()[[0, 0, 2]], 0.5);
    }

    #[test]
    fn floor_clamps_and_flags() {
        let grid = TimeGrid::uniform(1.0, 1).unwrap();
        let mut data = Array3::zeros((2, 1, 1));
        data[[0, 0, 0]] = -10.0;
        let inc = NoiseIncrements { seed: 0, data };
        let paths = simulate_euler(&grid, &market(0.0, 0.5), &[1.0], &inc, false).unwrap();
        assert_eq!(paths.prices[[0, 1, 0]], PRICE_FLOOR);
        assert_eq!(paths.floored, vec![true, false]);
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let inc = NoiseIncrements::generate(2, 4, 1, 0);
        assert!(simulate_euler(&grid, &market(0.0, 0.1), &[1.0], &inc, false).is_err());
        let inc = NoiseIncrements::generate(2, 5, 2, 0);
        assert!(simulate_euler(&grid, &market(0.0, 0.1), &[1.0], &inc, false).is_err());
    }

    struct Broken;
    impl MarketDynamics for Broken {
        fn dim(&self) -> usize {
            1
        }
        fn coefficients(&self, _: usize, step: usize, drift: &mut [f64], vol: &mut [f64]) {
            drift[0] = if step == 2 { f64::NAN } else { 0.0 };
            vol[0] = 0.1;
        }
    }

    #[test]
    fn non_finite_coefficients_error() {
        let grid = TimeGrid::uniform(1.0, 5).unwrap();
        let inc = NoiseIncrements::generate(2, 5, 1, 0);
        assert!(matches!(
            simulate_euler(&grid, &Broken, &[1.0], &inc, false),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn bit_identical_across_runs() {
        let grid = TimeGrid::uniform(1.0, 65).unwrap();
        let inc = NoiseIncrements::generate(50, 65, 1, 9);
        let a = simulate_euler(&grid, &market(0.035, 0.25), &[1.0], &inc, false).unwrap();
        let b = simulate_euler(&grid, &market(0.035, 0.25), &[1.0], &inc, false).unwrap();
        assert_eq!(a.prices, b.prices);
    }
}
