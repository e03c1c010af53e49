//! Per-coordinate GARCH(1,1) with Gaussian innovations and a Gaussian copula
//! across coordinates.

use argmin::core::{CostFunction, Executor};
use argmin::solver::neldermead::NelderMead;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::{path_rng, PathBatch, TimeGrid};
use crate::linalg;
use crate::{Error, Result};

const MAX_PERSISTENCE: f64 = 1.0 - 1e-6;
const MIN_OBSERVATIONS: usize = 100;
const MAX_RETRIES: usize = 100;

/// `h_t = ω + α (r_{t−1} − m)² + β h_{t−1}`, `r_t = m + √h_t z_t`, all in per-step units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub omega: f64,
    pub alpha: f64,
    pub beta: f64,
    pub mean: f64,
}

impl GarchParams {
    pub fn unconditional_variance(&self) -> f64 {
        self.omega / (1.0 - self.alpha - self.beta)
    }

    fn as_array(&self) -> [f64; 4] {
        [self.omega, self.alpha, self.beta, self.mean]
    }

    fn from_array(a: [f64; 4]) -> Self {
        Self { omega: a[0], alpha: a[1], beta: a[2], mean: a[3] }
    }

    /// Name of the first violated constraint, if any.
    fn violation(&self) -> Option<&'static str> {
        if !(self.omega > 0.0) {
            Some("omega")
        } else if !(self.alpha >= 0.0) {
            Some("alpha")
        } else if !(self.beta >= 0.0) {
            Some("beta")
        } else if !(self.alpha + self.beta < 1.0) {
            Some("alpha+beta")
        } else if !self.mean.is_finite() {
            Some("mean")
        } else {
            None
        }
    }
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchModel {
    pub params: Vec<GarchParams>,
    /// Standard errors, same layout as `params`.
    pub std_errors: Vec<GarchParams>,
    /// Row-major correlation of the standardized residuals.
    pub correlation: Vec<f64>,
}

impl GarchModel {
    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || self.std_errors.len() != d || self.correlation.len() != d * d {
            return Err(Error::Dimension(format!(
                "GARCH model with {d} coordinates, {} standard errors, correlation of length {}",
                self.std_errors.len(),
                self.correlation.len()
            )));
        }
        for (i, p) in self.params.iter().enumerate() {
            if let Some(name) = p.violation() {
                return Err(Error::InvalidParameter(format!("GARCH {name}[{i}] out of range: {p:?}")));
            }
        }
        for i in 0..d {
            if (self.correlation[i * d + i] - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidParameter("correlation diagonal must be 1".into()));
            }
            for j in 0..i {
                if (self.correlation[i * d + j] - self.correlation[j * d + i]).abs() > 1e-12 {
                    return Err(Error::InvalidParameter("correlation must be symmetric".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchFitDiagnostics {
    pub log_likelihood: f64,
    pub white_noise_log_likelihood: f64,
    pub iterations: u64,
    /// α+β hit the stationarity bound and was clamped.
    pub stationarity_clamped: bool,
    /// The likelihood-ratio test did not reject α=β=0, so the white-noise fit was kept.
    pub reduced_to_white_noise: bool,
    /// Observed information was not positive definite; standard errors fall back
    /// to inverse diagonal curvature.
    pub information_singular: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarchFit {
    pub model: GarchModel,
    pub diagnostics: Vec<GarchFitDiagnostics>,
}

/// Per-step log-returns `(observations, d)`, paths stacked one after another.
pub fn log_returns(paths: &PathBatch) -> Array2<f64> {
    let (b, n, d) = (paths.n_paths(), paths.n_steps(), paths.dim());
    let mut out = Array2::zeros((b * n, d));
    for p in 0..b {
        for k in 0..n {
            for i in 0..d {
                out[[p * n + k, i]] = (paths.prices[[p, k + 1, i]] / paths.prices[[p, k, i]]).ln();
            }
        }
    }
    out
}

struct NegLogLik<'a> {
    returns: &'a [f64],
    variance: f64,
    scale: f64,
}

impl NegLogLik<'_> {
    /// Optimizer coordinates are `(ω/v̂, α, β, m/√v̂)`.
    fn params(&self, x: &[f64]) -> GarchParams {
        GarchParams { omega: x[0] * self.variance, alpha: x[1], beta: x[2], mean: x[3] * self.scale }
    }

    fn coords(&self, p: &GarchParams) -> Vec<f64> {
        vec![p.omega / self.variance, p.alpha, p.beta, p.mean / self.scale]
    }

    fn value(&self, p: &GarchParams) -> f64 {
        if p.violation().is_some() {
            return f64::INFINITY;
        }
        let mut h = self.variance;
        let mut prev_sq = None;
        let mut total = 0.0;
        for &r in self.returns {
            if let Some(e2) = prev_sq {
                h = p.omega + p.alpha * e2 + p.beta * h;
            }
            let e = r - p.mean;
            total += h.ln() + e * e / h;
            prev_sq = Some(e * e);
        }
        0.5 * (total + self.returns.len() as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    fn standardized(&self, p: &GarchParams) -> Vec<f64> {
        let mut h = self.variance;
        let mut out = Vec::with_capacity(self.returns.len());
        for (t, &r) in self.returns.iter().enumerate() {
            if t > 0 {
                let e = self.returns[t - 1] - p.mean;
                h = p.omega + p.alpha * e * e + p.beta * h;
            }
            out.push((r - p.mean) / h.sqrt());
        }
        out
    }
}

impl CostFunction for NegLogLik<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, x: &Self::Param) -> std::result::Result<f64, argmin::core::Error> {
        Ok(self.value(&self.params(x)))
    }
}

fn nelder_mead(problem: &NegLogLik<'_>, start: Vec<f64>, spread: f64) -> Result<(Vec<f64>, f64, u64)> {
    let mut simplex = vec![start.clone()];
    for k in 0..start.len() {
        let mut v = start.clone();
        v[k] += if k == 3 { 0.1 } else { spread.max(0.01 * v[k].abs()) };
        simplex.push(v);
    }
    let solver = NelderMead::new(simplex)
        .with_sd_tolerance(1e-12)
        .map_err(|e| Error::Solver(e.to_string()))?;
    let res = Executor::new(NegLogLik { ..*problem }, solver)
        .configure(|s| s.max_iters(4000))
        .run()
        .map_err(|e| Error::Solver(format!("GARCH likelihood optimization failed: {e}")))?;
    let state = res.state();
    let best = state.best_param.clone().ok_or_else(|| Error::Solver("no GARCH optimum".into()))?;
    Ok((best, state.best_cost, state.iter))
}

/// Numerical observed information in optimizer coordinates.
fn hessian(problem: &NegLogLik<'_>, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let f = |y: &[f64]| problem.cost(&y.to_vec()).unwrap_or(f64::INFINITY);
    let f0 = f(x);
    let mut steps = vec![0.0; n];
    for i in 0..n {
        let mut h = 1e-4 * x[i].abs().max(1e-2);
        loop {
            let mut lo = x.to_vec();
            lo[i] -= h;
            let mut hi = x.to_vec();
            hi[i] += h;
            if (f(&lo).is_finite() && f(&hi).is_finite()) || h < 1e-9 {
                break;
            }
            h *= 0.25;
        }
        steps[i] = h;
    }
    let mut hess = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = if i == j {
                let mut lo = x.to_vec();
                lo[i] -= steps[i];
                let mut hi = x.to_vec();
                hi[i] += steps[i];
                (f(&hi) - 2.0 * f0 + f(&lo)) / (steps[i] * steps[i])
            } else {
                let eval = |si: f64, sj: f64| {
                    let mut y = x.to_vec();
                    y[i] += si * steps[i];
                    y[j] += sj * steps[j];
                    f(&y)
                };
                (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0))
                    / (4.0 * steps[i] * steps[j])
            };
            hess[i * n + j] = v;
            hess[j * n + i] = v;
        }
    }
    hess
}

fn fit_coordinate(returns: &[f64]) -> Result<(GarchParams, GarchParams, Vec<f64>, GarchFitDiagnostics)> {
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let variance = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    if !(variance > 0.0) || !variance.is_finite() {
        return Err(Error::InvalidParameter("GARCH fit needs returns with positive finite variance".into()));
    }
    let problem = NegLogLik { returns, variance, scale: variance.sqrt() };
    let white = GarchParams { omega: variance, alpha: 0.0, beta: 0.0, mean };
    let white_nll = problem.value(&white);

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut iterations = 0;
    for (alpha, beta) in [(0.05, 0.9), (0.1, 0.8), (0.05, 0.5), (0.02, 0.1)] {
        let start = problem.coords(&GarchParams { omega: variance * (1.0 - alpha - beta), alpha, beta, mean });
        let (x, v, it) = nelder_mead(&problem, start, 0.05)?;
        iterations += it;
        if best.as_ref().is_none_or(|(_, b)| v < *b) {
            best = Some((x, v));
        }
    }
    let (x, _) = best.expect("at least one start");
    let (x, full_nll, it) = nelder_mead(&problem, x, 0.005)?;
    iterations += it;

    let mut params = problem.params(&x);
    let mut stationarity_clamped = false;
    if params.alpha + params.beta > MAX_PERSISTENCE {
        params.beta = MAX_PERSISTENCE - params.alpha;
        stationarity_clamped = true;
    }

    let lr = 2.0 * (white_nll - full_nll);
    let critical = ChiSquared::new(2.0).expect("valid dof").inverse_cdf(0.95);
    let reduced = !(lr > critical);
    let mut information_singular = false;
    let (params, std_errors) = if reduced {
        let se = GarchParams {
            omega: variance * (2.0 / n).sqrt(),
            alpha: 0.0,
            beta: 0.0,
            mean: (variance / n).sqrt(),
        };
        (white, se)
    } else {
        let x = problem.coords(&params);
        let hess = hessian(&problem, &x);
        let scales = [variance, 1.0, 1.0, variance.sqrt()];
        let cov = match linalg::inverse(&hess, 4) {
            Ok(inv) if (0..4).all(|i| inv[i * 4 + i] > 0.0) => inv,
            _ => {
                information_singular = true;
                let mut diag = vec![0.0; 16];
                for i in 0..4 {
                    diag[i * 4 + i] = 1.0 / hess[i * 4 + i].abs().max(1e-300);
                }
                diag
            }
        };
        let se: [f64; 4] = std::array::from_fn(|i| cov[i * 4 + i].sqrt() * scales[i]);
        (params, GarchParams::from_array(se))
    };
    let diagnostics = GarchFitDiagnostics {
        log_likelihood: -problem.value(&params),
        white_noise_log_likelihood: -white_nll,
        iterations,
        stationarity_clamped,
        reduced_to_white_noise: reduced,
        information_singular,
    };
    Ok((params, std_errors, problem.standardized(&params), diagnostics))
}

/// Fits each column of `returns` (`observations × d`) separately by Gaussian
/// maximum likelihood and correlates the standardized residuals.
pub fn fit_garch(returns: &Array2<f64>) -> Result<GarchFit> {
    let (t, d) = returns.dim();
    if t < MIN_OBSERVATIONS {
        return Err(Error::InvalidParameter(format!(
            "GARCH fit needs at least {MIN_OBSERVATIONS} observations, got {t}"
        )));
    }
    if d == 0 {
        return Err(Error::Dimension("no coordinates to fit".into()));
    }
    if returns.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("GARCH input returns".into()));
    }
    let fits = (0..d)
        .into_par_iter()
        .map(|i| fit_coordinate(&returns.column(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    for (i, f) in fits.iter().enumerate() {
        if f.3.stationarity_clamped {
            log::warn!("GARCH coordinate {i}: α+β clamped to {MAX_PERSISTENCE}");
        }
    }
    let mut correlation = linalg::identity(d);
    for i in 0..d {
        for j in 0..i {
            let c = pearson(&fits[i].2, &fits[j].2);
            correlation[i * d + j] = c;
            correlation[j * d + i] = c;
        }
    }
    let (params, std_errors, diagnostics) =
        fits.into_iter().map(|(p, s, _, diag)| (p, s, diag)).fold((vec![], vec![], vec![]), |mut acc, x| {
            acc.0.push(x.0);
            acc.1.push(x.1);
            acc.2.push(x.2);
            acc
        });
    Ok(GarchFit { model: GarchModel { params, std_errors, correlation }, diagnostics })
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Perturbs the parameters (std `se_factor · SE`) and the off-diagonal
/// correlations (std `corr_std`) of `model`, `n_pool` times.
pub fn make_noisy_garch_pool(
    model: &GarchModel,
    se_factor: f64,
    corr_std: f64,
    n_pool: usize,
    seed: u64,
) -> Result<Vec<GarchModel>> {
    model.validate()?;
    if !(se_factor >= 0.0 && corr_std >= 0.0) {
        return Err(Error::InvalidParameter("se_factor and corr_std must be ≥ 0".into()));
    }
    let d = model.dim();
    (0..n_pool)
        .into_par_iter()
        .map(|j| {
            let mut rng = path_rng(seed, j as u64);
            let mut params = Vec::with_capacity(d);
            for (i, (p, se)) in model.params.iter().zip(&model.std_errors).enumerate() {
                let mut accepted = None;
                let mut last_violation = "";
                for _ in 0..MAX_RETRIES {
                    let base = p.as_array();
                    let sd = se.as_array();
                    let draw = GarchParams::from_array(std::array::from_fn(|k| {
                        base[k] + se_factor * sd[k] * rng.sample::<f64, _>(StandardNormal)
                    }));
                    match draw.violation() {
                        None => {
                            accepted = Some(draw);
                            break;
                        }
                        Some(name) => last_violation = name,
                    }
                }
                params.push(accepted.ok_or_else(|| {
                    Error::InvalidParameter(format!(
                        "scenario {j}: GARCH {last_violation}[{i}] invalid after {MAX_RETRIES} draws"
                    ))
                })?);
            }
            let mut corr = model.correlation.clone();
            if corr_std > 0.0 {
                for a in 0..d {
                    for b in 0..a {
                        let z = corr_std * rng.sample::<f64, _>(StandardNormal);
                        corr[a * d + b] += z;
                        corr[b * d + a] += z;
                    }
                }
                corr = linalg::nearest_psd(&corr, d, 1e-10);
                let diag: Vec<f64> = (0..d).map(|a| corr[a * d + a].sqrt()).collect();
                for a in 0..d {
                    for b in 0..d {
                        corr[a * d + b] = if a == b { 1.0 } else { corr[a * d + b] / (diag[a] * diag[b]) };
                    }
                }
            }
            Ok(GarchModel { params, std_errors: model.std_errors.clone(), correlation: corr })
        })
        .collect()
}

/// Simulates `S_n = S_{n−1} exp(r_n)` started from the unconditional variance.
pub fn simulate_garch(
    model: &GarchModel,
    grid: &TimeGrid,
    initial_price: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PathBatch> {
    model.validate()?;
    let d = model.dim();
    if initial_price.len() != d || initial_price.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::Dimension(format!("need {d} positive initial prices")));
    }
    let chol = linalg::cholesky_psd(&model.correlation, d)?;
    let n = grid.n_steps();
    let mut prices = Array3::zeros((n_paths, n + 1, d));
    prices.outer_iter_mut().into_par_iter().enumerate().for_each(|(p, mut path)| {
        let mut rng = path_rng(seed, p as u64);
        let mut h: Vec<f64> = model.params.iter().map(|g| g.unconditional_variance()).collect();
        let mut eps = vec![0.0; d];
        for i in 0..d {
            path[[0, i]] = initial_price[i];
        }
        for k in 0..n {
            eps.iter_mut().for_each(|e| *e = rng.sample(StandardNormal));
            let z = linalg::matvec(&chol, &eps);
            for (i, g) in model.params.iter().enumerate() {
                let shock = h[i].sqrt() * z[i];
                path[[k + 1, i]] = path[[k, i]] * (g.mean + shock).exp();
                h[i] = g.omega + g.alpha * shock * shock + g.beta * h[i];
            }
        }
    });
    Ok(PathBatch { prices, drift: None, vol: None, floored: vec![false; n_paths] })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: GarchParams) -> GarchModel {
        GarchModel {
            params: vec![p],
            std_errors: vec![GarchParams { omega: 0.0, alpha: 0.0, beta: 0.0, mean: 0.0 }],
            correlation: vec![1.0],
        }
    }

    fn returns_of(model: &GarchModel, n_paths: usize, n_steps: usize, seed: u64) -> Array2<f64> {
        let grid = TimeGrid::uniform(1.0, n_steps).unwrap();
        let batch = simulate_garch(model, &grid, &vec![1.0; model.dim()], n_paths, seed).unwrap();
        log_returns(&batch)
    }

    #[test]
    fn recovers_known_parameters() {
        let truth = GarchParams { omega: 1e-5, alpha: 0.05, beta: 0.9, mean: 0.0 };
        let r = returns_of(&single(truth), 1, 100_000, 11);
        let fit = fit_garch(&r).unwrap();
        let (p, se) = (fit.model.params[0], fit.model.std_errors[0]);
        assert!(!fit.diagnostics[0].reduced_to_white_noise);
        for (name, est, s, t) in [
            ("omega", p.omega, se.omega, truth.omega),
            ("alpha", p.alpha, se.alpha, truth.alpha),
            ("beta", p.beta, se.beta, truth.beta),
            ("mean", p.mean, se.mean, truth.mean),
        ] {
            assert!(s > 0.0 && s.is_finite(), "{name} se {s}");
            assert!((est - t).abs() < 3.0 * s, "{name}: {est} vs {t} (se {s})");
        }
    }

    #[test]
    fn white_noise_input_reduces() {
        let truth = GarchParams { omega: 4e-4, alpha: 0.0, beta: 0.0, mean: 1e-3 };
        let r = returns_of(&single(truth), 20, 500, 3);
        let fit = fit_garch(&r).unwrap();
        let p = fit.model.params[0];
        assert!(p.alpha + p.beta < 0.05, "{p:?}");
        let col = r.column(0);
        let m = col.mean().unwrap();
        let var = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!((p.omega / var - 1.0).abs() < 0.05, "{} vs {var}", p.omega);
    }

    #[test]
    fn independent_coordinates_are_uncorrelated() {
        let g = GarchParams { omega: 1e-4, alpha: 0.0, beta: 0.0, mean: 0.0 };
        let model = GarchModel {
            params: vec![g, g],
            std_errors: vec![g, g],
            correlation: linalg::identity(2),
        };
        let r = returns_of(&model, 40, 250, 8);
        let fit = fit_garch(&r).unwrap();
        let n = r.nrows() as f64;
        assert!(fit.model.correlation[1].abs() < 3.0 / n.sqrt());
        assert_eq!(fit.model.correlation[1], fit.model.correlation[2]);
    }

    #[test]
    fn white_noise_simulation_variance() {
        let g = GarchParams { omega: 2.5e-4, alpha: 0.0, beta: 0.0, mean: 0.0 };
        let r = returns_of(&single(g), 200, 100, 5);
        let n = r.len() as f64;
        let var = r.iter().map(|x| x * x).sum::<f64>() / n;
        // var of a chi-square mean: ω √(2/n)
        assert!((var - 2.5e-4).abs() < 3.0 * 2.5e-4 * (2.0 / n).sqrt());
    }

    #[test]
    fn long_run_variance_matches_formula() {
        let g = GarchParams { omega: 1e-5, alpha: 0.05, beta: 0.9, mean: 0.0 };
        let r = returns_of(&single(g), 1000, 1000, 9);
        let var = r.iter().map(|x| x * x).sum::<f64>() / r.len() as f64;
        assert!((var / g.unconditional_variance() - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn empty_simulation() {
        let g = GarchParams { omega: 1e-4, alpha: 0.1, beta: 0.8, mean: 0.0 };
        let grid = TimeGrid::uniform(1.0, 10).unwrap();
        let b = simulate_garch(&single(g), &grid, &[1.0], 0, 0).unwrap();
        assert_eq!(b.n_paths(), 0);
    }

    #[test]
    fn zero_noise_pool_is_identity() {
        let g = GarchParams { omega: 1e-4, alpha: 0.1, beta: 0.8, mean: 0.0 };
        let model = GarchModel {
            params: vec![g, g],
            std_errors: vec![GarchParams { omega: 1e-5, alpha: 0.01, beta: 0.02, mean: 1e-4 }; 2],
            correlation: vec![1.0, 0.3, 0.3, 1.0],
        };
        let pool = make_noisy_garch_pool(&model, 0.0, 0.0, 4, 1).unwrap();
        assert!(pool.iter().all(|m| *m == model));
    }

    #[test]
    fn noisy_pool_stays_valid() {
        let g = GarchParams { omega: 1e-4, alpha: 0.02, beta: 0.95, mean: 0.0 };
        let model = GarchModel {
            params: vec![g, g],
            std_errors: vec![GarchParams { omega: 2e-5, alpha: 0.02, beta: 0.03, mean: 1e-4 }; 2],
            correlation: vec![1.0, 0.99, 0.99, 1.0],
        };
        let pool = make_noisy_garch_pool(&model, 0.75, 0.0075, 200, 2).unwrap();
        assert_eq!(pool.len(), 200);
        for m in &pool {
            m.validate().unwrap();
            assert!(linalg::min_eigenvalue(&m.correlation, 2) > -1e-9);
        }
        assert!(pool.iter().any(|m| m.params[0] != g));
    }

    #[test]
    fn impossible_pool_names_parameter() {
        let g = GarchParams { omega: 1e-4, alpha: 0.5, beta: 0.49999, mean: 0.0 };
        let model = GarchModel {
            params: vec![g],
            std_errors: vec![GarchParams { omega: 0.0, alpha: 1e6, beta: 0.0, mean: 0.0 }],
            correlation: vec![1.0],
        };
        let err = make_noisy_garch_pool(&model, 1.0, 0.0, 1, 0).unwrap_err();
        assert!(err.to_string().contains("alpha"), "{err}");
    }

    #[test]
    fn rejects_short_samples() {
        assert!(fit_garch(&Array2::zeros((50, 1))).is_err());
    }
}
