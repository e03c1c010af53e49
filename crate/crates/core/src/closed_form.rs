//! Explicit benchmark strategies and the worst-case markets they face.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::portfolio::{Observation, Policy};
use crate::utility_penalty::PenaltyKind;
use crate::{Error, Result};

const NEWTON_MAX_ITER: usize = 10_000;
const NEWTON_TOL: f64 = 1e-13;
const CERTIFICATE_TOL: f64 = 1e-10;

/// Optimal weights with the worst-case market they are optimal against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaddleSolution {
    pub weights: Vec<f64>,
    /// Row-major `d×d`.
    pub covariance: Vec<f64>,
    pub drift: Vec<f64>,
    /// Max-norm residual of the defining system.
    pub residual: f64,
    pub iterations: usize,
}

impl SaddleSolution {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn vol(&self) -> Result<Vec<f64>> {
        linalg::cholesky_psd(&self.covariance, self.dim())
    }
}

fn check_certificate(sol: SaddleSolution) -> Result<SaddleSolution> {
    if !(sol.residual < CERTIFICATE_TOL) {
        return Err(Error::Solver(format!("residual {} above {CERTIFICATE_TOL}", sol.residual)));
    }
    Ok(sol)
}

fn excess(drift: &[f64], rate: f64) -> Vec<f64> {
    drift.iter().map(|m| m - rate).collect()
}

/// `f(σ) = σ⁴ − σ̃σ³ − (μ−r)²/(2λ)`.
pub fn quartic(sigma: f64, drift: f64, rate: f64, ref_vol: f64, vol_scale: f64) -> f64 {
    sigma.powi(4) - ref_vol * sigma.powi(3) - (drift - rate).powi(2) / (2.0 * vol_scale)
}

/// One asset, volatility penalized as `λ(σ − σ̃)²`: bisection for the root of
/// the quartic on `[σ̃, σ̃ + 10]`, then `π = (μ−r)/σ²`.
pub fn solve_1d_robust_vol(drift: f64, rate: f64, ref_vol: f64, vol_scale: f64) -> Result<SaddleSolution> {
    if !(vol_scale > 0.0) || !(ref_vol > 0.0) {
        return Err(Error::InvalidParameter("need λ > 0 and σ̃ > 0".into()));
    }
    let f = |s: f64| quartic(s, drift, rate, ref_vol, vol_scale);
    let (mut lo, mut hi) = (ref_vol, ref_vol + 10.0);
    let (flo, fhi) = (f(lo), f(hi));
    if flo > 0.0 || fhi < 0.0 {
        return Err(Error::Solver(format!("no sign change on [{lo}, {hi}]: f = ({flo}, {fhi})")));
    }
    let mut iterations = 0;
    if flo < 0.0 {
        while hi - lo > f64::EPSILON * hi && iterations < 200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) <= 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            iterations += 1;
        }
        if f(hi).abs() < f(lo).abs() {
            lo = hi;
        }
    }
    let sigma = lo;
    let weight = (drift - rate) / (sigma * sigma);
    let residual = f(sigma).abs().max((weight * sigma * sigma - (drift - rate)).abs());
    check_certificate(SaddleSolution {
        weights: vec![weight],
        covariance: vec![sigma * sigma],
        drift: vec![drift],
        residual,
        iterations,
    })
}

/// Residual of `(Σ̃ + ππᵀ/(4λ))π = μ − r` (or the multiplicative variant) and
/// of the worst-case covariance formula, in max norm.
pub fn robust_vol_residual(
    sol: &SaddleSolution,
    rate: f64,
    ref_cov: &[f64],
    vol_scale: f64,
    kind: PenaltyKind,
) -> f64 {
    let d = sol.dim();
    let pi = &sol.weights;
    let outer = linalg::outer(pi, pi);
    let shift = match kind {
        PenaltyKind::Multiplicative => linalg::matmul(&outer, &linalg::matmul(ref_cov, ref_cov, d), d),
        _ => outer,
    };
    let cov_res = (0..d * d)
        .map(|k| (sol.covariance[k] - shift[k] / (4.0 * vol_scale) - ref_cov[k]).abs())
        .fold(0.0, f64::max);
    let lhs = linalg::matvec(&sol.covariance, pi);
    let ex = excess(&sol.drift, rate);
    let eq_res = lhs.iter().zip(&ex).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    cov_res.max(eq_res)
}

/// Residual of the fully robust system including `π = 2λ₂(μ̃ − μ)`.
pub fn fully_robust_residual(
    sol: &SaddleSolution,
    ref_drift: &[f64],
    rate: f64,
    ref_cov: &[f64],
    vol_scale: f64,
    drift_scale: f64,
) -> f64 {
    let drift_res = (0..sol.dim())
        .map(|i| (sol.weights[i] - 2.0 * drift_scale * (ref_drift[i] - sol.drift[i])).abs())
        .fold(0.0, f64::max);
    drift_res.max(robust_vol_residual(sol, rate, ref_cov, vol_scale, PenaltyKind::Additive))
}

/// Damped Newton with Armijo backtracking on `‖F‖²`.
fn damped_newton(
    start: Vec<f64>,
    residual: impl Fn(&[f64]) -> Vec<f64>,
    jacobian: impl Fn(&[f64]) -> Vec<f64>,
) -> Result<(Vec<f64>, usize)> {
    let norm2 = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
    let mut x = start;
    let mut fx = residual(&x);
    for it in 0..NEWTON_MAX_ITER {
        if linalg::max_abs(&fx) < NEWTON_TOL {
            return Ok((x, it));
        }
        let step = linalg::solve(&jacobian(&x), &fx)?;
        let base = norm2(&fx);
        let mut t = 1.0;
        loop {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            let ft = residual(&trial);
            if norm2(&ft) <= (1.0 - 1e-4 * t) * base || t < 1e-12 {
                x = trial;
                fx = ft;
                break;
            }
            t *= 0.5;
        }
    }
    if linalg::max_abs(&fx) < NEWTON_TOL {
        return Ok((x, NEWTON_MAX_ITER));
    }
    Err(Error::Solver(format!("Newton did not converge in {NEWTON_MAX_ITER} iterations")))
}

fn validate_inputs(drift: &[f64], ref_cov: &[f64], vol_scale: f64) -> Result<usize> {
    let d = drift.len();
    if ref_cov.len() != d * d {
        return Err(Error::Dimension(format!("covariance must be {d}x{d}")));
    }
    if !(vol_scale > 0.0) {
        return Err(Error::InvalidParameter("need λ₁ > 0".into()));
    }
    Ok(d)
}

/// Robust-volatility saddle point for the additive (`‖Σ−Σ̃‖_F²`) or
/// multiplicative (`‖ΣΣ̃⁻¹−I‖_F²`) instantaneous penalty.
///
/// The multiplicative worst case `Σ̃ + ππᵀΣ̃²/(4λ)` is not symmetric in general
/// and is returned as is.
pub fn solve_multid_robust_vol(
    drift: &[f64],
    rate: f64,
    ref_cov: &[f64],
    vol_scale: f64,
    kind: PenaltyKind,
) -> Result<SaddleSolution> {
    let d = validate_inputs(drift, ref_cov, vol_scale)?;
    let b = excess(drift, rate);
    let start = linalg::solve(ref_cov, &b)?;
    let four_l = 4.0 * vol_scale;
    let (pi, iterations, shift) = match kind {
        PenaltyKind::Additive => {
            let (pi, it) = damped_newton(
                start,
                |p| {
                    let q = linalg::dot(p, p) / four_l;
                    let s = linalg::matvec(ref_cov, p);
                    (0..d).map(|i| s[i] + q * p[i] - b[i]).collect()
                },
                |p| {
                    let q = linalg::dot(p, p);
                    let mut j = ref_cov.to_vec();
                    for r in 0..d {
                        for c in 0..d {
                            j[r * d + c] += (if r == c { q } else { 0.0 } + 2.0 * p[r] * p[c]) / four_l;
                        }
                    }
                    j
                },
            )?;
            let shift = linalg::outer(&pi, &pi);
            (pi, it, shift)
        }
        PenaltyKind::Multiplicative => {
            let sq = linalg::matmul(ref_cov, ref_cov, d);
            let (pi, it) = damped_newton(
                start,
                |p| {
                    let q = linalg::dot(p, &linalg::matvec(&sq, p)) / four_l;
                    let s = linalg::matvec(ref_cov, p);
                    (0..d).map(|i| s[i] + q * p[i] - b[i]).collect()
                },
                |p| {
                    let sp = linalg::matvec(&sq, p);
                    let q = linalg::dot(p, &sp);
                    let mut j = ref_cov.to_vec();
                    for r in 0..d {
                        for c in 0..d {
                            j[r * d + c] += (if r == c { q } else { 0.0 } + 2.0 * p[r] * sp[c]) / four_l;
                        }
                    }
                    j
                },
            )?;
            let shift = linalg::matmul(&linalg::outer(&pi, &pi), &sq, d);
            (pi, it, shift)
        }
        other => {
            return Err(Error::InvalidParameter(format!("no explicit multi-asset solution for {other:?}")));
        }
    };
    let covariance: Vec<f64> = (0..d * d).map(|k| ref_cov[k] + shift[k] / four_l).collect();
    let mut sol = SaddleSolution { weights: pi, covariance, drift: drift.to_vec(), residual: 0.0, iterations };
    sol.residual = robust_vol_residual(&sol, rate, ref_cov, vol_scale, kind);
    check_certificate(sol)
}

/// Drift and volatility both robust (additive penalty on `Σ`, quadratic on `μ`).
pub fn solve_fully_robust(
    ref_drift: &[f64],
    rate: f64,
    ref_cov: &[f64],
    vol_scale: f64,
    drift_scale: f64,
) -> Result<SaddleSolution> {
    let d = validate_inputs(ref_drift, ref_cov, vol_scale)?;
    if !(drift_scale > 0.0) {
        return Err(Error::InvalidParameter("need λ₂ > 0".into()));
    }
    let b = excess(ref_drift, rate);
    let four_l = 4.0 * vol_scale;
    let damp = 1.0 / (2.0 * drift_scale);
    let (pi, iterations) = damped_newton(
        linalg::solve(ref_cov, &b)?,
        |p| {
            let q = linalg::dot(p, p) / four_l;
            let s = linalg::matvec(ref_cov, p);
            (0..d).map(|i| s[i] + (q + damp) * p[i] - b[i]).collect()
        },
        |p| {
            let q = linalg::dot(p, p);
            let mut j = ref_cov.to_vec();
            for r in 0..d {
                for c in 0..d {
                    let diag = if r == c { q / four_l + damp } else { 0.0 };
                    j[r * d + c] += diag + 2.0 * p[r] * p[c] / four_l;
                }
            }
            j
        },
    )?;
    let outer = linalg::outer(&pi, &pi);
    let covariance: Vec<f64> = (0..d * d).map(|k| ref_cov[k] + outer[k] / four_l).collect();
    let drift: Vec<f64> = (0..d).map(|i| ref_drift[i] - pi[i] * damp).collect();
    let mut sol = SaddleSolution { weights: pi, covariance, drift, residual: 0.0, iterations };
    sol.residual = fully_robust_residual(&sol, ref_drift, rate, ref_cov, vol_scale, drift_scale);
    check_certificate(sol)
}

/// Frictionless optimal weight `μ_S/(pσ²)` for excess return `μ_S`.
pub fn merton_weight(excess_return: f64, vol: f64, risk_aversion: f64) -> f64 {
    excess_return / (risk_aversion * vol * vol)
}

/// Solves `Σ π = μ − r` without forming the inverse.
pub fn oracle_weight(covariance: &[f64], drift: &[f64], rate: f64) -> Result<Vec<f64>> {
    if covariance.len() != drift.len() * drift.len() {
        return Err(Error::Dimension("covariance must be d×d".into()));
    }
    linalg::solve(covariance, &excess(drift, rate))
}

/// Asymptotic no-trade band `π_ntc ± c^{1/3} Δπ` around the frictionless weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoTradeBand {
    pub target: f64,
    pub half_width: f64,
}

impl NoTradeBand {
    /// `Δπ = (3/(2p) · (π(1−π))²)^{1/3}`.
    pub fn new(target: f64, risk_aversion: f64, proportional_cost: f64) -> Self {
        let base = (1.5 / risk_aversion * (target * (1.0 - target)).powi(2)).cbrt();
        Self { target, half_width: proportional_cost.cbrt() * base }
    }

    pub fn lower(&self) -> f64 {
        self.target - self.half_width
    }

    pub fn upper(&self) -> f64 {
        self.target + self.half_width
    }

    /// Weight after the minimal adjustment and the holdings that realize it.
    pub fn step(&self, price: f64, wealth: f64, holdings: f64) -> (f64, f64) {
        if wealth == 0.0 {
            return (0.0, holdings);
        }
        let current = holdings * price / wealth;
        if current >= self.lower() && current <= self.upper() {
            return (current, holdings);
        }
        let weight = current.clamp(self.lower(), self.upper());
        (weight, weight * wealth / price)
    }
}

/// Single-asset strategy that trades only when the risky fraction leaves the
/// band, and then only to its nearest edge.
#[derive(Debug, Clone)]
pub struct NoTradePolicy {
    pub band: NoTradeBand,
    holdings: Vec<f64>,
}

impl NoTradePolicy {
    pub fn new(band: NoTradeBand) -> Self {
        Self { band, holdings: Vec::new() }
    }

    pub fn holdings(&self) -> &[f64] {
        &self.holdings
    }
}

impl Policy for NoTradePolicy {
    fn name(&self) -> String {
        "no_trade".into()
    }

    fn reset(&mut self, n_paths: usize) {
        self.holdings = vec![0.0; n_paths];
    }

    fn act(&mut self, obs: &Observation<'_>, weights: &mut Array2<f64>) {
        for p in 0..weights.nrows() {
            let (w, h) = self.band.step(obs.prices[[p, 0]], obs.wealth[p], self.holdings[p]);
            weights[[p, 0]] = w;
            self.holdings[p] = h;
        }
    }

    fn clone_box(&self) -> Box<dyn Policy> {
        Box::new(self.clone())
    }
}
