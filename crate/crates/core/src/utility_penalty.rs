//! Power utilities and the penalty functionals that keep the adversarial
//! market close to its reference.

use serde::{Deserialize, Serialize};

use crate::linalg;
use crate::market_sim::{PathBatch, TimeGrid};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityForm {
    /// `(x^{1−p} − 1)/(1−p)`, zero at `x = 1`.
    Shifted,
    /// `x^{1−p}/(1−p)`.
    Unshifted,
}

/// Power utility with relative risk aversion `power`; `power = 1` is `ln`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerUtility {
    pub power: f64,
    pub form: UtilityForm,
}

impl PowerUtility {
    pub fn shifted(power: f64) -> Self {
        Self { power, form: UtilityForm::Shifted }
    }

    pub fn unshifted(power: f64) -> Self {
        Self { power, form: UtilityForm::Unshifted }
    }

    pub fn log() -> Self {
        Self::shifted(1.0)
    }

    pub fn is_log(&self) -> bool {
        self.power == 1.0
    }

    /// `−∞` for non-positive wealth.
    pub fn value(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        if self.is_log() {
            return x.ln();
        }
        let q = 1.0 - self.power;
        match self.form {
            UtilityForm::Shifted => (x.powf(q) - 1.0) / q,
            UtilityForm::Unshifted => x.powf(q) / q,
        }
    }

    pub fn label(&self) -> String {
        match (self.is_log(), self.form) {
            (true, _) => "log".into(),
            (false, UtilityForm::Shifted) => format!("u_{}", self.power),
            (false, UtilityForm::Unshifted) => format!("u~_{}", self.power),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyKind {
    /// `‖Σ − Σ̃‖_F²` per unit time.
    Additive,
    /// `‖Σ Σ̃⁻¹ − I‖_F²` per unit time.
    Multiplicative,
    /// `‖σ − σ̃‖²` per unit time on the volatility matrix itself.
    Volatility,
    /// Quadratic covariation of log-prices against `Σ̃T` plus batch average
    /// relative return against `e^{μ̃T}`.
    Pathwise,
}

/// Active penalty, its reference values and scalings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PenaltySpec {
    pub kind: PenaltyKind,
    /// Weight of the volatility term.
    pub vol_scale: f64,
    /// Weight of the drift term.
    pub drift_scale: f64,
    pub reference_drift: Vec<f64>,
    pub reference_vol: Vec<f64>,
    pub reference_covariance: Vec<f64>,
}

impl PenaltySpec {
    pub fn new(
        kind: PenaltyKind,
        vol_scale: f64,
        drift_scale: f64,
        market: &crate::market_sim::ReferenceMarket,
    ) -> Result<Self> {
        let spec = Self {
            kind,
            vol_scale,
            drift_scale,
            reference_drift: market.drift.clone(),
            reference_vol: market.vol.clone(),
            reference_covariance: market.covariance.clone(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.reference_drift.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.vol_scale >= 0.0 && self.drift_scale >= 0.0)
            || !self.vol_scale.is_finite()
            || !self.drift_scale.is_finite()
        {
            return Err(Error::InvalidParameter(format!(
                "penalty scales must be finite and ≥ 0 (got {}, {})",
                self.vol_scale, self.drift_scale
            )));
        }
        let d = self.dim();
        if self.reference_vol.len() != d * d || self.reference_covariance.len() != d * d {
            return Err(Error::Dimension("reference vol/covariance must be d×d".into()));
        }
        Ok(())
    }

    /// `Σ̃⁻¹`, needed by the multiplicative penalty.
    pub fn reference_precision(&self) -> Result<Vec<f64>> {
        linalg::inverse(&self.reference_covariance, self.dim())
            .map_err(|_| Error::Singular("multiplicative penalty needs an invertible reference covariance".into()))
    }

    /// Instantaneous volatility deviation `F(Σ)` for one step.
    pub fn instant_vol_deviation(&self, vol: &[f64], precision: Option<&[f64]>) -> f64 {
        let d = self.dim();
        match self.kind {
            PenaltyKind::Volatility => vol.iter().zip(&self.reference_vol).map(|(a, b)| (a - b).powi(2)).sum(),
            PenaltyKind::Multiplicative => {
                let cov = linalg::gram(vol, d);
                let mut m = linalg::matmul(&cov, precision.expect("precision for multiplicative penalty"), d);
                for i in 0..d {
                    m[i * d + i] -= 1.0;
                }
                linalg::frobenius_sq(&m)
            }
            PenaltyKind::Additive | PenaltyKind::Pathwise => {
                let cov = linalg::gram(vol, d);
                cov.iter().zip(&self.reference_covariance).map(|(a, b)| (a - b).powi(2)).sum()
            }
        }
    }
}

/// Penalty value split into its volatility and drift contributions (already scaled).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyValue {
    pub vol_term: f64,
    pub drift_term: f64,
}

impl PenaltyValue {
    pub fn total(&self) -> f64 {
        self.vol_term + self.drift_term
    }
}

/// Batch-averaged Riemann sum `Σ_n (λ₁ F(Σ_n) + λ₂ ‖μ_n − μ̃‖²) Δt_{n+1}` over
/// the coefficients recorded in `paths`.
pub fn penalty_instant(spec: &PenaltySpec, paths: &PathBatch, grid: &TimeGrid) -> Result<PenaltyValue> {
    spec.validate()?;
    if spec.kind == PenaltyKind::Pathwise {
        return Err(Error::InvalidParameter("path-wise penalty requested from penalty_instant".into()));
    }
    let (Some(drift), Some(vol)) = (&paths.drift, &paths.vol) else {
        return Err(Error::InvalidParameter("instantaneous penalty needs recorded coefficients".into()));
    };
    let d = spec.dim();
    if paths.dim() != d || paths.n_steps() != grid.n_steps() {
        return Err(Error::Dimension("penalty reference and paths disagree".into()));
    }
    let b = paths.n_paths();
    if b == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    let precision = match spec.kind {
        PenaltyKind::Multiplicative => Some(spec.reference_precision()?),
        _ => None,
    };
    let (mut vol_acc, mut drift_acc) = (0.0, 0.0);
    for p in 0..b {
        for n in 0..grid.n_steps() {
            let dt = grid.dt(n);
            let v = vol.slice(ndarray::s![p, n, ..]).to_vec();
            vol_acc += spec.instant_vol_deviation(&v, precision.as_deref()) * dt;
            let dev: f64 = (0..d).map(|i| (drift[[p, n, i]] - spec.reference_drift[i]).powi(2)).sum();
            drift_acc += dev * dt;
        }
    }
    Ok(PenaltyValue {
        vol_term: spec.vol_scale * vol_acc / b as f64,
        drift_term: spec.drift_scale * drift_acc / b as f64,
    })
}

/// Realized quadratic covariation `Σ_n Δln S_n Δln S_nᵀ` of one path, row-major.
pub fn quadratic_covariation(paths: &PathBatch, path: usize) -> Vec<f64> {
    let d = paths.dim();
    let mut qcv = vec![0.0; d * d];
    let mut inc = vec![0.0; d];
    for n in 0..paths.n_steps() {
        for i in 0..d {
            inc[i] = (paths.prices[[path, n + 1, i]] / paths.prices[[path, n, i]]).ln();
        }
        for i in 0..d {
            for j in 0..d {
                qcv[i * d + j] += inc[i] * inc[j];
            }
        }
    }
    qcv
}

/// `λ₁ · mean_b ‖QCV_b − Σ̃T‖_F²` and `λ₂ · ‖mean_b S_T/S_0 − e^{μ̃T}‖²`.
pub fn penalty_pathwise(spec: &PenaltySpec, paths: &PathBatch, grid: &TimeGrid) -> Result<PenaltyValue> {
    spec.validate()?;
    let d = spec.dim();
    let b = paths.n_paths();
    if b == 0 {
        return Err(Error::InvalidParameter("empty batch".into()));
    }
    if paths.dim() != d {
        return Err(Error::Dimension("penalty reference and paths disagree".into()));
    }
    if paths.prices.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameter("path-wise penalty needs strictly positive prices".into()));
    }
    let horizon = grid.horizon();
    let n = paths.n_steps();
    let mut qcv_dev = 0.0;
    let mut mean_return = vec![0.0; d];
    for p in 0..b {
        let qcv = quadratic_covariation(paths, p);
        qcv_dev += qcv
            .iter()
            .zip(&spec.reference_covariance)
            .map(|(q, c)| (q - c * horizon).powi(2))
            .sum::<f64>();
        for i in 0..d {
            mean_return[i] += paths.prices[[p, n, i]] / paths.prices[[p, 0, i]];
        }
    }
    let drift_dev: f64 = (0..d)
        .map(|i| (mean_return[i] / b as f64 - (spec.reference_drift[i] * horizon).exp()).powi(2))
        .sum();
    Ok(PenaltyValue { vol_term: spec.vol_scale * qcv_dev / b as f64, drift_term: spec.drift_scale * drift_dev })
}
