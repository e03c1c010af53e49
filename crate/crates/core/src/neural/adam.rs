use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::ensure_finite;
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale gradients whose Euclidean norm exceeds this; `None` disables.
    pub max_grad_norm: Option<f64>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, max_grad_norm: None }
    }
}

impl Adam {
    /// One descent step with bias correction. Moments live in `params`.
    pub fn step(&self, params: &mut ParamSet, grad: &[f64], lr: f64) -> Result<()> {
        assert_eq!(grad.len(), params.len(), "gradient length");
        ensure_finite(grad, "gradient")?;
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clip = match self.max_grad_norm {
            Some(m) if norm > m => m / norm,
            _ => 1.0,
        };
        params.step += 1;
        let t = params.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..grad.len() {
            let g = grad[i] * clip;
            let m = self.beta1 * params.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * params.second_moment[i] + (1.0 - self.beta2) * g * g;
            params.first_moment[i] = m;
            params.second_moment[i] = v;
            params.values[i] -= lr * (m / c1) / ((v / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Step decay: `base · decay^(epoch / every)`.
pub fn lr_schedule(epoch: usize, base: f64, decay: f64, every: usize) -> f64 {
    if every == 0 {
        return base;
    }
    base * decay.powi((epoch / every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamSet::new(&[("w".into(), 1, 2)]);
        Adam::default().step(&mut p, &[3.0, -0.001], 0.01).unwrap();
        assert!((p.values[0] + 0.01).abs() < 1e-8);
        assert!((p.values[1] - 0.01).abs() < 1e-5);
    }

    #[test]
    fn minimises_quadratic() {
        let mut p = ParamSet::new(&[("w".into(), 1, 2)]);
        let adam = Adam::default();
        for _ in 0..3000 {
            let g = [2.0 * (p.values[0] - 1.5), 2.0 * (p.values[1] + 0.5)];
            adam.step(&mut p, &g, 0.01).unwrap();
        }
        assert!((p.values[0] - 1.5).abs() < 1e-3 && (p.values[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn nan_gradient_rejected() {
        let mut p = ParamSet::new(&[("w".into(), 1, 1)]);
        assert!(Adam::default().step(&mut p, &[f64::NAN], 0.1).is_err());
        assert_eq!(p.step, 0);
    }

    #[test]
    fn schedule_decays_stepwise() {
        assert_eq!(lr_schedule(0, 5e-4, 0.2, 100), 5e-4);
        assert_eq!(lr_schedule(99, 5e-4, 0.2, 100), 5e-4);
        assert!((lr_schedule(100, 5e-4, 0.2, 100) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(250, 5e-4, 0.2, 100) - 2e-5).abs() < 1e-18);
    }
}
