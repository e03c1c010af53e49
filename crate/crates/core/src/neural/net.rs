use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tape::Var;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// One network shared by all time steps.
    Ffnn,
    /// Single tanh recurrent layer whose state is carried across steps.
    Rnn,
    /// Independent feed-forward parameters for every time step.
    TimeGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputInit {
    /// `U(−1/√fan_in, 1/√fan_in)` like the hidden layers.
    Uniform,
    /// All output weights and biases zero.
    Zero,
    /// Zero weights, bias set to the given values: the network starts as a constant map.
    Constant(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    /// Hidden widths; recurrent networks use exactly one.
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Number of time steps, used by the time-grid architecture.
    pub n_steps: usize,
    pub output_init: OutputInit,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.iter().any(|w| *w == 0) {
            return Err(Error::InvalidParameter(format!("degenerate network {self:?}")));
        }
        if self.architecture == Architecture::Rnn && self.hidden.len() != 1 {
            return Err(Error::InvalidParameter("recurrent network needs exactly one hidden width".into()));
        }
        if self.architecture == Architecture::TimeGrid && self.n_steps == 0 {
            return Err(Error::InvalidParameter("time-grid network needs n_steps ≥ 1".into()));
        }
        if let OutputInit::Constant(c) = &self.output_init {
            if c.len() != self.output_dim {
                return Err(Error::Dimension(format!("constant head has {} values for {} outputs", c.len(), self.output_dim)));
            }
        }
        Ok(())
    }

    fn dense_shapes(&self, prefix: &str) -> Vec<(String, usize, usize)> {
        let mut shapes = vec![];
        let mut fan_in = self.input_dim;
        for (k, w) in self.hidden.iter().enumerate() {
            shapes.push((format!("{prefix}l{k}.w"), fan_in, *w));
            shapes.push((format!("{prefix}l{k}.b"), 1, *w));
            fan_in = *w;
        }
        shapes.push((format!("{prefix}out.w"), fan_in, self.output_dim));
        shapes.push((format!("{prefix}out.b"), 1, self.output_dim));
        shapes
    }

    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        match self.architecture {
            Architecture::Ffnn => self.dense_shapes(""),
            Architecture::TimeGrid => (0..self.n_steps).flat_map(|n| self.dense_shapes(&format!("t{n}."))).collect(),
            Architecture::Rnn => {
                let h = self.hidden[0];
                vec![
                    ("rnn.wx".into(), self.input_dim, h),
                    ("rnn.wh".into(), h, h),
                    ("rnn.b".into(), 1, h),
                    ("out.w".into(), h, self.output_dim),
                    ("out.b".into(), 1, self.output_dim),
                ]
            }
        }
    }

    pub fn hidden_width(&self) -> Option<usize> {
        (self.architecture == Architecture::Rnn).then(|| self.hidden[0])
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init(&self, seed: u64) -> Result<ParamSet> {
        self.validate()?;
        let mut params = ParamSet::new(&self.param_shapes());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slices = params.slices().to_vec();
        // fan-in of a bias is the row count of the weight just before it
        let mut fan_in = 1;
        for (k, slice) in slices.iter().enumerate() {
            if slice.name.ends_with(".w") || slice.name.ends_with(".wx") || slice.name.ends_with(".wh") {
                fan_in = slice.rows;
            }
            if slice.name.starts_with("out.") || slice.name.contains(".out.") {
                match (&self.output_init, slice.name.ends_with(".b")) {
                    (OutputInit::Zero, _) | (OutputInit::Constant(_), false) => continue,
                    (OutputInit::Constant(c), true) => {
                        params.slice_mut(k).copy_from_slice(c);
                        continue;
                    }
                    (OutputInit::Uniform, _) => {}
                }
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in params.slice_mut(k).iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    fn block(&self, step: usize) -> usize {
        match self.architecture {
            Architecture::TimeGrid => {
                assert!(step < self.n_steps, "time-grid network has {} steps, asked for {step}", self.n_steps);
                step * 2 * (self.hidden.len() + 1)
            }
            _ => 0,
        }
    }

    /// Recorded forward pass; `leaves` come from [`ParamSet::leaves`].
    pub fn forward<'t>(
        &self,
        leaves: &[Var<'t>],
        step: usize,
        input: Var<'t>,
        hidden: Option<Var<'t>>,
    ) -> (Var<'t>, Option<Var<'t>>) {
        match self.architecture {
            Architecture::Rnn => {
                let h_prev = hidden.unwrap_or_else(|| {
                    input.tape().constant(Array2::zeros((input.shape().0, self.hidden[0])))
                });
                let h = (input.matmul(leaves[0]) + h_prev.matmul(leaves[1]) + leaves[2]).tanh();
                (h.matmul(leaves[3]) + leaves[4], Some(h))
            }
            _ => {
                let base = self.block(step);
                let mut x = input;
                for k in 0..self.hidden.len() {
                    x = (x.matmul(leaves[base + 2 * k]) + leaves[base + 2 * k + 1]).tanh();
                }
                let l = self.hidden.len();
                (x.matmul(leaves[base + 2 * l]) + leaves[base + 2 * l + 1], None)
            }
        }
    }

    /// Forward pass without recording, for evaluation.
    pub fn forward_plain(
        &self,
        params: &ParamSet,
        step: usize,
        input: &Array2<f64>,
        hidden: Option<&Array2<f64>>,
    ) -> (Array2<f64>, Option<Array2<f64>>) {
        match self.architecture {
            Architecture::Rnn => {
                let zeros;
                let h_prev = match hidden {
                    Some(h) => h,
                    None => {
                        zeros = Array2::zeros((input.nrows(), self.hidden[0]));
                        &zeros
                    }
                };
                let h = (input.dot(&params.view(0)) + h_prev.dot(&params.view(1)) + params.view(2)).mapv(f64::tanh);
                let out = h.dot(&params.view(3)) + params.view(4);
                (out, Some(h))
            }
            _ => {
                let base = self.block(step);
                let mut x = input.clone();
                for k in 0..self.hidden.len() {
                    x = (x.dot(&params.view(base + 2 * k)) + params.view(base + 2 * k + 1)).mapv(f64::tanh);
                }
                let l = self.hidden.len();
                (x.dot(&params.view(base + 2 * l)) + params.view(base + 2 * l + 1), None)
            }
        }
    }
}
