use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use rayon::prelude::*;

use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"RGPN1";

/// Independent random stream for `(seed, stream)`.
///
/// Every path draws from its own stream, so generating a batch serially or
/// split across workers gives bit-identical values.
pub fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Standard Gaussian driving noise, shape `(paths, steps, d)`.
///
/// Entries are unscaled; multiply by `√Δt_n` before using them as Brownian
/// increments.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseIncrements {
    pub seed: u64,
    pub data: Array3<f64>,
}

impl NoiseIncrements {
    pub fn generate(n_paths: usize, n_steps: usize, d: usize, seed: u64) -> Self {
        let mut data = Array3::zeros((n_paths, n_steps, d));
        data.axis_iter_mut(Axis(0))
            .into_par_iter()
            .enumerate()
            .for_each(|(p, mut path)| {
                let mut rng = path_rng(seed, p as u64);
                for v in path.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            });
        Self { seed, data }
    }

    /// Raw Student-t draws in place of Gaussians, as used by the simple-return
    /// Student-t market. Path `p` consumes the same stream as the simulator.
    pub fn generate_student_t(n_paths: usize, n_steps: usize, d: usize, dof: f64, seed: u64) -> Result<Self> {
        let dist = StudentT::new(dof).map_err(|e| Error::InvalidParameter(format!("Student-t dof {dof}: {e}")))?;
        let mut data = Array3::zeros((n_paths, n_steps, d));
        data.axis_iter_mut(Axis(0)).into_par_iter().enumerate().for_each(|(p, mut path)| {
            let mut rng = path_rng(seed, p as u64);
            for v in path.iter_mut() {
                *v = dist.sample(&mut rng);
            }
        });
        Ok(Self { seed, data })
    }

    /// Antithetic dataset: path `2k+1` is the negation of path `2k`, so every
    /// step has exactly zero sample mean. `n_paths` is rounded up to even.
    pub fn generate_antithetic(n_paths: usize, n_steps: usize, d: usize, seed: u64) -> Self {
        let half = n_paths.div_ceil(2);
        let base = Self::generate(half, n_steps, d, seed);
        let mut data = Array3::zeros((2 * half, n_steps, d));
        for k in 0..half {
            let src = base.data.index_axis(Axis(0), k);
            data.index_axis_mut(Axis(0), 2 * k).assign(&src);
            data.index_axis_mut(Axis(0), 2 * k + 1).assign(&src.mapv(|v| -v));
        }
        Self { seed, data }
    }

    pub fn n_paths(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn path(&self, p: usize) -> ArrayView2<'_, f64> {
        self.data.index_axis(Axis(0), p)
    }

    /// Splits into the first `n_first` paths and the rest; the parts are disjoint.
    pub fn split(&self, n_first: usize) -> Result<(Self, Self)> {
        if n_first > self.n_paths() {
            return Err(Error::InvalidParameter(format!(
                "cannot split {} paths at {n_first}",
                self.n_paths()
            )));
        }
        let a = self.data.slice(s![..n_first, .., ..]).to_owned();
        let b = self.data.slice(s![n_first.., .., ..]).to_owned();
        Ok((Self { seed: self.seed, data: a }, Self { seed: self.seed, data: b }))
    }

    /// Gathers the given paths into a new dataset (mini-batch selection).
    pub fn select(&self, paths: &[usize]) -> Self {
        Self { seed: self.seed, data: self.data.select(Axis(0), paths) }
    }

    pub fn write<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        for v in [self.dim() as u64, self.n_steps() as u64, self.n_paths() as u64, self.seed] {
            w.write_all(&v.to_le_bytes())?;
        }
        // (path, step, asset) order is the standard layout of `data`.
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("increment file does not start with RGPN1".into()));
        }
        let mut header = [0u64; 4];
        for h in header.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *h = u64::from_le_bytes(b);
        }
        let [d, n, b, seed] = header;
        let len = (d as usize)
            .checked_mul(n as usize)
            .and_then(|x| x.checked_mul(b as usize))
            .ok_or_else(|| Error::Format("increment header overflows".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != len * 8 {
            return Err(Error::Format(format!(
                "expected {} payload bytes for d={d} N={n} B={b}, found {}",
                len * 8,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let data = Array3::from_shape_vec((b as usize, n as usize, d as usize), values)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { seed, data })
    }
}
