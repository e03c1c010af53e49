use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use crate::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 8] = b"RUOCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter vector with named matrix slices and Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    slices: Vec<ParamSlice>,
    pub values: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl ParamSet {
    pub fn new(shapes: &[(String, usize, usize)]) -> Self {
        let mut slices = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for (name, rows, cols) in shapes {
            slices.push(ParamSlice { name: name.clone(), rows: *rows, cols: *cols, offset });
            offset += rows * cols;
        }
        Self { slices, values: vec![0.0; offset], first_moment: vec![0.0; offset], second_moment: vec![0.0; offset], step: 0 }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slices(&self) -> &[ParamSlice] {
        &self.slices
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slices.iter().position(|s| s.name == name)
    }

    pub fn view(&self, k: usize) -> ArrayView2<'_, f64> {
        let s = &self.slices[k];
        ArrayView2::from_shape((s.rows, s.cols), &self.values[s.offset..s.offset + s.len()]).expect("slice shape")
    }

    pub fn get(&self, name: &str) -> Option<ArrayView2<'_, f64>> {
        self.index_of(name).map(|k| self.view(k))
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let s = &self.slices[k];
        &mut self.values[s.offset..s.offset + s.len()]
    }

    /// One tape leaf per slice; trainable leaves receive gradients.
    pub fn leaves<'t>(&self, tape: &'t Tape, trainable: bool) -> Vec<Var<'t>> {
        (0..self.slices.len())
            .map(|k| {
                let v = self.view(k).to_owned();
                if trainable {
                    tape.param(v)
                } else {
                    tape.constant(v)
                }
            })
            .collect()
    }

    /// Gradients of `leaves` gathered into the flat layout.
    pub fn flat_gradient(&self, grads: &Gradients, leaves: &[Var<'_>]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        for (s, leaf) in self.slices.iter().zip(leaves) {
            if let Some(g) = grads.get(*leaf) {
                out[s.offset..s.offset + s.len()].iter_mut().zip(g.iter()).for_each(|(o, v)| *o = *v);
            }
        }
        out
    }

    pub fn matrices(&self) -> Vec<Array2<f64>> {
        (0..self.slices.len()).map(|k| self.view(k).to_owned()).collect()
    }

    /// Versioned binary: magic, version, slice table, step, values, moments.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.slices.len() as u64).to_le_bytes())?;
        for s in &self.slices {
            w.write_all(&(s.name.len() as u64).to_le_bytes())?;
            w.write_all(s.name.as_bytes())?;
            w.write_all(&(s.rows as u64).to_le_bytes())?;
            w.write_all(&(s.cols as u64).to_le_bytes())?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        for v in self.values.iter().chain(&self.first_moment).chain(&self.second_moment) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Format("checkpoint too short".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| Error::Format("truncated checkpoint".into()))?;
            Ok(u64::from_le_bytes(b))
        };
        let n = read_u64(&mut r)? as usize;
        if n > 1 << 20 {
            return Err(Error::Format("implausible slice count".into()));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let len = read_u64(&mut r)? as usize;
            if len > 1 << 16 {
                return Err(Error::Format("implausible slice name".into()));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|_| Error::Format("truncated checkpoint".into()))?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            shapes.push((name, rows, cols));
        }
        let mut set = Self::new(&shapes);
        set.step = read_u64(&mut r)?;
        let total = set.len();
        let mut buf = vec![0u8; 3 * total * 8];
        r.read_exact(&mut buf).map_err(|_| Error::Format("truncated checkpoint payload".into()))?;
        let floats: Vec<f64> =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        set.values.copy_from_slice(&floats[..total]);
        set.first_moment.copy_from_slice(&floats[total..2 * total]);
        set.second_moment.copy_from_slice(&floats[2 * total..]);
        Ok(set)
    }
}

/// Writes `<path>` (binary parameters) and `<path>.json` (metadata).
pub fn save_checkpoint<P: AsRef<Path>>(path: P, params: &ParamSet, metadata: &serde_json::Value) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path)?;
    params.write_binary(std::io::BufWriter::new(file))?;
    let mut meta = metadata.clone();
    if let Some(obj) = meta.as_object_mut() {
        obj.insert("format_version".into(), CHECKPOINT_VERSION.into());
        obj.insert("parameter_count".into(), params.len().into());
        obj.insert("slices".into(), serde_json::to_value(params.slices()).map_err(|e| Error::Format(e.to_string()))?);
    }
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(metadata_path(path), text)?;
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<(ParamSet, serde_json::Value)> {
    let path = path.as_ref();
    let params = ParamSet::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))?;
    let meta = match std::fs::read_to_string(metadata_path(path)) {
        Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?,
        Err(_) => serde_json::Value::Null,
    };
    Ok((params, meta))
}

fn metadata_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
