//! Named parameter collections with exact flatten/unflatten and checkpoint IO.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered map from parameter name to tensor. Iteration order is insertion
/// order, which fixes the flattening layout and all gradient reductions.
#[derive(Debug, Clone, Default)]
pub struct ModelParams {
    entries: IndexMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            self.entries.insert(name.clone(), tensor).is_none(),
            "duplicate parameter name {name:?}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Concatenate all entries in insertion order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_dim());
        for t in self.entries.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of `flatten` against this collection's layout.
    pub fn unflatten_like(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.total_dim() {
            return Err(Error::Config(format!(
                "flat vector has {} values, layout expects {}",
                flat.len(),
                self.total_dim()
            )));
        }
        let mut out = ModelParams::new();
        let mut off = 0;
        for (name, t) in &self.entries {
            let n = t.len();
            out.insert(
                name.clone(),
                Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec()),
            );
            off += n;
        }
        Ok(out)
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = ModelParams::new();
        for (name, t) in &self.entries {
            out.insert(name.clone(), Tensor::zeros(t.shape().to_vec()));
        }
        out
    }

    /// self += scale * other, matched by name. Missing names are an error.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) -> Result<()> {
        for (name, g) in other.iter() {
            let t = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(name.to_string()))?;
            let dst = t.data_mut();
            for (d, s) in dst.iter_mut().zip(g.data()) {
                *d += scale * s;
            }
        }
        Ok(())
    }

    /// Scale every entry in place.
    pub fn scale(&mut self, s: f64) {
        for t in self.entries.values_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|t| t.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        let mut m: f64 = 0.0;
        for (name, t) in self.iter() {
            if let Some(o) = other.get(name) {
                for (a, b) in t.data().iter().zip(o.data()) {
                    m = m.max((a - b).abs());
                }
            }
        }
        m
    }
}

impl FromIterator<(String, Tensor)> for ModelParams {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut p = ModelParams::new();
        for (name, t) in iter {
            p.insert(name, t);
        }
        p
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SAVAECK1";

/// Binary checkpoint: magic, entry count, then per entry the name, shape,
/// and row-major values as little-endian 64-bit reals.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
        w.write_all(bytes)
            .map_err(|e| Error::io(path.display().to_string(), e))
    };
    put(&mut w, CHECKPOINT_MAGIC)?;
    put(&mut w, &(params.len() as u64).to_le_bytes())?;
    for (name, t) in params.iter() {
        put(&mut w, &(name.len() as u64).to_le_bytes())?;
        put(&mut w, name.as_bytes())?;
        put(&mut w, &(t.shape().len() as u64).to_le_bytes())?;
        for &d in t.shape() {
            put(&mut w, &(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            put(&mut w, &v.to_le_bytes())?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let p = path.display().to_string();
    let mut buf8 = [0u8; 8];
    let mut read8 = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
        r.read_exact(&mut buf8).map_err(|e| Error::io(p.clone(), e))?;
        Ok(buf8)
    };
    let magic = read8(&mut r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(p, "bad checkpoint magic"));
    }
    let count = u64::from_le_bytes(read8(&mut r)?) as usize;
    let mut params = ModelParams::new();
    for _ in 0..count {
        let name_len = u64::from_le_bytes(read8(&mut r)?) as usize;
        if name_len > 1 << 20 {
            return Err(Error::format(p, "unreasonable name length"));
        }
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|e| Error::io(p.clone(), e))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::format(p.clone(), "non-utf8 parameter name"))?;
        let rank = u64::from_le_bytes(read8(&mut r)?) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(read8(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f64::from_le_bytes(read8(&mut r)?));
        }
        params.insert(name, Tensor::new(shape, data));
    }
    Ok(params)
}
