//! Ground-truth data generation and marginal-likelihood estimation.
//!
//! A randomly initialized generator acts as the data-generating process.
//! The output weights that connect to the latent variables are drawn from a
//! wider range than everything else so the latents demonstrably matter.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels;
use crate::models::{GenDims, LatentWiring, SeqGenModel};
use crate::params::ModelParams;
use crate::rng::{self, NormalStream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct OracleSpec {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
    pub seq_len: usize,
    /// Uniform init half-width for ordinary parameters.
    pub narrow_init: f64,
    /// Uniform init half-width for the latent-facing output weights.
    pub wide_init: f64,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for OracleSpec {
    fn default() -> Self {
        OracleSpec {
            vocab: 1000,
            embed: 100,
            hidden: 100,
            latent: 2,
            seq_len: 5,
            narrow_init: 1.0,
            wide_init: 5.0,
            n_train: 5000,
            n_valid: 5000,
            n_test: 5000,
            seed: 0,
        }
    }
}

impl OracleSpec {
    pub fn gen_dims(&self) -> GenDims {
        GenDims {
            vocab: self.vocab,
            embed: self.embed,
            hidden: self.hidden,
            latent: self.latent,
            wiring: LatentWiring::OutputMlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<Vec<usize>>,
    pub test: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[Vec<usize>] {
        match name {
            "train" => &self.train,
            "valid" => &self.valid,
            "test" => &self.test,
            other => panic!("unknown split {other:?}"),
        }
    }
}

/// Deterministic oracle construction. All parameters are U(-narrow, narrow)
/// except the latent-facing output block, which is U(-wide, wide).
pub fn build_oracle(spec: &OracleSpec) -> SeqGenModel {
    let dims = spec.gen_dims();
    let mut stream = NormalStream::new(spec.seed);
    let mut params = ModelParams::new();
    for (name, shape) in dims.param_specs() {
        let n: usize = shape.iter().product();
        let half = if name == "gen.out_w_z" {
            spec.wide_init
        } else {
            spec.narrow_init
        };
        let data: Vec<f64> = if half == 0.0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| stream.uniform(-half, half)).collect()
        };
        params.insert(name, Tensor::new(shape, data));
    }
    SeqGenModel::new(dims, params).expect("spec shapes are consistent")
}

fn sample_split(
    oracle: &SeqGenModel,
    spec: &OracleSpec,
    split_tag: u64,
    count: usize,
) -> Vec<Vec<usize>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = rng::derive_path(spec.seed, &[split_tag, i as u64]);
            let mut stream = NormalStream::new(seed);
            let z: Vec<f64> = (0..spec.latent).map(|_| stream.next()).collect();
            oracle.sample_sequence(&z, spec.seq_len, 1.0, &mut stream)
        })
        .collect()
}

/// Ancestral sampling: a fresh latent per example, then token-by-token
/// categorical draws. Fully reproducible from the spec seed regardless of
/// thread schedule.
pub fn sample_dataset(oracle: &SeqGenModel, spec: &OracleSpec) -> Dataset {
    Dataset {
        train: sample_split(oracle, spec, 1, spec.n_train),
        valid: sample_split(oracle, spec, 2, spec.n_valid),
        test: sample_split(oracle, spec, 3, spec.n_test),
    }
}

/// Monte-Carlo estimate of mean negative log marginal likelihood:
/// mean over examples of -log( (1/S) sum_s p(x | z_s) ), z_s ~ N(0, I),
/// accumulated in log space.
pub fn true_nll_estimate(
    oracle: &SeqGenModel,
    sequences: &[Vec<usize>],
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    assert!(n_samples >= 1);
    let per_example: Vec<f64> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let cache = oracle.forward_cache(x)?;
            let mut stream = NormalStream::new(rng::derive(seed, i as u64));
            let mut log_ps = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                let z: Vec<f64> = (0..oracle.dims.latent).map(|_| stream.next()).collect();
                log_ps.push(oracle.log_likelihood_cached(&cache, x, &z));
            }
            Ok(-(kernels::log_sum_exp(&log_ps) - (n_samples as f64).ln()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(per_example.iter().sum::<f64>() / sequences.len() as f64)
}

// ── Dataset files ────────────────────────────────────────────────────

/// Sidecar describing how a serialized dataset was produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub seed: u64,
    pub oracle_checkpoint: String,
    pub spec: OracleSpec,
    pub splits: Vec<(String, usize)>,
}

fn write_split(path: &Path, sequences: &[Vec<usize>]) -> Result<()> {
    let mut out = String::new();
    for seq in sequences {
        let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Newline-delimited integer-token reader; shared by the synthetic pipeline
/// and any external tokenized corpus.
pub fn read_token_file(path: &Path) -> Result<Vec<Vec<usize>>> {
    let content =
        fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (lineno, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let seq: std::result::Result<Vec<usize>, _> =
            line.split_whitespace().map(|t| t.parse::<usize>()).collect();
        match seq {
            Ok(s) => out.push(s),
            Err(_) => {
                return Err(Error::format(
                    path.display().to_string(),
                    format!("line {}: not an integer token sequence", lineno + 1),
                ))
            }
        }
    }
    Ok(out)
}

pub struct DatasetPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    pub test: PathBuf,
    pub sidecar: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            train: dir.join("train.tokens"),
            valid: dir.join("valid.tokens"),
            test: dir.join("test.tokens"),
            sidecar: dir.join("dataset.json"),
        }
    }
}

pub fn write_dataset(dir: &Path, data: &Dataset, sidecar: &DatasetSidecar) -> Result<DatasetPaths> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let paths = DatasetPaths::in_dir(dir);
    write_split(&paths.train, &data.train)?;
    write_split(&paths.valid, &data.valid)?;
    write_split(&paths.test, &data.test)?;
    let json = serde_json::to_string_pretty(sidecar)
        .map_err(|e| Error::format(paths.sidecar.display().to_string(), e.to_string()))?;
    fs::write(&paths.sidecar, json)
        .map_err(|e| Error::io(paths.sidecar.display().to_string(), e))?;
    Ok(paths)
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetSidecar)> {
    let paths = DatasetPaths::in_dir(dir);
    let sidecar_text = fs::read_to_string(&paths.sidecar)
        .map_err(|e| Error::io(paths.sidecar.display().to_string(), e))?;
    let sidecar: DatasetSidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::format(paths.sidecar.display().to_string(), e.to_string()))?;
    Ok((
        Dataset {
            train: read_token_file(&paths.train)?,
            valid: read_token_file(&paths.valid)?,
            test: read_token_file(&paths.test)?,
        },
        sidecar,
    ))
}
