//! Training regimes, schedules, evaluation, and checkpointing.
//!
//! Five regimes share one batch loop and differ only in how the encoder and
//! generator gradients are produced:
//!
//! - `Vae`: one joint tape, reparameterized gradients at lambda_0.
//! - `Svi`: no encoder; random lambda_0, K refinement steps, partial
//!   generator gradient at lambda_K.
//! - `VaeSvi`: refinement as above; the encoder learns from the lambda_0
//!   ELBO gradient (no backprop through refinement).
//! - `VaeSviKl`: the encoder instead minimizes KL between the initial and
//!   final variational distributions, the latter held fixed.
//! - `SaVae`: full backprop through the refinement loop; the generator sees
//!   the total derivative and the encoder sees d loss / d lambda_0.
//!
//! Seed protocol: every (epoch, batch, slot) gets a derived example seed;
//! the chain seeds and the final-loss seed derive from it. A VAE step is the
//! K = 0 special case of an SA-VAE step under the same example seed,
//! bit for bit.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{EncDims, GenDims, SeqEncoder, SeqGenModel};
use crate::oracle::Dataset;
use crate::params::{load_checkpoint, save_checkpoint, ModelParams};
use crate::rng::{self, NormalStream};
use crate::svi::{svi_backward, svi_forward, ChainSeeds, SviConfig};
use crate::tape::Tape;
use crate::tensor::l2_norm;
use crate::variational::{gaussian_kl_graph, ElboEval, ElboObjective, GradWrt, VarParams};

/// Standard deviation of random variational initialization.
pub const RANDOM_INIT_SD: f64 = 0.1;

const EVAL_TAG: u64 = 0xe7a1;
const EPOCH_TAG: u64 = 0x5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Vae,
    Svi,
    VaeSvi,
    VaeSviKl,
    SaVae,
}

impl Regime {
    pub fn needs_encoder(&self) -> bool {
        !matches!(self, Regime::Svi)
    }

    pub fn parse(s: &str) -> Result<Regime> {
        match s {
            "vae" => Ok(Regime::Vae),
            "svi" => Ok(Regime::Svi),
            "vae_svi" => Ok(Regime::VaeSvi),
            "vae_svi_kl" => Ok(Regime::VaeSviKl),
            "sa_vae" => Ok(Regime::SaVae),
            other => Err(Error::Config(format!(
                "unknown regime {other:?}; expected one of vae, svi, vae_svi, vae_svi_kl, sa_vae"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Vae => "vae",
            Regime::Svi => "svi",
            Regime::VaeSvi => "vae_svi",
            Regime::VaeSviKl => "vae_svi_kl",
            Regime::SaVae => "sa_vae",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Schedule {
    pub lr: f64,
    pub decay_factor: f64,
    /// No decay during the first this-many epochs.
    pub decay_lock_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs over which the KL multiplier anneals linearly to 1; zero
    /// disables annealing (multiplier pinned at 1).
    pub kl_anneal_epochs: usize,
    pub kl_anneal_start: f64,
    /// Global gradient-norm clip applied before each parameter update.
    pub grad_clip: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            lr: 1.0,
            decay_factor: 2.0,
            decay_lock_epochs: 5,
            epochs: 20,
            batch_size: 50,
            kl_anneal_epochs: 0,
            kl_anneal_start: 0.1,
            grad_clip: 5.0,
        }
    }
}

/// KL multiplier for a zero-based global batch index:
/// min(1, start + (1 - start) * b / (anneal_epochs * batches_per_epoch)).
pub fn kl_multiplier(schedule: &Schedule, global_batch: usize, batches_per_epoch: usize) -> f64 {
    if schedule.kl_anneal_epochs == 0 {
        return 1.0;
    }
    let total = (schedule.kl_anneal_epochs * batches_per_epoch) as f64;
    let start = schedule.kl_anneal_start;
    (start + (1.0 - start) * global_batch as f64 / total).min(1.0)
}

/// Generator plus optional encoder.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub gen: SeqGenModel,
    pub enc: Option<SeqEncoder>,
}

impl Bundle {
    pub fn encoder(&self) -> Result<&SeqEncoder> {
        self.enc
            .as_ref()
            .ok_or_else(|| Error::Config("this regime requires an encoder".into()))
    }

    pub fn merged_params(&self) -> ModelParams {
        let mut out = ModelParams::new();
        for (name, t) in self.gen.params.iter() {
            out.insert(name, t.clone());
        }
        if let Some(enc) = &self.enc {
            for (name, t) in enc.params.iter() {
                out.insert(name, t.clone());
            }
        }
        out
    }
}

/// Dimensions sidecar stored next to every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BundleConfig {
    pub gen: GenDims,
    pub enc: Option<EncDims>,
}

pub fn save_bundle(bundle: &Bundle, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    save_checkpoint(&bundle.merged_params(), &dir.join(format!("{stem}.ckpt")))?;
    let cfg = BundleConfig {
        gen: bundle.gen.dims,
        enc: bundle.enc.as_ref().map(|e| e.dims),
    };
    let json = serde_json::to_string_pretty(&cfg).expect("serializable");
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_bundle(dir: &Path, stem: &str) -> Result<Bundle> {
    let json_path = dir.join(format!("{stem}.json"));
    let text =
        fs::read_to_string(&json_path).map_err(|e| Error::io(json_path.display().to_string(), e))?;
    let cfg: BundleConfig = serde_json::from_str(&text)
        .map_err(|e| Error::format(json_path.display().to_string(), e.to_string()))?;
    let merged = load_checkpoint(&dir.join(format!("{stem}.ckpt")))?;
    split_bundle(&cfg, &merged)
}

pub fn split_bundle(cfg: &BundleConfig, merged: &ModelParams) -> Result<Bundle> {
    let mut gen_params = ModelParams::new();
    let mut enc_params = ModelParams::new();
    for (name, t) in merged.iter() {
        if name.starts_with("gen.") {
            gen_params.insert(name, t.clone());
        } else if name.starts_with("enc.") {
            enc_params.insert(name, t.clone());
        }
    }
    let gen = SeqGenModel::new(cfg.gen, gen_params)?;
    let enc = match cfg.enc {
        Some(dims) => Some(SeqEncoder::new(dims, enc_params)?),
        None => None,
    };
    Ok(Bundle { gen, enc })
}

// ── Per-example gradient computation ─────────────────────────────────

struct StepGrads {
    phi: Option<ModelParams>,
    theta: Option<ModelParams>,
    eval: ElboEval,
    lambda_shift: f64,
}

/// Encoder forward on a tape, kept alive so d lambda_0 can be pushed back
/// through it later.
struct EncoderPass {
    tape: Tape,
    mu: crate::tape::Var,
    lv: crate::tape::Var,
    lambda0: VarParams,
}

fn encoder_pass(enc: &SeqEncoder, x: &[usize]) -> Result<EncoderPass> {
    let mut tape = Tape::new(0);
    let vars = enc.vars(&mut tape, true);
    let (mu, lv, _) = enc.encode_graph(&mut tape, &vars, x)?;
    let lambda0 = VarParams::new(tape.value(mu).to_vec(), tape.value(lv).to_vec());
    Ok(EncoderPass {
        tape,
        mu,
        lv,
        lambda0,
    })
}

fn backprop_encoder(mut pass: EncoderPass, d_lambda0: &[f64]) -> Result<ModelParams> {
    let d = pass.lambda0.dim();
    let seeds = vec![
        (pass.mu, d_lambda0[..d].to_vec()),
        (pass.lv, d_lambda0[d..].to_vec()),
    ];
    let grads = pass.tape.backward_seeded(&seeds)?;
    let mut phi = ModelParams::new();
    for (name, t) in grads.iter() {
        if name.starts_with("enc.") {
            phi.insert(name, t.clone());
        }
    }
    Ok(phi)
}

fn theta_partial_at(
    obj: &ElboObjective,
    lambda: &VarParams,
    seed: u64,
) -> Result<(ElboEval, ModelParams)> {
    let g = obj.grad(lambda, seed, GradWrt::LambdaAndTheta)?;
    Ok((g.eval, g.d_theta.expect("theta gradient requested")))
}

fn example_step(
    regime: Regime,
    bundle: &Bundle,
    x: &[usize],
    kl_mult: f64,
    svi_cfg: &SviConfig,
    train_theta: bool,
    loss_scale: f64,
    ex_seed: u64,
) -> Result<StepGrads> {
    let seeds = ChainSeeds::new(ex_seed);
    match regime {
        Regime::Vae => {
            // same graph shape as the chain objective so the K = 0 regimes
            // stay bit-identical
            let enc = bundle.encoder()?;
            let mut tape = Tape::new(seeds.final_seed());
            let enc_vars = enc.vars(&mut tape, true);
            let (mu, lv, _) = enc.encode_graph(&mut tape, &enc_vars, x)?;
            let z = tape.gaussian_sample(mu, lv)?;
            let gen_vars = bundle.gen.vars(&mut tape, train_theta);
            let recon_raw = bundle.gen.nll_graph(&mut tape, &gen_vars, x, z)?;
            let kl_raw = crate::variational::kl_graph(&mut tape, mu, lv)?;
            let recon = tape.scale_add(recon_raw, loss_scale, 0.0)?;
            let kl = tape.scale_add(kl_raw, loss_scale, 0.0)?;
            let kl_term = tape.scale_add(kl, kl_mult, 0.0)?;
            let loss = tape.add(recon, kl_term)?;
            let eval = ElboEval {
                neg_elbo: tape.scalar_value(loss),
                recon_nll: tape.scalar_value(recon),
                kl: tape.scalar_value(kl),
                noise_seed: seeds.final_seed(),
            };
            let grads = tape.backward_scalar(loss)?;
            let mut phi = ModelParams::new();
            let mut theta = ModelParams::new();
            for (name, t) in grads.iter() {
                if name.starts_with("enc.") {
                    phi.insert(name, t.clone());
                } else if name.starts_with("gen.") && train_theta {
                    theta.insert(name, t.clone());
                }
            }
            Ok(StepGrads {
                phi: Some(phi),
                theta: train_theta.then_some(theta),
                eval,
                lambda_shift: 0.0,
            })
        }
        Regime::Svi => {
            let lambda0 = VarParams::random_init(
                bundle.gen.dims.latent,
                RANDOM_INIT_SD,
                rng::derive(ex_seed, u64::MAX),
            );
            let obj =
                ElboObjective::new(&bundle.gen, x, kl_mult, false)?.with_loss_scale(loss_scale);
            let trace = svi_forward(&obj, &lambda0, svi_cfg, ex_seed)?;
            let shift = lambda_shift(&trace.lambdas);
            let (eval, theta) = if train_theta {
                let (e, t) = theta_partial_at(&obj, trace.lambda_final(), seeds.final_seed())?;
                (e, Some(t))
            } else {
                (trace.final_eval, None)
            };
            Ok(StepGrads {
                phi: None,
                theta,
                eval,
                lambda_shift: shift,
            })
        }
        Regime::VaeSvi | Regime::VaeSviKl => {
            let enc = bundle.encoder()?;
            let pass = encoder_pass(enc, x)?;
            let obj =
                ElboObjective::new(&bundle.gen, x, kl_mult, false)?.with_loss_scale(loss_scale);
            let trace = svi_forward(&obj, &pass.lambda0, svi_cfg, ex_seed)?;
            let shift = lambda_shift(&trace.lambdas);
            let (eval, theta) = if train_theta {
                let (e, t) = theta_partial_at(&obj, trace.lambda_final(), seeds.final_seed())?;
                (e, Some(t))
            } else {
                (trace.final_eval, None)
            };
            let phi = match regime {
                Regime::VaeSvi => {
                    // encoder objective: the ELBO at the initial parameters
                    let g = obj.grad(&pass.lambda0, seeds.final_seed(), GradWrt::Lambda)?;
                    backprop_encoder(pass, &g.d_lambda.expect("lambda gradient"))?
                }
                Regime::VaeSviKl => {
                    // encoder objective: KL[q(.; lambda_0) || q(.; lambda_K)]
                    let omega = trace.lambda_final().clone();
                    let mut pass = pass;
                    let g_raw =
                        gaussian_kl_graph(&mut pass.tape, pass.mu, pass.lv, &omega)?;
                    let g = pass.tape.scale_add(g_raw, loss_scale, 0.0)?;
                    let grads = pass.tape.backward_scalar(g)?;
                    let mut phi = ModelParams::new();
                    for (name, t) in grads.iter() {
                        if name.starts_with("enc.") {
                            phi.insert(name, t.clone());
                        }
                    }
                    phi
                }
                _ => unreachable!(),
            };
            Ok(StepGrads {
                phi: Some(phi),
                theta,
                eval,
                lambda_shift: shift,
            })
        }
        Regime::SaVae => {
            let enc = bundle.encoder()?;
            let pass = encoder_pass(enc, x)?;
            let obj = ElboObjective::new(&bundle.gen, x, kl_mult, train_theta)?
                .with_loss_scale(loss_scale);
            let trace = svi_forward(&obj, &pass.lambda0, svi_cfg, ex_seed)?;
            let shift = lambda_shift(&trace.lambdas);
            let eval = trace.final_eval;
            let grads = svi_backward(&obj, &trace, svi_cfg)?;
            let phi = backprop_encoder(pass, &grads.d_lambda0)?;
            Ok(StepGrads {
                phi: Some(phi),
                theta: grads.d_theta,
                eval,
                lambda_shift: shift,
            })
        }
    }
}

fn lambda_shift(lambdas: &[VarParams]) -> f64 {
    let first = lambdas.first().expect("nonempty").to_flat();
    let last = lambdas.last().expect("nonempty").to_flat();
    let diff: Vec<f64> = first.iter().zip(&last).map(|(a, b)| b - a).collect();
    l2_norm(&diff)
}

// ── Batch update ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct BatchStats {
    pub neg_elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub lambda_shift: f64,
    pub grad_norm: f64,
}

/// Compute per-example gradients (in parallel), average them in index
/// order, clip the joint norm, and apply one SGD update.
#[allow(clippy::too_many_arguments)]
pub fn apply_batch_update(
    regime: Regime,
    bundle: &mut Bundle,
    batch: &[&Vec<usize>],
    kl_mult: f64,
    svi_cfg: &SviConfig,
    lr: f64,
    grad_clip: f64,
    train_theta: bool,
    batch_seed: u64,
) -> Result<BatchStats> {
    let loss_scale = 1.0 / batch.len() as f64;
    let steps: Vec<StepGrads> = batch
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            example_step(
                regime,
                bundle,
                x,
                kl_mult,
                svi_cfg,
                train_theta,
                loss_scale,
                rng::derive(batch_seed, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let n = batch.len() as f64;
    let mut phi_grad = bundle
        .enc
        .as_ref()
        .filter(|_| regime.needs_encoder())
        .map(|e| e.params.zeros_like());
    let mut theta_grad = train_theta.then(|| bundle.gen.params.zeros_like());
    let (mut neg_elbo, mut recon, mut kl, mut shift) = (0.0, 0.0, 0.0, 0.0);
    // per-example losses and gradients already carry the 1/batch factor;
    // summing yields the batch-mean loss and its exact gradient
    for s in &steps {
        neg_elbo += s.eval.neg_elbo;
        recon += s.eval.recon_nll;
        kl += s.eval.kl;
        shift += s.lambda_shift / n;
        if let (Some(acc), Some(g)) = (phi_grad.as_mut(), s.phi.as_ref()) {
            acc.axpy(1.0, g)?;
        }
        if let (Some(acc), Some(g)) = (theta_grad.as_mut(), s.theta.as_ref()) {
            acc.axpy(1.0, g)?;
        }
    }

    // joint norm across everything being updated
    let mut sq = 0.0;
    if let Some(g) = &phi_grad {
        let nrm = g.l2_norm();
        sq += nrm * nrm;
    }
    if let Some(g) = &theta_grad {
        let nrm = g.l2_norm();
        sq += nrm * nrm;
    }
    let norm = sq.sqrt();
    let scale = if norm > grad_clip { grad_clip / norm } else { 1.0 };

    if let (Some(enc), Some(g)) = (bundle.enc.as_mut(), phi_grad.as_ref()) {
        enc.params.axpy(-lr * scale, g)?;
    }
    if let Some(g) = theta_grad.as_ref() {
        bundle.gen.params.axpy(-lr * scale, g)?;
    }

    Ok(BatchStats {
        neg_elbo,
        recon,
        kl,
        lambda_shift: shift,
        grad_norm: norm,
    })
}

// ── Evaluation ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    EncoderOnly,
    EncoderRefine(usize),
    RandomRefine(usize),
}

impl EvalMode {
    pub fn parse(mode: &str, steps: usize) -> Result<EvalMode> {
        match mode {
            "encoder" => Ok(EvalMode::EncoderOnly),
            "encoder-refine" => Ok(EvalMode::EncoderRefine(steps)),
            "random-refine" => Ok(EvalMode::RandomRefine(steps)),
            other => Err(Error::Config(format!(
                "unknown eval mode {other:?}; expected encoder, encoder-refine, random-refine"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalMetrics {
    pub neg_elbo: f64,
    pub recon: f64,
    pub kl: f64,
    /// exp(mean bound per token)
    pub ppl_bound: f64,
    pub n_examples: usize,
}

/// Mean variational bound over a split under the chosen inference mode.
/// KL multiplier is 1: this reports the actual bound. `loss_scale` sets the
/// refinement objective scale (1/batch-size under the training protocol);
/// reported metrics are per-example nats regardless.
pub fn evaluate(
    bundle: &Bundle,
    sequences: &[Vec<usize>],
    svi_cfg: &SviConfig,
    mode: EvalMode,
    loss_scale: f64,
    seed: u64,
) -> Result<EvalMetrics> {
    let evals: Vec<(ElboEval, usize)> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let ex_seed = rng::derive_path(seed, &[EVAL_TAG, i as u64]);
            let seeds = ChainSeeds::new(ex_seed);
            let obj =
                ElboObjective::new(&bundle.gen, x, 1.0, false)?.with_loss_scale(loss_scale);
            let eval = match mode {
                EvalMode::EncoderOnly => {
                    let lam = bundle.encoder()?.encode(x)?;
                    obj.eval(&lam, seeds.final_seed())?
                }
                EvalMode::EncoderRefine(k) => {
                    let lam = bundle.encoder()?.encode(x)?;
                    let mut cfg = svi_cfg.clone();
                    cfg.steps = k;
                    svi_forward(&obj, &lam, &cfg, ex_seed)?.final_eval
                }
                EvalMode::RandomRefine(k) => {
                    let lam = VarParams::random_init(
                        bundle.gen.dims.latent,
                        RANDOM_INIT_SD,
                        rng::derive(ex_seed, u64::MAX),
                    );
                    let mut cfg = svi_cfg.clone();
                    cfg.steps = k;
                    svi_forward(&obj, &lam, &cfg, ex_seed)?.final_eval
                }
            };
            Ok((eval, x.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = evals.len() as f64;
    let mut m = EvalMetrics {
        neg_elbo: 0.0,
        recon: 0.0,
        kl: 0.0,
        ppl_bound: 0.0,
        n_examples: evals.len(),
    };
    let mut total_tokens = 0usize;
    let mut total_bound = 0.0;
    for (e, tokens) in &evals {
        m.neg_elbo += e.neg_elbo / loss_scale / n;
        m.recon += e.recon_nll / loss_scale / n;
        m.kl += e.kl / loss_scale / n;
        total_bound += e.neg_elbo / loss_scale;
        total_tokens += tokens;
    }
    m.ppl_bound = (total_bound / total_tokens as f64).exp();
    Ok(m)
}

// ── Trainer ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSetup {
    pub regime: Regime,
    pub svi: SviCfgSerde,
    pub schedule: Schedule,
    /// Hold the generator fixed (inference-network-only training).
    pub oracle_fixed: bool,
    pub seed: u64,
}

/// Serializable mirror of SviConfig (the runtime struct carries hooks that
/// have no place in config files).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SviCfgSerde {
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub clip: f64,
    pub hvp_epsilon: f64,
}

impl Default for SviCfgSerde {
    fn default() -> Self {
        SviCfgSerde {
            steps: 20,
            learning_rate: 1.0,
            momentum: 0.5,
            clip: 5.0,
            hvp_epsilon: 1e-5,
        }
    }
}

impl SviCfgSerde {
    pub fn runtime(&self) -> SviConfig {
        SviConfig {
            steps: self.steps,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            clip: self.clip,
            hvp_epsilon: self.hvp_epsilon,
            hvp_clip: None,
            step_weights: None,
        }
    }
}

/// One metrics row: a (epoch, split) pair.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: String,
    pub neg_elbo: f64,
    pub recon: f64,
    pub kl: f64,
    pub lr: f64,
    pub kl_multiplier: f64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("epoch,split,neg_elbo,recon,kl,lr,kl_multiplier\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.split, r.neg_elbo, r.recon, r.kl, r.lr, r.kl_multiplier
        ));
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub rows: Vec<MetricsRow>,
    /// Per-epoch mean ||lambda_K - lambda_0|| (refinement-reliance diagnostic).
    pub lambda_shift: Vec<f64>,
    pub final_lr: f64,
}

/// Inference mode a regime uses for its own validation metric.
pub fn regime_eval_mode(regime: Regime, steps: usize) -> EvalMode {
    match regime {
        Regime::Vae => EvalMode::EncoderOnly,
        Regime::Svi => EvalMode::RandomRefine(steps),
        _ => EvalMode::EncoderRefine(steps),
    }
}

/// Run the full training loop, mutating the bundle in place. Checkpoints
/// land in `ckpt_dir` when provided (one per epoch plus `model`).
pub fn train(
    setup: &TrainSetup,
    bundle: &mut Bundle,
    data: &Dataset,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutput> {
    let svi_cfg = setup.svi.runtime();
    svi_cfg.validate()?;
    if setup.regime.needs_encoder() && bundle.enc.is_none() {
        return Err(Error::Config(format!(
            "regime {} requires an encoder",
            setup.regime.name()
        )));
    }
    if setup.schedule.batch_size == 0 || setup.schedule.epochs == 0 {
        return Err(Error::Config("batch size and epochs must be positive".into()));
    }
    let train_theta = !setup.oracle_fixed;
    if !train_theta && setup.regime == Regime::Svi {
        // nothing to learn: no encoder, generator fixed
    }

    let n = data.train.len();
    let bsz = setup.schedule.batch_size.min(n.max(1));
    let batches_per_epoch = n.div_ceil(bsz);
    let eval_seed = rng::derive(setup.seed, EVAL_TAG);

    let mut rows = Vec::new();
    let mut shifts = Vec::new();
    let mut lr = setup.schedule.lr;
    let mut best_val = f64::INFINITY;
    let mut decay_started = false;
    let mut global_batch = 0usize;

    for epoch in 0..setup.schedule.epochs {
        let mut order_stream = NormalStream::new(rng::derive_path(setup.seed, &[EPOCH_TAG, epoch as u64]));
        let order = order_stream.permutation(n);
        let (mut ep_loss, mut ep_recon, mut ep_kl, mut ep_shift) = (0.0, 0.0, 0.0, 0.0);
        let mut last_mult = 1.0;
        for (b, chunk) in order.chunks(bsz).enumerate() {
            let batch: Vec<&Vec<usize>> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mult = kl_multiplier(&setup.schedule, global_batch, batches_per_epoch);
            last_mult = mult;
            let batch_seed = rng::derive_path(setup.seed, &[7, epoch as u64, b as u64]);
            let stats = apply_batch_update(
                setup.regime,
                bundle,
                &batch,
                mult,
                &svi_cfg,
                lr,
                setup.schedule.grad_clip,
                train_theta,
                batch_seed,
            )?;
            let w = batch.len() as f64 / n as f64;
            ep_loss += stats.neg_elbo * w;
            ep_recon += stats.recon * w;
            ep_kl += stats.kl * w;
            ep_shift += stats.lambda_shift * w;
            global_batch += 1;
        }

        let val = evaluate(
            bundle,
            &data.valid,
            &svi_cfg,
            regime_eval_mode(setup.regime, svi_cfg.steps),
            1.0 / setup.schedule.batch_size as f64,
            eval_seed,
        )?;

        rows.push(MetricsRow {
            epoch,
            split: "train".into(),
            neg_elbo: ep_loss,
            recon: ep_recon,
            kl: ep_kl,
            lr,
            kl_multiplier: last_mult,
        });
        rows.push(MetricsRow {
            epoch,
            split: "valid".into(),
            neg_elbo: val.neg_elbo,
            recon: val.recon,
            kl: val.kl,
            lr,
            kl_multiplier: 1.0,
        });
        shifts.push(ep_shift);

        if let Some(dir) = ckpt_dir {
            save_bundle(bundle, dir, &format!("epoch_{epoch:03}"))?;
        }

        // decay gate: locked for the first `decay_lock_epochs` epochs; once
        // a post-lock epoch fails to improve validation, halve every epoch
        let improved = val.neg_elbo < best_val;
        if improved {
            best_val = val.neg_elbo;
        }
        if epoch + 1 > setup.schedule.decay_lock_epochs {
            if !decay_started && !improved {
                decay_started = true;
            }
            if decay_started {
                lr /= setup.schedule.decay_factor;
            }
        }
    }

    if let Some(dir) = ckpt_dir {
        save_bundle(bundle, dir, "model")?;
    }

    Ok(TrainOutput {
        rows,
        lambda_shift: shifts,
        final_lr: lr,
    })
}

// ── Spec-shaped single-step wrappers ─────────────────────────────────

/// One VAE batch update.
#[allow(clippy::too_many_arguments)]
pub fn train_step_vae(
    bundle: &mut Bundle,
    batch: &[&Vec<usize>],
    kl_mult: f64,
    lr: f64,
    grad_clip: f64,
    train_theta: bool,
    batch_seed: u64,
) -> Result<BatchStats> {
    let cfg = SviConfig::with_steps(0);
    apply_batch_update(
        Regime::Vae,
        bundle,
        batch,
        kl_mult,
        &cfg,
        lr,
        grad_clip,
        train_theta,
        batch_seed,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train_step_svi_only(
    bundle: &mut Bundle,
    batch: &[&Vec<usize>],
    kl_mult: f64,
    svi_cfg: &SviConfig,
    lr: f64,
    grad_clip: f64,
    train_theta: bool,
    batch_seed: u64,
) -> Result<BatchStats> {
    apply_batch_update(
        Regime::Svi,
        bundle,
        batch,
        kl_mult,
        svi_cfg,
        lr,
        grad_clip,
        train_theta,
        batch_seed,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train_step_vae_svi(
    bundle: &mut Bundle,
    batch: &[&Vec<usize>],
    kl_mult: f64,
    svi_cfg: &SviConfig,
    lr: f64,
    grad_clip: f64,
    train_theta: bool,
    batch_seed: u64,
) -> Result<BatchStats> {
    apply_batch_update(
        Regime::VaeSvi,
        bundle,
        batch,
        kl_mult,
        svi_cfg,
        lr,
        grad_clip,
        train_theta,
        batch_seed,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train_step_vae_svi_kl(
    bundle: &mut Bundle,
    batch: &[&Vec<usize>],
    kl_mult: f64,
    svi_cfg: &SviConfig,
    lr: f64,
    grad_clip: f64,
    train_theta: bool,
    batch_seed: u64,
) -> Result<BatchStats> {
    apply_batch_update(
        Regime::VaeSviKl,
        bundle,
        batch,
        kl_mult,
        svi_cfg,
        lr,
        grad_clip,
        train_theta,
        batch_seed,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train_step_sa_vae(
    bundle: &mut Bundle,
    batch: &[&Vec<usize>],
    kl_mult: f64,
    svi_cfg: &SviConfig,
    lr: f64,
    grad_clip: f64,
    train_theta: bool,
    batch_seed: u64,
) -> Result<BatchStats> {
    apply_batch_update(
        Regime::SaVae,
        bundle,
        batch,
        kl_mult,
        svi_cfg,
        lr,
        grad_clip,
        train_theta,
        batch_seed,
    )
}
