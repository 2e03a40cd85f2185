//! Sequence models: LSTM generator and LSTM encoder.
//!
//! The generator is teacher-forced and conditions every output step on the
//! latent vector. Two latent wirings are supported: `OutputMlp` feeds z into
//! the output projection at every step (the synthetic-oracle shape), and
//! `HiddenInit` predicts the initial hidden state from z and concatenates z
//! with the word embedding at every step.
//!
//! Every forward quantity can be produced two ways: recorded on a tape for
//! differentiation, or computed plainly through the same kernels. The two
//! paths yield bit-identical values, which is what makes the decoder state
//! cache safe: when only the variational parameters need gradients and the
//! wiring is `OutputMlp`, the hidden-state sweep does not depend on z and
//! can be computed once per (model, sequence) and replayed as constants.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels;
use crate::params::ModelParams;
use crate::rng::NormalStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::variational::VarParams;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentWiring {
    /// z is concatenated with the hidden state inside the output projection.
    OutputMlp,
    /// z predicts the initial hidden state and joins the input embedding.
    HiddenInit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
    pub wiring: LatentWiring,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl GenDims {
    /// Input width of the LSTM, depending on whether z rides along.
    fn lstm_in(&self) -> usize {
        match self.wiring {
            LatentWiring::OutputMlp => self.embed,
            LatentWiring::HiddenInit => self.embed + self.latent,
        }
    }

    /// Parameter names and shapes, in canonical order.
    pub fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut specs = vec![
            // extra row is the begin-of-sequence embedding
            ("gen.embed", vec![self.vocab + 1, self.embed]),
            ("gen.lstm_w", vec![4 * self.hidden, self.lstm_in() + self.hidden]),
            ("gen.lstm_b", vec![4 * self.hidden]),
            ("gen.out_w_h", vec![self.vocab, self.hidden]),
            ("gen.out_b", vec![self.vocab]),
        ];
        match self.wiring {
            LatentWiring::OutputMlp => {
                specs.push(("gen.out_w_z", vec![self.vocab, self.latent]));
            }
            LatentWiring::HiddenInit => {
                specs.push(("gen.z_to_h", vec![self.hidden, self.latent]));
                specs.push(("gen.z_to_h_b", vec![self.hidden]));
            }
        }
        specs
    }
}

impl EncDims {
    pub fn param_specs(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("enc.embed", vec![self.vocab, self.embed]),
            ("enc.lstm_w", vec![4 * self.hidden, self.embed + self.hidden]),
            ("enc.lstm_b", vec![4 * self.hidden]),
            ("enc.out_w", vec![2 * self.latent, self.hidden]),
            ("enc.out_b", vec![2 * self.latent]),
        ]
    }
}

fn validate_params(params: &ModelParams, specs: &[(&'static str, Vec<usize>)]) -> Result<()> {
    for (name, shape) in specs {
        let t = params.require(name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::ShapeError {
                op: "model_params",
                lhs: t.shape().to_vec(),
                rhs: shape.clone(),
            });
        }
    }
    Ok(())
}

/// Uniform init over (-scale, scale); biases zero except forget-gate bias 1.
fn init_params(
    specs: &[(&'static str, Vec<usize>)],
    scale: f64,
    hidden: usize,
    seed: u64,
) -> ModelParams {
    let mut stream = NormalStream::new(seed);
    let mut params = ModelParams::new();
    for (name, shape) in specs {
        let n: usize = shape.iter().product();
        let data = if name.ends_with("_b") || name.ends_with(".out_b") {
            let mut b = vec![0.0; n];
            if name.ends_with("lstm_b") {
                for v in &mut b[hidden..2 * hidden] {
                    *v = 1.0;
                }
            }
            b
        } else {
            (0..n).map(|_| stream.uniform(-scale, scale)).collect()
        };
        params.insert(*name, Tensor::new(shape.clone(), data));
    }
    params
}

// ── Generator ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SeqGenModel {
    pub dims: GenDims,
    pub params: ModelParams,
}

/// Hidden-state sweep of the generator for one sequence: per-step logit
/// bases u_t = out_w_h @ h_t + out_b. Valid only for the OutputMlp wiring,
/// where h_t does not depend on z.
pub struct GenForwardCache {
    logit_bases: Vec<Arc<Vec<f64>>>,
}

/// Tape handles for the generator parameters.
pub struct GenVars {
    pub embed: Var,
    pub lstm_w: Var,
    pub lstm_b: Var,
    pub out_w_h: Var,
    pub out_b: Var,
    pub out_w_z: Option<Var>,
    pub z_to_h: Option<Var>,
    pub z_to_h_b: Option<Var>,
}

impl SeqGenModel {
    pub fn new(dims: GenDims, params: ModelParams) -> Result<Self> {
        validate_params(&params, &dims.param_specs())?;
        Ok(SeqGenModel { dims, params })
    }

    /// Learned-model initialization: weights U(-scale, scale), zero biases
    /// except the forget-gate bias at 1.
    pub fn init_uniform(dims: GenDims, scale: f64, seed: u64) -> Self {
        let params = init_params(&dims.param_specs(), scale, dims.hidden, seed);
        SeqGenModel { dims, params }
    }

    pub fn bos_token(&self) -> usize {
        self.dims.vocab
    }

    fn check_tokens(&self, x: &[usize]) -> Result<()> {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        for &tok in x {
            if tok >= self.dims.vocab {
                return Err(Error::VocabError {
                    token: tok,
                    vocab: self.dims.vocab,
                });
            }
        }
        Ok(())
    }

    /// Register generator parameters on a tape.
    pub fn vars(&self, tape: &mut Tape, requires_grad: bool) -> GenVars {
        let mut get = |name: &str| tape.leaf(name, self.params.get(name).unwrap(), requires_grad);
        GenVars {
            embed: get("gen.embed"),
            lstm_w: get("gen.lstm_w"),
            lstm_b: get("gen.lstm_b"),
            out_w_h: get("gen.out_w_h"),
            out_b: get("gen.out_b"),
            out_w_z: self.params.get("gen.out_w_z").map(|_| get("gen.out_w_z")),
            z_to_h: self.params.get("gen.z_to_h").map(|_| get("gen.z_to_h")),
            z_to_h_b: self.params.get("gen.z_to_h_b").map(|_| get("gen.z_to_h_b")),
        }
    }

    /// Teacher-forced negative log-likelihood graph: -sum_t log p(x_t | x_{<t}, z).
    pub fn nll_graph(&self, tape: &mut Tape, vars: &GenVars, x: &[usize], z: Var) -> Result<Var> {
        self.check_tokens(x)?;
        let h_dim = self.dims.hidden;

        let mut h = tape.constant_vec(vec![0.0; h_dim]);
        let mut c = tape.constant_vec(vec![0.0; h_dim]);
        if self.dims.wiring == LatentWiring::HiddenInit {
            let w = vars.z_to_h.expect("hidden-init wiring has z_to_h");
            let b = vars.z_to_h_b.expect("hidden-init wiring has z_to_h_b");
            let proj = tape.matmul(w, z)?;
            h = tape.add(proj, b)?;
        }

        // z contribution to the logits is step-independent in this wiring
        let r = match self.dims.wiring {
            LatentWiring::OutputMlp => {
                let w = vars.out_w_z.expect("output-mlp wiring has out_w_z");
                Some(tape.matmul(w, z)?)
            }
            LatentWiring::HiddenInit => None,
        };

        let mut total: Option<Var> = None;
        let mut prev = self.bos_token();
        for &tok in x {
            let e = tape.embedding_lookup(vars.embed, prev)?;
            let step_in = match self.dims.wiring {
                LatentWiring::OutputMlp => e,
                LatentWiring::HiddenInit => tape.concat(&[e, z])?,
            };
            let (nh, nc) = lstm_step_graph(tape, vars.lstm_w, vars.lstm_b, step_in, h, c, h_dim)?;
            h = nh;
            c = nc;
            let u = tape.matmul(vars.out_w_h, h)?;
            let ub = tape.add(u, vars.out_b)?;
            let logits = match r {
                Some(rv) => tape.add(ub, rv)?,
                None => ub,
            };
            let nll_t = tape.softmax_cross_entropy(logits, tok)?;
            total = Some(match total {
                None => nll_t,
                Some(acc) => tape.add(acc, nll_t)?,
            });
            prev = tok;
        }
        Ok(total.expect("nonempty sequence"))
    }

    /// NLL of only the last token of `prefix`, conditioned on the earlier
    /// ones: -log p(prefix[last] | prefix[..last], z). Saliency measures
    /// per-token gradients with this.
    pub fn nll_prefix_graph(
        &self,
        tape: &mut Tape,
        vars: &GenVars,
        prefix: &[usize],
        z: Var,
    ) -> Result<Var> {
        self.check_tokens(prefix)?;
        let h_dim = self.dims.hidden;
        let mut h = tape.constant_vec(vec![0.0; h_dim]);
        let mut c = tape.constant_vec(vec![0.0; h_dim]);
        if self.dims.wiring == LatentWiring::HiddenInit {
            let w = vars.z_to_h.expect("hidden-init wiring has z_to_h");
            let b = vars.z_to_h_b.expect("hidden-init wiring has z_to_h_b");
            let proj = tape.matmul(w, z)?;
            h = tape.add(proj, b)?;
        }
        let r = match self.dims.wiring {
            LatentWiring::OutputMlp => {
                let w = vars.out_w_z.expect("output-mlp wiring has out_w_z");
                Some(tape.matmul(w, z)?)
            }
            LatentWiring::HiddenInit => None,
        };
        let mut prev = self.bos_token();
        let mut nll = None;
        for (t, &tok) in prefix.iter().enumerate() {
            let e = tape.embedding_lookup(vars.embed, prev)?;
            let step_in = match self.dims.wiring {
                LatentWiring::OutputMlp => e,
                LatentWiring::HiddenInit => tape.concat(&[e, z])?,
            };
            let (nh, nc) = lstm_step_graph(tape, vars.lstm_w, vars.lstm_b, step_in, h, c, h_dim)?;
            h = nh;
            c = nc;
            if t == prefix.len() - 1 {
                let u = tape.matmul(vars.out_w_h, h)?;
                let ub = tape.add(u, vars.out_b)?;
                let logits = match r {
                    Some(rv) => tape.add(ub, rv)?,
                    None => ub,
                };
                nll = Some(tape.softmax_cross_entropy(logits, tok)?);
            }
            prev = tok;
        }
        Ok(nll.expect("nonempty prefix"))
    }

    /// Hidden-state sweep through the plain kernels; see `GenForwardCache`.
    pub fn forward_cache(&self, x: &[usize]) -> Result<GenForwardCache> {
        if self.dims.wiring != LatentWiring::OutputMlp {
            return Err(Error::Config(
                "decoder state cache requires the output-mlp wiring".into(),
            ));
        }
        self.check_tokens(x)?;
        let h_dim = self.dims.hidden;
        let embed = self.params.get("gen.embed").unwrap().data();
        let w = self.params.get("gen.lstm_w").unwrap().data();
        let b = self.params.get("gen.lstm_b").unwrap().data();
        let out_w_h = self.params.get("gen.out_w_h").unwrap().data();
        let out_b = self.params.get("gen.out_b").unwrap().data();

        let e_dim = self.dims.embed;
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut bases = Vec::with_capacity(x.len());
        let mut prev = self.bos_token();
        let mut step_in = vec![0.0; e_dim + h_dim];
        for &tok in x {
            step_in[..e_dim].copy_from_slice(&embed[prev * e_dim..(prev + 1) * e_dim]);
            step_in[e_dim..].copy_from_slice(&h);
            lstm_step_plain(w, b, &step_in, &mut h, &mut c, h_dim);
            let mut u = vec![0.0; self.dims.vocab];
            kernels::matvec(out_w_h, &h, self.dims.vocab, h_dim, &mut u);
            for (ui, bi) in u.iter_mut().zip(out_b) {
                *ui += bi;
            }
            bases.push(Arc::new(u));
            prev = tok;
        }
        Ok(GenForwardCache { logit_bases: bases })
    }

    /// NLL graph over a cached hidden-state sweep: only the z pathway is
    /// recorded. Bit-identical to `nll_graph` with the same inputs.
    pub fn nll_graph_cached(
        &self,
        tape: &mut Tape,
        cache: &GenForwardCache,
        x: &[usize],
        z: Var,
    ) -> Result<Var> {
        debug_assert_eq!(self.dims.wiring, LatentWiring::OutputMlp);
        if cache.logit_bases.len() != x.len() {
            return Err(Error::TraceMismatch(format!(
                "cache built for {} steps, sequence has {}",
                cache.logit_bases.len(),
                x.len()
            )));
        }
        self.check_tokens(x)?;
        let out_w_z = tape.constant(self.params.get("gen.out_w_z").unwrap());
        let r = tape.matmul(out_w_z, z)?;
        let mut total: Option<Var> = None;
        for (t, &tok) in x.iter().enumerate() {
            let ub = tape.constant(&Tensor::from_shared(
                vec![self.dims.vocab],
                Arc::clone(&cache.logit_bases[t]),
                None,
            ));
            let logits = tape.add(ub, r)?;
            let nll_t = tape.softmax_cross_entropy(logits, tok)?;
            total = Some(match total {
                None => nll_t,
                Some(acc) => tape.add(acc, nll_t)?,
            });
        }
        Ok(total.expect("nonempty sequence"))
    }

    /// Plain log-likelihood: sum_t log p(x_t | x_{<t}, z).
    pub fn log_likelihood(&self, x: &[usize], z: &[f64]) -> Result<f64> {
        let cacheable = self.dims.wiring == LatentWiring::OutputMlp;
        if cacheable {
            let cache = self.forward_cache(x)?;
            Ok(self.log_likelihood_cached(&cache, x, z))
        } else {
            // hidden-init wiring: run the taped graph without gradients
            let mut tape = Tape::new(0);
            let vars = self.vars(&mut tape, false);
            let zc = tape.constant_vec(z.to_vec());
            let nll = self.nll_graph(&mut tape, &vars, x, zc)?;
            Ok(-tape.scalar_value(nll))
        }
    }

    /// Plain log-likelihood over a cached sweep; the hot path of the
    /// marginal-likelihood estimator.
    pub fn log_likelihood_cached(&self, cache: &GenForwardCache, x: &[usize], z: &[f64]) -> f64 {
        let v = self.dims.vocab;
        let out_w_z = self.params.get("gen.out_w_z").unwrap().data();
        let mut r = vec![0.0; v];
        kernels::matvec(out_w_z, z, v, self.dims.latent, &mut r);
        let mut logits = vec![0.0; v];
        let mut ll = 0.0;
        for (t, &tok) in x.iter().enumerate() {
            let base = &cache.logit_bases[t];
            for i in 0..v {
                logits[i] = base[i] + r[i];
            }
            ll -= kernels::log_sum_exp(&logits) - logits[tok];
        }
        ll
    }

    /// Ancestral sampling with a softmax temperature.
    pub fn sample_sequence(
        &self,
        z: &[f64],
        steps: usize,
        temperature: f64,
        stream: &mut NormalStream,
    ) -> Vec<usize> {
        let h_dim = self.dims.hidden;
        let e_dim = self.dims.embed;
        let v = self.dims.vocab;
        let embed = self.params.get("gen.embed").unwrap().data();
        let w = self.params.get("gen.lstm_w").unwrap().data();
        let b = self.params.get("gen.lstm_b").unwrap().data();
        let out_w_h = self.params.get("gen.out_w_h").unwrap().data();
        let out_b = self.params.get("gen.out_b").unwrap().data();

        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut r = vec![0.0; v];
        match self.dims.wiring {
            LatentWiring::OutputMlp => {
                let out_w_z = self.params.get("gen.out_w_z").unwrap().data();
                kernels::matvec(out_w_z, z, v, self.dims.latent, &mut r);
            }
            LatentWiring::HiddenInit => {
                let zh = self.params.get("gen.z_to_h").unwrap().data();
                let zb = self.params.get("gen.z_to_h_b").unwrap().data();
                kernels::matvec(zh, z, h_dim, self.dims.latent, &mut h);
                for (hi, bi) in h.iter_mut().zip(zb) {
                    *hi += bi;
                }
            }
        }

        let lstm_in = self.dims.lstm_in();
        let mut step_in = vec![0.0; lstm_in + h_dim];
        let mut out = Vec::with_capacity(steps);
        let mut prev = self.bos_token();
        let mut logits = vec![0.0; v];
        let mut probs = vec![0.0; v];
        for _ in 0..steps {
            step_in[..e_dim].copy_from_slice(&embed[prev * e_dim..(prev + 1) * e_dim]);
            if self.dims.wiring == LatentWiring::HiddenInit {
                step_in[e_dim..e_dim + self.dims.latent].copy_from_slice(z);
            }
            step_in[lstm_in..].copy_from_slice(&h);
            lstm_step_plain(w, b, &step_in, &mut h, &mut c, h_dim);
            kernels::matvec(out_w_h, &h, v, h_dim, &mut logits);
            for i in 0..v {
                logits[i] += out_b[i];
                if self.dims.wiring == LatentWiring::OutputMlp {
                    logits[i] += r[i];
                }
                logits[i] /= temperature;
            }
            kernels::softmax(&logits, &mut probs);
            let tok = stream.categorical(&probs);
            out.push(tok);
            prev = tok;
        }
        out
    }
}

/// Per-token log-likelihoods under teacher forcing (plain path).
pub fn per_token_log_likelihood(gen: &SeqGenModel, x: &[usize], z: &[f64]) -> Result<Vec<f64>> {
    match gen.dims.wiring {
        LatentWiring::OutputMlp => {
            let cache = gen.forward_cache(x)?;
            let v = gen.dims.vocab;
            let out_w_z = gen.params.get("gen.out_w_z").unwrap().data();
            let mut r = vec![0.0; v];
            kernels::matvec(out_w_z, z, v, gen.dims.latent, &mut r);
            let mut logits = vec![0.0; v];
            Ok(x.iter()
                .enumerate()
                .map(|(t, &tok)| {
                    for i in 0..v {
                        logits[i] = cache.logit_bases[t][i] + r[i];
                    }
                    logits[tok] - kernels::log_sum_exp(&logits)
                })
                .collect())
        }
        LatentWiring::HiddenInit => {
            let mut tape = Tape::new(0);
            let vars = gen.vars(&mut tape, false);
            let zc = tape.constant_vec(z.to_vec());
            let mut out = Vec::with_capacity(x.len());
            let mut c = tape.constant_vec(vec![0.0; gen.dims.hidden]);
            let proj = tape.matmul(vars.z_to_h.unwrap(), zc)?;
            let mut h = tape.add(proj, vars.z_to_h_b.unwrap())?;
            let mut prev = gen.bos_token();
            for &tok in x {
                let e = tape.embedding_lookup(vars.embed, prev)?;
                let step_in = tape.concat(&[e, zc])?;
                let (nh, nc) =
                    lstm_step_graph(&mut tape, vars.lstm_w, vars.lstm_b, step_in, h, c, gen.dims.hidden)?;
                h = nh;
                c = nc;
                let u = tape.matmul(vars.out_w_h, h)?;
                let logits = tape.add(u, vars.out_b)?;
                let nll_t = tape.softmax_cross_entropy(logits, tok)?;
                out.push(-tape.scalar_value(nll_t));
                prev = tok;
            }
            Ok(out)
        }
    }
}

// ── Encoder ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SeqEncoder {
    pub dims: EncDims,
    pub params: ModelParams,
}

pub struct EncVars {
    pub embed: Var,
    pub lstm_w: Var,
    pub lstm_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl SeqEncoder {
    pub fn new(dims: EncDims, params: ModelParams) -> Result<Self> {
        validate_params(&params, &dims.param_specs())?;
        Ok(SeqEncoder { dims, params })
    }

    pub fn init_uniform(dims: EncDims, scale: f64, seed: u64) -> Self {
        let params = init_params(&dims.param_specs(), scale, dims.hidden, seed);
        SeqEncoder { dims, params }
    }

    pub fn vars(&self, tape: &mut Tape, requires_grad: bool) -> EncVars {
        let mut get = |name: &str| tape.leaf(name, self.params.get(name).unwrap(), requires_grad);
        EncVars {
            embed: get("enc.embed"),
            lstm_w: get("enc.lstm_w"),
            lstm_b: get("enc.lstm_b"),
            out_w: get("enc.out_w"),
            out_b: get("enc.out_b"),
        }
    }

    /// Encoder graph producing (mu, logvar). The log-variance head is
    /// clamped to the variational bound so downstream sampling stays finite.
    /// Returns the per-position embedding vars as well (saliency needs the
    /// gradient at the consumed embedding rows).
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        vars: &EncVars,
        x: &[usize],
    ) -> Result<(Var, Var, Vec<Var>)> {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        for &tok in x {
            if tok >= self.dims.vocab {
                return Err(Error::VocabError {
                    token: tok,
                    vocab: self.dims.vocab,
                });
            }
        }
        let h_dim = self.dims.hidden;
        let mut h = tape.constant_vec(vec![0.0; h_dim]);
        let mut c = tape.constant_vec(vec![0.0; h_dim]);
        let mut embeds = Vec::with_capacity(x.len());
        for &tok in x {
            let e = tape.embedding_lookup(vars.embed, tok)?;
            embeds.push(e);
            let (nh, nc) = lstm_step_graph(tape, vars.lstm_w, vars.lstm_b, e, h, c, h_dim)?;
            h = nh;
            c = nc;
        }
        let proj = tape.matmul(vars.out_w, h)?;
        let lam = tape.add(proj, vars.out_b)?;
        let d = self.dims.latent;
        let mu = tape.slice(lam, 0, d)?;
        let lv_raw = tape.slice(lam, d, d)?;
        let lv = tape.clamp(lv_raw, -VarParams::LOG_VAR_BOUND, VarParams::LOG_VAR_BOUND)?;
        Ok((mu, lv, embeds))
    }

    /// Encoder parameter vars without the embedding table (saliency feeds
    /// per-position embedding leaves instead).
    pub fn vars_no_embed(&self, tape: &mut Tape) -> EncVars {
        let mut get = |name: &str| tape.leaf(name, self.params.get(name).unwrap(), false);
        let embed = get("enc.embed");
        EncVars {
            embed,
            lstm_w: get("enc.lstm_w"),
            lstm_b: get("enc.lstm_b"),
            out_w: get("enc.out_w"),
            out_b: get("enc.out_b"),
        }
    }

    /// The embedding vectors consumed at each position, registered as
    /// gradient leaves so per-position input gradients can be read back.
    pub fn embed_leaves(&self, tape: &mut Tape, x: &[usize]) -> Result<Vec<Var>> {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        let table = self.params.get("enc.embed").unwrap();
        let e_dim = self.dims.embed;
        x.iter()
            .enumerate()
            .map(|(t, &tok)| {
                if tok >= self.dims.vocab {
                    return Err(Error::VocabError {
                        token: tok,
                        vocab: self.dims.vocab,
                    });
                }
                let row = Tensor::vector(table.data()[tok * e_dim..(tok + 1) * e_dim].to_vec());
                Ok(tape.leaf(format!("w_{t}"), &row, true))
            })
            .collect()
    }

    /// Encoder graph over externally supplied per-position embedding vars.
    pub fn encode_graph_from_embeds(
        &self,
        tape: &mut Tape,
        vars: &EncVars,
        embeds: &[Var],
    ) -> Result<(Var, Var)> {
        if embeds.is_empty() {
            return Err(Error::EmptyInput);
        }
        let h_dim = self.dims.hidden;
        let mut h = tape.constant_vec(vec![0.0; h_dim]);
        let mut c = tape.constant_vec(vec![0.0; h_dim]);
        for &e in embeds {
            let (nh, nc) = lstm_step_graph(tape, vars.lstm_w, vars.lstm_b, e, h, c, h_dim)?;
            h = nh;
            c = nc;
        }
        let proj = tape.matmul(vars.out_w, h)?;
        let lam = tape.add(proj, vars.out_b)?;
        let d = self.dims.latent;
        let mu = tape.slice(lam, 0, d)?;
        let lv_raw = tape.slice(lam, d, d)?;
        let lv = tape.clamp(lv_raw, -VarParams::LOG_VAR_BOUND, VarParams::LOG_VAR_BOUND)?;
        Ok((mu, lv))
    }

    /// Plain encoding; bit-identical to the taped graph.
    pub fn encode(&self, x: &[usize]) -> Result<VarParams> {
        if x.is_empty() {
            return Err(Error::EmptyInput);
        }
        let h_dim = self.dims.hidden;
        let e_dim = self.dims.embed;
        let embed = self.params.get("enc.embed").unwrap().data();
        let w = self.params.get("enc.lstm_w").unwrap().data();
        let b = self.params.get("enc.lstm_b").unwrap().data();
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        let mut step_in = vec![0.0; e_dim + h_dim];
        for &tok in x {
            if tok >= self.dims.vocab {
                return Err(Error::VocabError {
                    token: tok,
                    vocab: self.dims.vocab,
                });
            }
            step_in[..e_dim].copy_from_slice(&embed[tok * e_dim..(tok + 1) * e_dim]);
            step_in[e_dim..].copy_from_slice(&h);
            lstm_step_plain(w, b, &step_in, &mut h, &mut c, h_dim);
        }
        let d = self.dims.latent;
        let out_w = self.params.get("enc.out_w").unwrap().data();
        let out_b = self.params.get("enc.out_b").unwrap().data();
        let mut lam = vec![0.0; 2 * d];
        kernels::matvec(out_w, &h, 2 * d, h_dim, &mut lam);
        for (l, bi) in lam.iter_mut().zip(out_b) {
            *l += bi;
        }
        let mu = lam[..d].to_vec();
        let bound = VarParams::LOG_VAR_BOUND;
        let lv = lam[d..].iter().map(|v| v.clamp(-bound, bound)).collect();
        Ok(VarParams::new(mu, lv))
    }
}

// ── LSTM cell ────────────────────────────────────────────────────────

/// One LSTM step on the tape. Gate layout along the 4H axis: input, forget,
/// cell, output. `step_in` excludes the recurrent part; it is concatenated
/// with h inside.
fn lstm_step_graph(
    tape: &mut Tape,
    w: Var,
    b: Var,
    step_in: Var,
    h: Var,
    c: Var,
    h_dim: usize,
) -> Result<(Var, Var)> {
    let full_in = tape.concat(&[step_in, h])?;
    let pre = tape.matmul(w, full_in)?;
    let gates = tape.add(pre, b)?;
    let i_pre = tape.slice(gates, 0, h_dim)?;
    let f_pre = tape.slice(gates, h_dim, h_dim)?;
    let g_pre = tape.slice(gates, 2 * h_dim, h_dim)?;
    let o_pre = tape.slice(gates, 3 * h_dim, h_dim)?;
    let i = tape.sigmoid(i_pre)?;
    let f = tape.sigmoid(f_pre)?;
    let g = tape.tanh(g_pre)?;
    let o = tape.sigmoid(o_pre)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let nc = tape.add(fc, ig)?;
    let tc = tape.tanh(nc)?;
    let nh = tape.mul(o, tc)?;
    Ok((nh, nc))
}

/// Plain LSTM step matching `lstm_step_graph` arithmetic exactly.
/// `step_in` must be the full concatenated input [x_in, h].
pub(crate) fn lstm_step_plain(
    w: &[f64],
    b: &[f64],
    step_in: &[f64],
    h: &mut [f64],
    c: &mut [f64],
    h_dim: usize,
) {
    let mut gates = vec![0.0; 4 * h_dim];
    kernels::matvec(w, step_in, 4 * h_dim, step_in.len(), &mut gates);
    for (g, bi) in gates.iter_mut().zip(b) {
        *g += bi;
    }
    for j in 0..h_dim {
        let i = kernels::sigmoid(gates[j]);
        let f = kernels::sigmoid(gates[h_dim + j]);
        let g = gates[2 * h_dim + j].tanh();
        let o = kernels::sigmoid(gates[3 * h_dim + j]);
        let nc = f * c[j] + i * g;
        c[j] = nc;
        h[j] = o * nc.tanh();
    }
}
