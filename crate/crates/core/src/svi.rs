//! Iterative variational refinement and its reverse pass.
//!
//! The forward loop runs momentum gradient descent on the negative ELBO
//! with norm clipping. The backward loop propagates the final loss through
//! every update using finite-difference Hessian-vector products, with
//! common random numbers: both gradient evaluations inside an HVP replay
//! the exact per-step noise seed recorded by the forward loop.

use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::rng;
use crate::tensor::{axpy, l2_norm};
use crate::variational::{ElboEval, ElboObjective, GradWrt, VarParams};

#[derive(Debug, Clone, PartialEq)]
pub struct SviConfig {
    /// Refinement steps K.
    pub steps: usize,
    /// Learning rate alpha.
    pub learning_rate: f64,
    /// Momentum gamma in [0, 1).
    pub momentum: f64,
    /// Norm-clipping threshold eta; infinity disables clipping.
    pub clip: f64,
    /// Finite-difference epsilon for Hessian-vector products.
    pub hvp_epsilon: f64,
    /// Ablation hook: clip applied to the raw HVP products themselves.
    /// `None` leaves the lambda-block product unclipped and clips the
    /// theta-block product at `clip`, the canonical backward pass.
    pub hvp_clip: Option<f64>,
    /// Optional weighted-sum objective: weight w_k on the loss at lambda_k,
    /// length K+1. `None` means w_k = 0 for k < K and w_K = 1.
    pub step_weights: Option<Vec<f64>>,
}

impl SviConfig {
    /// Paper defaults: lr 1.0, momentum 0.5, clip 5, epsilon 1e-5.
    pub fn with_steps(steps: usize) -> Self {
        SviConfig {
            steps,
            learning_rate: 1.0,
            momentum: 0.5,
            clip: 5.0,
            hvp_epsilon: 1e-5,
            hvp_clip: None,
            step_weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("svi learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("svi momentum must lie in [0, 1)".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("svi clip threshold must be positive".into()));
        }
        if !(self.hvp_epsilon > 0.0) {
            return Err(Error::Config("hvp epsilon must be positive".into()));
        }
        if let Some(w) = &self.step_weights {
            if w.len() != self.steps + 1 {
                return Err(Error::Config(format!(
                    "step_weights has {} entries, want K+1 = {}",
                    w.len(),
                    self.steps + 1
                )));
            }
        }
        Ok(())
    }

    fn weight(&self, k: usize) -> f64 {
        match &self.step_weights {
            Some(w) => w[k],
            None if k == self.steps => 1.0,
            None => 0.0,
        }
    }
}

/// Rescale `u` onto the eta-ball if its norm exceeds eta; direction kept.
pub fn clip(u: &[f64], eta: f64) -> Vec<f64> {
    let mut out = u.to_vec();
    clip_in_place(&mut out, eta);
    out
}

pub fn clip_in_place(u: &mut [f64], eta: f64) {
    let norm = l2_norm(u);
    if norm > eta {
        let s = eta / norm;
        for v in u.iter_mut() {
            *v *= s;
        }
    }
}

fn clip_params_in_place(p: &mut ModelParams, eta: f64) {
    let norm = p.l2_norm();
    if norm > eta {
        p.scale(eta / norm);
    }
}

/// Per-chain seed schedule: one seed per refinement step plus a distinct
/// seed for the final loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ChainSeeds {
    master: u64,
}

impl ChainSeeds {
    pub fn new(master: u64) -> Self {
        ChainSeeds { master }
    }

    pub fn step_seed(&self, k: usize) -> u64 {
        rng::derive(self.master, 1 + k as u64)
    }

    pub fn final_seed(&self) -> u64 {
        rng::derive(self.master, 0)
    }
}

/// Everything the reverse pass needs to replay a forward refinement run.
#[derive(Debug, Clone)]
pub struct SviTrace {
    /// lambda_0 ..= lambda_K.
    pub lambdas: Vec<VarParams>,
    /// v_0 ..= v_K (v_0 is zero).
    pub velocities: Vec<Vec<f64>>,
    /// Noise seed consumed by the gradient evaluation of each step.
    pub step_seeds: Vec<u64>,
    /// Loss evaluation at lambda_K under its own seed.
    pub final_eval: ElboEval,
}

impl SviTrace {
    pub fn lambda_final(&self) -> &VarParams {
        self.lambdas.last().expect("trace holds at least lambda_0")
    }
}

/// Total derivatives of the refined loss.
#[derive(Debug, Clone)]
pub struct SviGradients {
    /// d loss / d lambda_0, flat [mu, log_var] layout.
    pub d_lambda0: Vec<f64>,
    /// d loss / d theta; `None` when the objective holds theta fixed.
    pub d_theta: Option<ModelParams>,
}

/// An objective the SVI loop can refine and differentiate through.
/// Implemented by the real negative-ELBO objective and by deterministic
/// surrogates in tests.
pub trait SviObjective: Sync {
    fn latent_dim(&self) -> usize;
    /// Whether gradient information with respect to theta is produced.
    fn trains_theta(&self) -> bool;
    fn eval(&self, lambda: &VarParams, seed: u64) -> Result<ElboEval>;
    fn grad_lambda(&self, lambda: &VarParams, seed: u64) -> Result<(ElboEval, Vec<f64>)>;
    fn grad_both(&self, lambda: &VarParams, seed: u64)
        -> Result<(ElboEval, Vec<f64>, ModelParams)>;
}

impl<'a> SviObjective for ElboObjective<'a> {
    fn latent_dim(&self) -> usize {
        ElboObjective::latent_dim(self)
    }

    fn trains_theta(&self) -> bool {
        self.train_theta
    }

    fn eval(&self, lambda: &VarParams, seed: u64) -> Result<ElboEval> {
        ElboObjective::eval(self, lambda, seed)
    }

    fn grad_lambda(&self, lambda: &VarParams, seed: u64) -> Result<(ElboEval, Vec<f64>)> {
        let g = self.grad(lambda, seed, GradWrt::Lambda)?;
        Ok((g.eval, g.d_lambda.expect("lambda gradient requested")))
    }

    fn grad_both(
        &self,
        lambda: &VarParams,
        seed: u64,
    ) -> Result<(ElboEval, Vec<f64>, ModelParams)> {
        let g = self.grad(lambda, seed, GradWrt::LambdaAndTheta)?;
        Ok((
            g.eval,
            g.d_lambda.expect("lambda gradient requested"),
            g.d_theta.expect("theta gradient requested"),
        ))
    }
}

fn at_step(step: usize, e: Error) -> Error {
    match e {
        e @ Error::NonFiniteValue { .. } => Error::SviStep {
            step,
            source: Box::new(e),
        },
        other => other,
    }
}

/// K momentum refinement steps from `lambda0`, recording every iterate,
/// velocity, and noise seed, plus a final loss evaluation under a fresh seed.
pub fn svi_forward(
    obj: &dyn SviObjective,
    lambda0: &VarParams,
    cfg: &SviConfig,
    master_seed: u64,
) -> Result<SviTrace> {
    cfg.validate()?;
    let seeds = ChainSeeds::new(master_seed);
    let width = 2 * lambda0.dim();
    let mut lambdas = Vec::with_capacity(cfg.steps + 1);
    let mut velocities = Vec::with_capacity(cfg.steps + 1);
    let mut step_seeds = Vec::with_capacity(cfg.steps);
    lambdas.push(lambda0.clone());
    velocities.push(vec![0.0; width]);

    let mut lam = lambda0.clone();
    let mut v = vec![0.0; width];
    for k in 0..cfg.steps {
        let seed = seeds.step_seed(k);
        let (_, grad) = obj.grad_lambda(&lam, seed).map_err(|e| at_step(k, e))?;
        let g = clip(&grad, cfg.clip);
        for i in 0..width {
            v[i] = cfg.momentum * v[i] - g[i];
        }
        let delta: Vec<f64> = v.iter().map(|vi| cfg.learning_rate * vi).collect();
        lam = lam.updated(&delta);
        step_seeds.push(seed);
        lambdas.push(lam.clone());
        velocities.push(v.clone());
    }

    let final_eval = obj
        .eval(&lam, seeds.final_seed())
        .map_err(|e| at_step(cfg.steps, e))?;
    Ok(SviTrace {
        lambdas,
        velocities,
        step_seeds,
        final_eval,
    })
}

/// Finite-difference estimate of H_{lambda,lambda} f(lambda_k) . v, with both
/// gradient evaluations under the same seed.
pub fn hvp_lambda(
    obj: &dyn SviObjective,
    lambda_k: &VarParams,
    v: &[f64],
    eps: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let perturbed = lambda_k.perturbed(v, eps);
    let (_, g1) = obj.grad_lambda(&perturbed, seed)?;
    let (_, g0) = obj.grad_lambda(lambda_k, seed)?;
    Ok(g1
        .iter()
        .zip(&g0)
        .map(|(a, b)| (a - b) / eps)
        .collect())
}

/// Finite-difference estimate of H_{theta,lambda} f(lambda_k) . v: perturb
/// lambda by eps*v, differentiate with respect to theta.
pub fn hvp_theta(
    obj: &dyn SviObjective,
    lambda_k: &VarParams,
    v: &[f64],
    eps: f64,
    seed: u64,
) -> Result<ModelParams> {
    let perturbed = lambda_k.perturbed(v, eps);
    let (_, _, g1) = obj.grad_both(&perturbed, seed)?;
    let (_, _, g0) = obj.grad_both(lambda_k, seed)?;
    let mut out = g1;
    out.axpy(-1.0, &g0)?;
    out.scale(1.0 / eps);
    Ok(out)
}

/// Both Hessian blocks applied to `v` in two gradient evaluations, plus the
/// unperturbed gradients (reused by the weighted-sum hook).
#[allow(clippy::type_complexity)]
fn hvp_pair(
    obj: &dyn SviObjective,
    lambda_k: &VarParams,
    v: &[f64],
    eps: f64,
    seed: u64,
    want_theta: bool,
) -> Result<(Vec<f64>, Option<ModelParams>, Vec<f64>, Option<ModelParams>)> {
    let perturbed = lambda_k.perturbed(v, eps);
    if want_theta {
        let (_, g1l, g1t) = obj.grad_both(&perturbed, seed)?;
        let (_, g0l, g0t) = obj.grad_both(lambda_k, seed)?;
        let hl = g1l.iter().zip(&g0l).map(|(a, b)| (a - b) / eps).collect();
        let mut ht = g1t;
        ht.axpy(-1.0, &g0t)?;
        ht.scale(1.0 / eps);
        Ok((hl, Some(ht), g0l, Some(g0t)))
    } else {
        let (_, g1l) = obj.grad_lambda(&perturbed, seed)?;
        let (_, g0l) = obj.grad_lambda(lambda_k, seed)?;
        let hl = g1l.iter().zip(&g0l).map(|(a, b)| (a - b) / eps).collect();
        Ok((hl, None, g0l, None))
    }
}

/// Reverse pass through the refinement loop.
///
/// Initializes the adjoints from the final-loss gradients, then walks the
/// steps backwards: the velocity adjoint absorbs the lambda adjoint, the
/// lambda adjoint is corrected by H_{ll} f(lambda_k) v and clipped, theta
/// accumulates the clipped mixed-block term, and momentum scales the
/// velocity adjoint. Every HVP at step k replays step_seeds[k].
pub fn svi_backward(
    obj: &dyn SviObjective,
    trace: &SviTrace,
    cfg: &SviConfig,
) -> Result<SviGradients> {
    cfg.validate()?;
    let k_steps = cfg.steps;
    if trace.lambdas.len() != k_steps + 1
        || trace.velocities.len() != k_steps + 1
        || trace.step_seeds.len() != k_steps
    {
        return Err(Error::TraceMismatch(format!(
            "trace has {} iterates / {} step seeds, config wants K = {}",
            trace.lambdas.len(),
            trace.step_seeds.len(),
            k_steps
        )));
    }
    let width = 2 * obj.latent_dim();
    if trace.lambdas[0].dim() != obj.latent_dim() {
        return Err(Error::TraceMismatch(format!(
            "trace latent dim {} vs objective {}",
            trace.lambdas[0].dim(),
            obj.latent_dim()
        )));
    }
    let want_theta = obj.trains_theta();

    let lam_final = trace.lambda_final();
    let final_seed = trace.final_eval.noise_seed;
    let (final_eval, gl, gt) = if want_theta {
        let (e, gl, gt) = obj.grad_both(lam_final, final_seed)?;
        (e, gl, Some(gt))
    } else {
        let (e, gl) = obj.grad_lambda(lam_final, final_seed)?;
        (e, gl, None)
    };
    if final_eval.neg_elbo.to_bits() != trace.final_eval.neg_elbo.to_bits() {
        return Err(Error::TraceMismatch(
            "final loss does not replay; trace was built under a different objective".into(),
        ));
    }

    let w_final = cfg.weight(k_steps);
    let mut lbar: Vec<f64> = gl.iter().map(|g| w_final * g).collect();
    let mut tbar = gt.map(|g| {
        let mut t = g;
        t.scale(w_final);
        t
    });
    let mut vbar = vec![0.0; width];

    for k in (0..k_steps).rev() {
        for i in 0..width {
            vbar[i] += cfg.learning_rate * lbar[i];
        }
        let seed = trace.step_seeds[k];
        let (mut hl, ht, g0l, g0t) = hvp_pair(
            obj,
            &trace.lambdas[k],
            &vbar,
            cfg.hvp_epsilon,
            seed,
            want_theta,
        )
        .map_err(|e| at_step(k, e))?;
        if let Some(eta) = cfg.hvp_clip {
            clip_in_place(&mut hl, eta);
        }
        for i in 0..width {
            lbar[i] -= hl[i];
        }
        clip_in_place(&mut lbar, cfg.clip);
        let w_k = cfg.weight(k);
        if w_k != 0.0 {
            axpy(w_k, &g0l, &mut lbar);
        }
        if let (Some(tb), Some(mut h)) = (tbar.as_mut(), ht) {
            clip_params_in_place(&mut h, cfg.hvp_clip.unwrap_or(cfg.clip));
            tb.axpy(-1.0, &h)?;
            if w_k != 0.0 {
                tb.axpy(w_k, &g0t.expect("theta gradients present"))?;
            }
        }
        for v in vbar.iter_mut() {
            *v *= cfg.momentum;
        }
    }

    Ok(SviGradients {
        d_lambda0: lbar,
        d_theta: tbar,
    })
}
