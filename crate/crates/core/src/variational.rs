//! Diagonal-Gaussian variational family over a spherical standard-normal
//! prior: reparameterized sampling, closed-form KL, and stochastic negative
//! ELBO evaluation against a sequence generator.

use crate::error::Result;
use crate::models::{GenForwardCache, LatentWiring, SeqGenModel};
use crate::params::ModelParams;
use crate::rng::NormalStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Variational parameters of a diagonal Gaussian: the mean vector and the
/// diagonal log-variance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VarParams {
    mu: Vec<f64>,
    log_var: Vec<f64>,
}

impl VarParams {
    /// Log-variances are clamped to this symmetric bound after every update.
    pub const LOG_VAR_BOUND: f64 = 20.0;

    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Self {
        assert_eq!(mu.len(), log_var.len(), "mu and log_var length mismatch");
        debug_assert!(mu.iter().chain(&log_var).all(|v| v.is_finite()));
        VarParams { mu, log_var }
    }

    /// The prior itself: zero mean, unit variance.
    pub fn prior(dim: usize) -> Self {
        VarParams {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    /// Random initialization for encoder-free inference: every entry drawn
    /// from a Gaussian with the given standard deviation.
    pub fn random_init(dim: usize, sd: f64, seed: u64) -> Self {
        let mut stream = NormalStream::new(seed);
        let mu = (0..dim).map(|_| sd * stream.next()).collect();
        let log_var = (0..dim).map(|_| sd * stream.next()).collect();
        VarParams { mu, log_var }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    /// Flat layout [mu, log_var]; the vector SVI updates and clips.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 * self.dim());
        out.extend_from_slice(&self.mu);
        out.extend_from_slice(&self.log_var);
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert!(flat.len() % 2 == 0);
        let d = flat.len() / 2;
        VarParams {
            mu: flat[..d].to_vec(),
            log_var: flat[d..].to_vec(),
        }
    }

    /// Apply an additive update and clamp the log-variance block.
    pub fn updated(&self, delta: &[f64]) -> VarParams {
        debug_assert_eq!(delta.len(), 2 * self.dim());
        let d = self.dim();
        let mu = (0..d).map(|i| self.mu[i] + delta[i]).collect();
        let log_var = (0..d)
            .map(|i| (self.log_var[i] + delta[d + i]).clamp(-Self::LOG_VAR_BOUND, Self::LOG_VAR_BOUND))
            .collect();
        VarParams { mu, log_var }
    }

    /// Unclamped directional perturbation, used by the finite-difference
    /// Hessian-vector products.
    pub fn perturbed(&self, direction: &[f64], eps: f64) -> VarParams {
        debug_assert_eq!(direction.len(), 2 * self.dim());
        let d = self.dim();
        let mu = (0..d).map(|i| self.mu[i] + eps * direction[i]).collect();
        let log_var = (0..d).map(|i| self.log_var[i] + eps * direction[d + i]).collect();
        VarParams { mu, log_var }
    }
}

/// One stochastic evaluation of the negative ELBO. The identity
/// `neg_elbo == recon_nll + kl_multiplier * kl` holds exactly as computed,
/// and `noise_seed` makes the evaluation replayable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboEval {
    pub neg_elbo: f64,
    pub recon_nll: f64,
    pub kl: f64,
    pub noise_seed: u64,
}

/// Closed-form KL[q(z; lambda) || N(0, I)].
pub fn kl_to_standard_normal(lambda: &VarParams) -> f64 {
    let mut total = 0.0;
    for (m, lv) in lambda.mu.iter().zip(&lambda.log_var) {
        total += m * m + lv.exp() - 1.0 - lv;
    }
    (0.5 * total).max(0.0)
}

/// Closed-form KL[q(z; nu) || q(z; omega)] between diagonal Gaussians.
pub fn gaussian_kl(nu: &VarParams, omega: &VarParams) -> f64 {
    assert_eq!(nu.dim(), omega.dim());
    let mut total = 0.0;
    for i in 0..nu.dim() {
        let dm = nu.mu[i] - omega.mu[i];
        total += (nu.log_var[i] - omega.log_var[i]).exp() + dm * dm * (-omega.log_var[i]).exp()
            - 1.0
            + omega.log_var[i]
            - nu.log_var[i];
    }
    (0.5 * total).max(0.0)
}

/// Reparameterized draw z = mu + sigma .* eps with eps fixed by the seed.
/// Matches the first `gaussian_sample` recorded on a tape with this seed.
pub fn sample_z(lambda: &VarParams, seed: u64) -> Vec<f64> {
    let mut stream = NormalStream::new(seed);
    lambda
        .mu
        .iter()
        .zip(&lambda.log_var)
        .map(|(m, lv)| m + (0.5 * lv).exp() * stream.next())
        .collect()
}

/// log N(z; mu, diag(exp(log_var)))
pub fn log_normal_diag(z: &[f64], mu: &[f64], log_var: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..z.len() {
        let diff = z[i] - mu[i];
        total += -0.5 * (log_var[i] + diff * diff * (-log_var[i]).exp()
            + std::f64::consts::TAU.ln());
    }
    total
}

/// KL[q || N(0,I)] as a tape graph over (mu, logvar) vars.
pub fn kl_graph(tape: &mut Tape, mu: Var, log_var: Var) -> Result<Var> {
    let d = tape.value(mu).len() as f64;
    let mu_sq = tape.dot(mu, mu)?;
    let var = tape.exp(log_var)?;
    let var_sum = tape.sum(var)?;
    let lv_sum = tape.sum(log_var)?;
    let a = tape.add(mu_sq, var_sum)?;
    let b = tape.sub(a, lv_sum)?;
    tape.scale_add(b, 0.5, -0.5 * d)
}

/// KL[q(.; nu) || q(.; omega)] with omega held fixed; differentiable in nu.
pub fn gaussian_kl_graph(tape: &mut Tape, nu_mu: Var, nu_lv: Var, omega: &VarParams) -> Result<Var> {
    let d = omega.dim();
    let om_mu = tape.constant_vec(omega.mu().to_vec());
    let om_lv_neg_exp = tape.constant_vec(omega.log_var().iter().map(|v| (-v).exp()).collect());
    let om_lv = tape.constant_vec(omega.log_var().to_vec());

    let lv_diff = tape.sub(nu_lv, om_lv)?;
    let ratio = tape.exp(lv_diff)?;
    let ratio_sum = tape.sum(ratio)?;

    let dm = tape.sub(nu_mu, om_mu)?;
    let dm_sq = tape.mul(dm, dm)?;
    let scaled = tape.mul(dm_sq, om_lv_neg_exp)?;
    let quad_sum = tape.sum(scaled)?;

    let nu_lv_sum = tape.sum(nu_lv)?;
    let a = tape.add(ratio_sum, quad_sum)?;
    let b = tape.sub(a, nu_lv_sum)?;
    let shift = 0.5 * (omega.log_var().iter().sum::<f64>() - d as f64);
    tape.scale_add(b, 0.5, shift)
}

/// Which gradients an ELBO evaluation must produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradWrt {
    None,
    Lambda,
    LambdaAndTheta,
}

/// Output of one ELBO evaluation: the three loss terms, the gradient with
/// respect to the flat lambda layout, and optionally the generator gradient.
pub struct ElboGrad {
    pub eval: ElboEval,
    pub d_lambda: Option<Vec<f64>>,
    pub d_theta: Option<ModelParams>,
}

/// Negative-ELBO objective for one (generator, observation) pair.
///
/// With the OutputMlp wiring, evaluations that do not need generator
/// gradients replay the hidden-state sweep from a per-sequence cache; the
/// values are bit-identical to the full graph.
///
/// `loss_scale` multiplies both loss terms on the tape. Minibatch training
/// optimizes the batch-mean loss, so each example's refinement chain sees
/// its own loss scaled by 1/batch; evaluations report the scaled terms and
/// callers unscale for per-example metrics.
pub struct ElboObjective<'a> {
    pub gen: &'a SeqGenModel,
    pub x: &'a [usize],
    pub kl_multiplier: f64,
    pub train_theta: bool,
    pub loss_scale: f64,
    cache: Option<GenForwardCache>,
}

impl<'a> ElboObjective<'a> {
    pub fn new(gen: &'a SeqGenModel, x: &'a [usize], kl_multiplier: f64, train_theta: bool) -> Result<Self> {
        assert!(
            (0.0..=1.0).contains(&kl_multiplier),
            "kl multiplier must lie in [0, 1]"
        );
        let cache = match gen.dims.wiring {
            LatentWiring::OutputMlp => Some(gen.forward_cache(x)?),
            LatentWiring::HiddenInit => None,
        };
        Ok(ElboObjective {
            gen,
            x,
            kl_multiplier,
            train_theta,
            loss_scale: 1.0,
            cache,
        })
    }

    pub fn with_loss_scale(mut self, scale: f64) -> Self {
        assert!(scale > 0.0);
        self.loss_scale = scale;
        self
    }

    pub fn latent_dim(&self) -> usize {
        self.gen.dims.latent
    }

    fn build_graph(
        &self,
        tape: &mut Tape,
        lambda: &VarParams,
        with_theta: bool,
    ) -> Result<(Var, Var, Var)> {
        let mu_t = Tensor::vector(lambda.mu().to_vec());
        let lv_t = Tensor::vector(lambda.log_var().to_vec());
        let mu = tape.leaf("lambda.mu", &mu_t, true);
        let lv = tape.leaf("lambda.logvar", &lv_t, true);
        let z = tape.gaussian_sample(mu, lv)?;
        let recon_raw = if !with_theta && self.cache.is_some() {
            self.gen
                .nll_graph_cached(tape, self.cache.as_ref().unwrap(), self.x, z)?
        } else {
            let gvars = self.gen.vars(tape, with_theta);
            self.gen.nll_graph(tape, &gvars, self.x, z)?
        };
        let kl_raw = kl_graph(tape, mu, lv)?;
        let recon = tape.scale_add(recon_raw, self.loss_scale, 0.0)?;
        let kl = tape.scale_add(kl_raw, self.loss_scale, 0.0)?;
        let kl_term = tape.scale_add(kl, self.kl_multiplier, 0.0)?;
        let loss = tape.add(recon, kl_term)?;
        tape.set_output(loss);
        Ok((loss, recon, kl))
    }

    fn read_eval(&self, tape: &Tape, loss: Var, recon: Var, kl: Var, seed: u64) -> ElboEval {
        ElboEval {
            neg_elbo: tape.scalar_value(loss),
            recon_nll: tape.scalar_value(recon),
            kl: tape.scalar_value(kl),
            noise_seed: seed,
        }
    }

    /// Evaluate the loss terms only.
    pub fn eval(&self, lambda: &VarParams, seed: u64) -> Result<ElboEval> {
        let mut tape = Tape::new(seed);
        let (loss, recon, kl) = self.build_graph(&mut tape, lambda, false)?;
        Ok(self.read_eval(&tape, loss, recon, kl, seed))
    }

    /// Evaluate and differentiate according to `wrt`.
    pub fn grad(&self, lambda: &VarParams, seed: u64, wrt: GradWrt) -> Result<ElboGrad> {
        let with_theta = wrt == GradWrt::LambdaAndTheta;
        let mut tape = Tape::new(seed);
        let (loss, recon, kl) = self.build_graph(&mut tape, lambda, with_theta)?;
        let eval = self.read_eval(&tape, loss, recon, kl, seed);
        if wrt == GradWrt::None {
            return Ok(ElboGrad {
                eval,
                d_lambda: None,
                d_theta: None,
            });
        }
        let grads = tape.backward_scalar(loss)?;
        let d = lambda.dim();
        let mut flat = Vec::with_capacity(2 * d);
        flat.extend_from_slice(grads.get("lambda.mu").unwrap().data());
        flat.extend_from_slice(grads.get("lambda.logvar").unwrap().data());
        let d_theta = if with_theta {
            let mut theta = ModelParams::new();
            for (name, t) in grads.iter() {
                if name.starts_with("gen.") {
                    theta.insert(name, t.clone());
                }
            }
            Some(theta)
        } else {
            None
        };
        Ok(ElboGrad {
            eval,
            d_lambda: Some(flat),
            d_theta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fd;
    use crate::models::GenDims;

    #[test]
    fn kl_at_prior_is_zero() {
        assert_eq!(kl_to_standard_normal(&VarParams::prior(3)), 0.0);
    }

    #[test]
    fn kl_unit_mean_is_half() {
        let lam = VarParams::new(vec![1.0], vec![0.0]);
        assert!((kl_to_standard_normal(&lam) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_variance_four() {
        let lam = VarParams::new(vec![0.0], vec![4.0_f64.ln()]);
        let expected = 0.5 * (4.0 - 1.0 - 4.0_f64.ln());
        assert!((kl_to_standard_normal(&lam) - expected).abs() < 1e-15);
        assert!((expected - 0.8069).abs() < 1e-4);
    }

    /// Monte Carlo cross-check of the closed form:
    /// KL = E_q[log q(z) - log p(z)].
    fn mc_kl(lambda: &VarParams, n: usize, seed: u64) -> (f64, f64) {
        let mut stream = NormalStream::new(seed);
        let d = lambda.dim();
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        let prior = VarParams::prior(d);
        for _ in 0..n {
            let z: Vec<f64> = (0..d)
                .map(|i| lambda.mu()[i] + (0.5 * lambda.log_var()[i]).exp() * stream.next())
                .collect();
            let v = log_normal_diag(&z, lambda.mu(), lambda.log_var())
                - log_normal_diag(&z, prior.mu(), prior.log_var());
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo() {
        let cases = [
            VarParams::new(vec![1.0], vec![0.0]),
            VarParams::new(vec![0.0], vec![4.0_f64.ln()]),
            VarParams::new(vec![0.5, -1.0], vec![0.3, -0.4]),
        ];
        for (i, lam) in cases.iter().enumerate() {
            let (mc, se) = mc_kl(lam, 1_000_000, 100 + i as u64);
            let exact = kl_to_standard_normal(lam);
            assert!(
                (mc - exact).abs() < 3.0 * se.max(1e-3),
                "case {i}: exact {exact}, mc {mc} +- {se}"
            );
        }
    }

    #[test]
    fn kl_closed_form_matches_monte_carlo_many_random_lambdas() {
        let mut stream = NormalStream::new(777);
        let mut failures = 0;
        for trial in 0..50 {
            let d = 1 + (trial % 3);
            let mu: Vec<f64> = (0..d).map(|_| stream.next()).collect();
            let lv: Vec<f64> = (0..d).map(|_| 0.8 * stream.next()).collect();
            let lam = VarParams::new(mu, lv);
            // 1e5 samples per case keeps the full sweep fast; 3 standard
            // errors of the estimator is the acceptance band
            let (mc, se) = mc_kl(&lam, 100_000, 9000 + trial as u64);
            let exact = kl_to_standard_normal(&lam);
            if (mc - exact).abs() >= 3.0 * se.max(1e-4) {
                failures += 1;
            }
        }
        assert!(failures <= 2, "{failures} of 50 outside 3 standard errors");
    }

    #[test]
    fn gaussian_kl_identical_distributions_is_zero() {
        let lam = VarParams::new(vec![0.7, -0.2], vec![0.1, 0.4]);
        assert_eq!(gaussian_kl(&lam, &lam), 0.0);
    }

    #[test]
    fn gaussian_kl_hand_case() {
        // unit variances, means 0 and 1: g = (mu0 - muK)^2 / 2 = 0.5
        let nu = VarParams::new(vec![0.0], vec![0.0]);
        let om = VarParams::new(vec![1.0], vec![0.0]);
        assert!((gaussian_kl(&nu, &om) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_kl_matches_monte_carlo() {
        let nu = VarParams::new(vec![0.3, -0.5], vec![0.2, -0.1]);
        let om = VarParams::new(vec![-0.4, 0.8], vec![-0.3, 0.5]);
        let exact = gaussian_kl(&nu, &om);
        let mut stream = NormalStream::new(4242);
        let n = 1_000_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z: Vec<f64> = (0..2)
                .map(|i| nu.mu()[i] + (0.5 * nu.log_var()[i]).exp() * stream.next())
                .collect();
            let v = log_normal_diag(&z, nu.mu(), nu.log_var())
                - log_normal_diag(&z, om.mu(), om.log_var());
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = (((sum_sq / n as f64 - mean * mean).max(0.0)) / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se.max(1e-3));
    }

    #[test]
    fn gaussian_kl_graph_gradient_direction() {
        // d=1, unit variances, mu_0 = 0, mu_K = 1: dg/dmu_0 = -1
        let omega = VarParams::new(vec![1.0], vec![0.0]);
        let mut p = ModelParams::new();
        p.insert("nu.mu", Tensor::vector(vec![0.0]));
        p.insert("nu.lv", Tensor::vector(vec![0.0]));
        let (_, mut tape) = crate::tape::forward(
            |t, vars| gaussian_kl_graph(t, vars.get("nu.mu"), vars.get("nu.lv"), &omega),
            &p,
            0,
        )
        .unwrap();
        let g = crate::tape::backward(&mut tape).unwrap();
        assert!((g.get("nu.mu").unwrap().data()[0] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn sample_z_sigma_zero_limit() {
        // seed 1867: first draw ~3.1e-5 (see tape tests)
        let lam = VarParams::new(vec![1.25], vec![-40.0]);
        let z = sample_z(&lam, 1867);
        assert!((z[0] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn sample_z_fixed_seed_is_deterministic() {
        let lam = VarParams::new(vec![0.5, -0.5], vec![0.1, 0.2]);
        assert_eq!(sample_z(&lam, 99), sample_z(&lam, 99));
    }

    #[test]
    fn sample_z_empirical_mean_approaches_mu() {
        let lam = VarParams::new(vec![0.7, -1.3], vec![0.0, 0.5]);
        let n = 100_000;
        let mut mean = vec![0.0; 2];
        for s in 0..n {
            let z = sample_z(&lam, s as u64);
            for (m, v) in mean.iter_mut().zip(&z) {
                *m += v / n as f64;
            }
        }
        for i in 0..2 {
            let sigma = (0.5 * lam.log_var()[i]).exp();
            let band = 3.0 * sigma / (n as f64).sqrt();
            assert!(
                (mean[i] - lam.mu()[i]).abs() < band,
                "dim {i}: {} vs {} (band {band})",
                mean[i],
                lam.mu()[i]
            );
        }
    }

    #[test]
    fn sample_z_matches_taped_gaussian_sample() {
        let lam = VarParams::new(vec![0.4, -0.9], vec![0.3, -0.2]);
        let plain = sample_z(&lam, 31);
        let mut tape = Tape::new(31);
        let mu = tape.constant_vec(lam.mu().to_vec());
        let lv = tape.constant_vec(lam.log_var().to_vec());
        let z = tape.gaussian_sample(mu, lv).unwrap();
        assert_eq!(tape.value(z), plain.as_slice());
    }

    fn tiny_gen(seed: u64) -> SeqGenModel {
        SeqGenModel::init_uniform(
            GenDims {
                vocab: 5,
                embed: 3,
                hidden: 4,
                latent: 2,
                wiring: LatentWiring::OutputMlp,
            },
            0.8,
            seed,
        )
    }

    #[test]
    fn neg_elbo_zero_multiplier_is_pure_reconstruction() {
        let gen = tiny_gen(1);
        let x = vec![1, 3, 0];
        let obj = ElboObjective::new(&gen, &x, 0.0, false).unwrap();
        let lam = VarParams::new(vec![0.3, -0.2], vec![0.1, 0.0]);
        let e = obj.eval(&lam, 5).unwrap();
        assert_eq!(e.neg_elbo, e.recon_nll);
    }

    #[test]
    fn neg_elbo_at_prior_has_zero_kl() {
        let gen = tiny_gen(2);
        let x = vec![2, 2];
        let obj = ElboObjective::new(&gen, &x, 1.0, false).unwrap();
        let e = obj.eval(&VarParams::prior(2), 9).unwrap();
        assert_eq!(e.kl, 0.0);
        assert_eq!(e.neg_elbo, e.recon_nll);
    }

    #[test]
    fn neg_elbo_identity_holds_exactly() {
        let gen = tiny_gen(3);
        let x = vec![4, 1, 2];
        let mult = 0.37;
        let obj = ElboObjective::new(&gen, &x, mult, false).unwrap();
        let lam = VarParams::new(vec![0.6, -0.6], vec![0.2, -0.4]);
        let e = obj.eval(&lam, 21).unwrap();
        assert_eq!(e.neg_elbo.to_bits(), (e.recon_nll + mult * e.kl).to_bits());
    }

    #[test]
    fn grad_lambda_matches_finite_differences_same_seed() {
        let gen = tiny_gen(4);
        let x = vec![0, 4, 3, 1];
        let obj = ElboObjective::new(&gen, &x, 1.0, false).unwrap();
        let lam = VarParams::new(vec![0.25, -0.5], vec![0.3, 0.1]);
        let seed = 77;
        let g = obj.grad(&lam, seed, GradWrt::Lambda).unwrap();
        let flat = lam.to_flat();
        let numeric = fd::gradient(
            |f| {
                obj.eval(&VarParams::from_flat(f), seed).unwrap().neg_elbo
            },
            &flat,
            1e-6,
        );
        let analytic = g.d_lambda.unwrap();
        assert!(
            fd::max_rel_error(&analytic, &numeric, 1.0) < 1e-5,
            "rel err {}",
            fd::max_rel_error(&analytic, &numeric, 1.0)
        );
    }

    #[test]
    fn cached_and_full_lambda_gradients_are_bit_identical() {
        let gen = tiny_gen(6);
        let x = vec![1, 2, 3];
        let obj = ElboObjective::new(&gen, &x, 1.0, false).unwrap();
        let lam = VarParams::new(vec![0.4, 0.2], vec![-0.3, 0.5]);
        let fast = obj.grad(&lam, 50, GradWrt::Lambda).unwrap();
        let full = obj.grad(&lam, 50, GradWrt::LambdaAndTheta).unwrap();
        assert_eq!(fast.eval.neg_elbo.to_bits(), full.eval.neg_elbo.to_bits());
        let a = fast.d_lambda.unwrap();
        let b = full.d_lambda.unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits(), "{a:?} vs {b:?}");
        }
    }

    /// Importance-sampling estimate of -log p(x) with q as proposal.
    fn is_neg_log_marginal(gen: &SeqGenModel, x: &[usize], lam: &VarParams, n: usize, seed: u64) -> f64 {
        let mut stream = NormalStream::new(seed);
        let d = lam.dim();
        let prior = VarParams::prior(d);
        let cache = gen.forward_cache(x).unwrap();
        let mut log_ws = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..d)
                .map(|i| lam.mu()[i] + (0.5 * lam.log_var()[i]).exp() * stream.next())
                .collect();
            let lw = gen.log_likelihood_cached(&cache, x, &z)
                + log_normal_diag(&z, prior.mu(), prior.log_var())
                - log_normal_diag(&z, lam.mu(), lam.log_var());
            log_ws.push(lw);
        }
        -(crate::kernels::log_sum_exp(&log_ws) - (n as f64).ln())
    }

    #[test]
    fn neg_elbo_is_consistent_with_importance_sampling() {
        let gen = tiny_gen(8);
        let x = vec![2, 0, 4];
        let obj = ElboObjective::new(&gen, &x, 1.0, false).unwrap();
        let lam = VarParams::new(vec![0.2, -0.1], vec![-0.2, -0.3]);
        let mut mean = 0.0;
        let n_seeds = 100;
        for s in 0..n_seeds {
            mean += obj.eval(&lam, s).unwrap().neg_elbo / n_seeds as f64;
        }
        let is_est = is_neg_log_marginal(&gen, &x, &lam, 10_000, 999);
        assert!(
            mean + 0.5 >= is_est,
            "bound {mean} more than 0.5 nat below IS estimate {is_est}"
        );
    }

    #[test]
    fn neg_elbo_upper_bounds_marginal_in_expectation() {
        let gen = tiny_gen(9);
        let x = vec![3, 3, 1];
        let obj = ElboObjective::new(&gen, &x, 1.0, false).unwrap();
        let lam = VarParams::new(vec![-0.3, 0.4], vec![0.1, -0.5]);
        let n_seeds = 1000;
        let evals: Vec<f64> = (0..n_seeds)
            .map(|s| obj.eval(&lam, s as u64).unwrap().neg_elbo)
            .collect();
        let mean = evals.iter().sum::<f64>() / n_seeds as f64;
        let var = evals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n_seeds as f64;
        let se = (var / n_seeds as f64).sqrt();
        let is_est = is_neg_log_marginal(&gen, &x, &lam, 10_000, 123);
        assert!(
            mean >= is_est - 3.0 * se,
            "mean bound {mean} below IS estimate {is_est} - 3se ({se})"
        );
    }
}
