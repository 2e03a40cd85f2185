//! Post-hoc analysis: ELBO landscape slices, refinement curves, and
//! saliency measurements, all emitted as plot-ready tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{SeqEncoder, SeqGenModel};
use crate::rng;
use crate::svi::SviTrace;
use crate::tape::Tape;
use crate::tensor::{l2_norm, Tensor};
use crate::training::{evaluate, Bundle, EvalMetrics, EvalMode};
use crate::variational::{ElboObjective, VarParams};

// ── ELBO landscape (2-d latent slice) ────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub resolution: usize,
    pub n_seeds: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        // covers about three prior standard deviations in each direction
        GridSpec {
            min: -3.0,
            max: 3.0,
            resolution: 61,
            n_seeds: 8,
        }
    }
}

impl GridSpec {
    pub fn coordinate(&self, idx: usize) -> f64 {
        self.min + (self.max - self.min) * idx as f64 / (self.resolution - 1) as f64
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MarkedPoint {
    pub label: String,
    pub mu1: f64,
    pub mu2: f64,
    /// Seed-averaged negative ELBO at the point's full variational
    /// parameters (its own log-variances, not the slice value).
    pub neg_elbo: f64,
    pub in_range: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub method: String,
    /// (step, mu1, mu2)
    pub points: Vec<(usize, f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LandscapeGrid {
    pub grid: GridSpec,
    /// Fixed log-variance of the slice, shared by both latent dimensions.
    pub log_var: f64,
    /// Row-major over (mu1 index, mu2 index): mean negative ELBO.
    pub values: Vec<f64>,
    pub optimum: (f64, f64),
    pub optimum_value: f64,
    pub marked: Vec<MarkedPoint>,
}

impl LandscapeGrid {
    pub fn value_at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.grid.resolution + j]
    }
}

fn mean_neg_elbo(obj: &ElboObjective, lam: &VarParams, seeds: &[u64]) -> Result<f64> {
    let mut total = 0.0;
    for &s in seeds {
        total += obj.eval(lam, s)?.neg_elbo;
    }
    Ok(total / seeds.len() as f64)
}

/// Negative-ELBO surface over the two posterior means at a fixed
/// log-variance slice. The slice value is found by a coarse 1-d search at a
/// provisional grid optimum; every cell shares the same seed list.
pub fn elbo_landscape(
    gen: &SeqGenModel,
    x: &[usize],
    grid: &GridSpec,
    seed: u64,
    marked: &[(String, VarParams)],
) -> Result<LandscapeGrid> {
    if gen.dims.latent != 2 {
        return Err(Error::DimensionError {
            expected: 2,
            got: gen.dims.latent,
        });
    }
    let obj = ElboObjective::new(gen, x, 1.0, false)?;
    let seeds: Vec<u64> = (0..grid.n_seeds as u64).map(|s| rng::derive(seed, s)).collect();

    // provisional optimum on a coarse grid at log-variance zero
    let coarse_res = 21.min(grid.resolution);
    let coarse = |i: usize| grid.min + (grid.max - grid.min) * i as f64 / (coarse_res - 1) as f64;
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..coarse_res {
        for j in 0..coarse_res {
            let lam = VarParams::new(vec![coarse(i), coarse(j)], vec![0.0, 0.0]);
            let v = mean_neg_elbo(&obj, &lam, &seeds)?;
            if v < best.0 {
                best = (v, coarse(i), coarse(j));
            }
        }
    }

    // coarse 1-d search for the slice log-variance at the provisional optimum
    let mut slice_lv = 0.0;
    let mut slice_best = f64::INFINITY;
    for step in 0..33 {
        let lv = -6.0 + 8.0 * step as f64 / 32.0;
        let lam = VarParams::new(vec![best.1, best.2], vec![lv, lv]);
        let v = mean_neg_elbo(&obj, &lam, &seeds)?;
        if v < slice_best {
            slice_best = v;
            slice_lv = lv;
        }
    }

    let res = grid.resolution;
    let cells: Vec<f64> = (0..res * res)
        .into_par_iter()
        .map(|cell| {
            let (i, j) = (cell / res, cell % res);
            let lam = VarParams::new(
                vec![grid.coordinate(i), grid.coordinate(j)],
                vec![slice_lv, slice_lv],
            );
            // cells share one objective shape; rebuild per thread for Sync
            let obj = ElboObjective::new(gen, x, 1.0, false)?;
            mean_neg_elbo(&obj, &lam, &seeds)
        })
        .collect::<Result<Vec<f64>>>()?;

    let (mut arg, mut min_v) = (0, f64::INFINITY);
    for (idx, &v) in cells.iter().enumerate() {
        if v < min_v {
            min_v = v;
            arg = idx;
        }
    }
    let optimum = (grid.coordinate(arg / res), grid.coordinate(arg % res));

    let marked = marked
        .iter()
        .map(|(label, lam)| {
            let v = mean_neg_elbo(&obj, lam, &seeds)?;
            Ok(MarkedPoint {
                label: label.clone(),
                mu1: lam.mu()[0],
                mu2: lam.mu()[1],
                neg_elbo: v,
                in_range: lam.mu().iter().all(|&m| m >= grid.min && m <= grid.max),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(LandscapeGrid {
        grid: grid.clone(),
        log_var: slice_lv,
        values: cells,
        optimum,
        optimum_value: min_v,
        marked,
    })
}

pub fn trajectory_from_trace(method: &str, trace: &SviTrace) -> Trajectory {
    Trajectory {
        method: method.to_string(),
        points: trace
            .lambdas
            .iter()
            .enumerate()
            .map(|(k, lam)| (k, lam.mu()[0], lam.mu()[1]))
            .collect(),
    }
}

pub fn landscape_csv(grid: &LandscapeGrid) -> String {
    let mut out = String::from("mu1,mu2,neg_elbo\n");
    let res = grid.grid.resolution;
    for i in 0..res {
        for j in 0..res {
            out.push_str(&format!(
                "{},{},{}\n",
                grid.grid.coordinate(i),
                grid.grid.coordinate(j),
                grid.value_at(i, j)
            ));
        }
    }
    out
}

pub fn trajectories_csv(trajectories: &[Trajectory]) -> String {
    let mut out = String::from("step,mu1,mu2,which_method\n");
    for tr in trajectories {
        for (k, m1, m2) in &tr.points {
            out.push_str(&format!("{},{},{},{}\n", k, m1, m2, tr.method));
        }
    }
    out
}

// ── Refinement curves ────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub regime: String,
    pub init: String,
    pub steps: usize,
    pub bound: f64,
    pub kl: f64,
}

/// Test-time bound as a function of refinement steps, from either random or
/// encoder initialization.
#[allow(clippy::too_many_arguments)]
pub fn refinement_curves(
    bundle: &Bundle,
    regime_label: &str,
    sequences: &[Vec<usize>],
    svi_cfg: &crate::svi::SviConfig,
    k_list: &[usize],
    include_encoder_init: bool,
    loss_scale: f64,
    seed: u64,
) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for &k in k_list {
        let random: EvalMetrics = evaluate(
            bundle,
            sequences,
            svi_cfg,
            EvalMode::RandomRefine(k),
            loss_scale,
            seed,
        )?;
        rows.push(CurveRow {
            regime: regime_label.to_string(),
            init: "random".into(),
            steps: k,
            bound: random.neg_elbo,
            kl: random.kl,
        });
        if include_encoder_init && bundle.enc.is_some() {
            let enc = evaluate(
                bundle,
                sequences,
                svi_cfg,
                EvalMode::EncoderRefine(k),
                loss_scale,
                seed,
            )?;
            rows.push(CurveRow {
                regime: regime_label.to_string(),
                init: "encoder".into(),
                steps: k,
                bound: enc.neg_elbo,
                kl: enc.kl,
            });
        }
    }
    Ok(rows)
}

pub fn curves_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("regime,init,steps,bound,kl\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.regime, r.init, r.steps, r.bound, r.kl
        ));
    }
    out
}

// ── Saliency ─────────────────────────────────────────────────────────

/// Gradient of log p(x_t | x_{<t}, z) with respect to z, one token at a time.
fn token_logprob_grad_z(
    gen: &SeqGenModel,
    x: &[usize],
    z: &[f64],
    t: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new(0);
    let z_leaf = tape.leaf("z", &Tensor::vector(z.to_vec()), true);
    let gvars = gen.vars(&mut tape, false);
    // build the prefix up to step t and the cross-entropy at t
    let prefix = &x[..=t];
    let nll = gen.nll_prefix_graph(&mut tape, &gvars, prefix, z_leaf)?;
    let grads = tape.backward_scalar(nll)?;
    // d log p = -d nll
    Ok(grads
        .get("z")
        .unwrap()
        .data()
        .iter()
        .map(|g| -g)
        .collect())
}

/// Output saliency per token: E_q [ || d log p(x_t | x_{<t}, z) / dz ||_2 ],
/// the expectation approximated with `n_samples` posterior draws.
pub fn output_saliency(
    gen: &SeqGenModel,
    lambda: &VarParams,
    x: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for s in 0..n_samples {
        let z = crate::variational::sample_z(lambda, rng::derive(seed, s as u64));
        for (t, slot) in out.iter_mut().enumerate() {
            let g = token_logprob_grad_z(gen, x, &z, t)?;
            *slot += l2_norm(&g) / n_samples as f64;
        }
    }
    Ok(out)
}

/// Input saliency per position: || E_q [ d ||z||_2 / d w_t ] ||_2 where w_t
/// is the embedding vector consumed at position t. The expectation averages
/// the gradient vectors first, then takes the norm.
pub fn input_saliency(
    enc: &SeqEncoder,
    x: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let e_dim = enc.dims.embed;
    let mut grad_sums: Vec<Vec<f64>> = vec![vec![0.0; e_dim]; x.len()];
    for s in 0..n_samples {
        let mut tape = Tape::new(rng::derive(seed, s as u64));
        let embeds = enc.embed_leaves(&mut tape, x)?;
        let vars = enc.vars_no_embed(&mut tape);
        let (mu, lv) = enc.encode_graph_from_embeds(&mut tape, &vars, &embeds)?;
        let z = tape.gaussian_sample(mu, lv)?;
        let sq = tape.dot(z, z)?;
        let norm = tape.sqrt(sq)?;
        let store = tape.backward_retained(&[(norm, vec![1.0])])?;
        for (t, acc) in grad_sums.iter_mut().enumerate() {
            let g = store.at(embeds[t]);
            for (a, gi) in acc.iter_mut().zip(&g) {
                *a += gi / n_samples as f64;
            }
        }
    }
    Ok(grad_sums.iter().map(|g| l2_norm(g)).collect())
}

/// One analyzed token occurrence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyRecord {
    pub example: usize,
    pub position: usize,
    pub token: usize,
    pub out_saliency: f64,
    pub in_saliency: f64,
    pub log_prob: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub records: Vec<SaliencyRecord>,
}

impl SaliencyReport {
    pub fn csv(&self) -> String {
        let mut out = String::from("example,position,token,out_sal,in_sal,logprob\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.example, r.position, r.token, r.out_saliency, r.in_saliency, r.log_prob
            ));
        }
        out
    }
}

/// Saliency over a set of examples under encoder-based inference with K
/// refinement steps (the trained model's own inference mode).
#[allow(clippy::too_many_arguments)]
pub fn saliency_report(
    bundle: &Bundle,
    sequences: &[Vec<usize>],
    svi_cfg: &crate::svi::SviConfig,
    refine_steps: usize,
    n_samples: usize,
    loss_scale: f64,
    seed: u64,
) -> Result<SaliencyReport> {
    let enc = bundle.encoder()?;
    let records: Vec<Vec<SaliencyRecord>> = sequences
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let ex_seed = rng::derive(seed, i as u64);
            let lam0 = enc.encode(x)?;
            let lam = if refine_steps > 0 {
                let obj = ElboObjective::new(&bundle.gen, x, 1.0, false)?
                    .with_loss_scale(loss_scale);
                let mut cfg = svi_cfg.clone();
                cfg.steps = refine_steps;
                crate::svi::svi_forward(&obj, &lam0, &cfg, ex_seed)?
                    .lambda_final()
                    .clone()
            } else {
                lam0
            };
            let out_sal = output_saliency(&bundle.gen, &lam, x, n_samples, rng::derive(ex_seed, 1))?;
            let in_sal = input_saliency(enc, x, n_samples, rng::derive(ex_seed, 2))?;
            let z_mean = lam.mu().to_vec();
            let log_probs = crate::models::per_token_log_likelihood(&bundle.gen, x, &z_mean)?;
            Ok(x.iter()
                .enumerate()
                .map(|(t, &tok)| SaliencyRecord {
                    example: i,
                    position: t,
                    token: tok,
                    out_saliency: out_sal[t],
                    in_saliency: in_sal[t],
                    log_prob: log_probs[t],
                })
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SaliencyReport {
        records: records.into_iter().flatten().collect(),
    })
}

// ── Aggregates ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateBucket {
    pub key: String,
    pub mean_out: f64,
    pub mean_in: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SaliencyAggregates {
    pub by_position: Vec<AggregateBucket>,
    pub by_log2_frequency: Vec<AggregateBucket>,
    pub by_logprob_bin: Vec<AggregateBucket>,
    /// Present only when a token-class map was supplied.
    pub by_class: Option<Vec<AggregateBucket>>,
    /// Pearson correlation between output saliency and token log-likelihood.
    pub saliency_logprob_correlation: f64,
}

fn bucketize<K: Ord + std::fmt::Display>(
    records: &[&SaliencyRecord],
    key_fn: impl Fn(&SaliencyRecord) -> K,
) -> Vec<AggregateBucket> {
    use std::collections::BTreeMap;
    let mut map: BTreeMap<K, (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let e = map.entry(key_fn(r)).or_insert((0.0, 0.0, 0));
        e.0 += r.out_saliency;
        e.1 += r.in_saliency;
        e.2 += 1;
    }
    map.into_iter()
        .map(|(k, (o, i, c))| AggregateBucket {
            key: k.to_string(),
            mean_out: o / c as f64,
            mean_in: i / c as f64,
            count: c,
        })
        .collect()
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut cov, mut vx, mut vy) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Aggregate a saliency report by position, token log2-frequency (counted
/// over the analyzed corpus), per-token log-likelihood bin (1-nat bins),
/// and an optional token-class map.
pub fn saliency_aggregates(
    report: &SaliencyReport,
    token_class: Option<&std::collections::HashMap<usize, String>>,
) -> SaliencyAggregates {
    let records: Vec<&SaliencyRecord> = report.records.iter().collect();
    let mut freq = std::collections::HashMap::new();
    for r in &records {
        *freq.entry(r.token).or_insert(0usize) += 1;
    }
    let by_position = bucketize(&records, |r| r.position);
    let by_log2_frequency = bucketize(&records, |r| {
        (freq[&r.token] as f64).log2().floor() as i64
    });
    let by_logprob_bin = bucketize(&records, |r| r.log_prob.floor() as i64);
    let by_class = token_class.map(|map| {
        bucketize(&records, |r| {
            map.get(&r.token).cloned().unwrap_or_else(|| "unknown".into())
        })
    });
    let out: Vec<f64> = records.iter().map(|r| r.out_saliency).collect();
    let lps: Vec<f64> = records.iter().map(|r| r.log_prob).collect();
    SaliencyAggregates {
        by_position,
        by_log2_frequency,
        by_logprob_bin,
        by_class,
        saliency_logprob_correlation: pearson(&out, &lps),
    }
}

pub fn aggregates_csv(agg: &SaliencyAggregates) -> String {
    let mut out = String::from("bucket_kind,key,mean_out,mean_in,count\n");
    let mut push = |kind: &str, buckets: &[AggregateBucket]| {
        for b in buckets {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                kind, b.key, b.mean_out, b.mean_in, b.count
            ));
        }
    };
    push("position", &agg.by_position);
    push("log2_frequency", &agg.by_log2_frequency);
    push("logprob_bin", &agg.by_logprob_bin);
    if let Some(classes) = &agg.by_class {
        push("class", classes);
    }
    out
}

/// Spearman rank correlation, used by the sample-count stability check.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        for (rank, &i) in idx.iter().enumerate() {
            r[i] = rank as f64;
        }
        r
    }
    pearson(&ranks(xs), &ranks(ys))
}
