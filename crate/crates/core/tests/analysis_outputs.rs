//! Landscape, refinement-curve, and saliency behavior.

use savae::analysis::{
    elbo_landscape, input_saliency, output_saliency, refinement_curves, saliency_aggregates,
    saliency_report, spearman, GridSpec,
};
use savae::models::{EncDims, GenDims, LatentWiring, SeqEncoder, SeqGenModel};
use savae::oracle::{build_oracle, sample_dataset, OracleSpec};
use savae::svi::SviConfig;
use savae::training::{evaluate, Bundle, EvalMode};
use savae::variational::{kl_to_standard_normal, VarParams};
use savae::{Error, ModelParams, Tensor};

fn zero_gen(vocab: usize, latent: usize) -> SeqGenModel {
    let dims = GenDims {
        vocab,
        embed: 4,
        hidden: 4,
        latent,
        wiring: LatentWiring::OutputMlp,
    };
    let mut params = ModelParams::new();
    for (name, shape) in dims.param_specs() {
        params.insert(name, Tensor::zeros(shape));
    }
    SeqGenModel::new(dims, params).unwrap()
}

#[test]
fn degenerate_decoder_landscape_is_exactly_the_kl_bowl() {
    // decoder ignores z entirely: reconstruction is flat, so cell-to-cell
    // variation must equal the closed-form KL difference
    let gen = zero_gen(5, 2);
    let x = vec![1, 2, 3];
    let grid = GridSpec {
        min: -2.0,
        max: 2.0,
        resolution: 9,
        n_seeds: 3,
    };
    let scape = elbo_landscape(&gen, &x, &grid, 11, &[]).unwrap();
    let base_lam = |i: usize, j: usize| {
        VarParams::new(
            vec![grid.coordinate(i), grid.coordinate(j)],
            vec![scape.log_var, scape.log_var],
        )
    };
    let base = scape.value_at(0, 0);
    let base_kl = kl_to_standard_normal(&base_lam(0, 0));
    for i in 0..9 {
        for j in 0..9 {
            let want = kl_to_standard_normal(&base_lam(i, j)) - base_kl;
            let got = scape.value_at(i, j) - base;
            assert!(
                (got - want).abs() < 1e-9,
                "cell ({i},{j}): {got} vs kl bowl {want}"
            );
        }
    }
}

#[test]
fn grid_optimum_is_the_argmin() {
    let spec = OracleSpec {
        vocab: 12,
        embed: 6,
        hidden: 6,
        latent: 2,
        seq_len: 4,
        narrow_init: 1.0,
        wide_init: 4.0,
        n_train: 2,
        n_valid: 0,
        n_test: 2,
        seed: 3,
    };
    let gen = build_oracle(&spec);
    let data = sample_dataset(&gen, &spec);
    let grid = GridSpec {
        min: -3.0,
        max: 3.0,
        resolution: 13,
        n_seeds: 2,
    };
    let marked = vec![(
        "probe".to_string(),
        VarParams::new(vec![0.3, -0.4], vec![0.0, 0.0]),
    )];
    let scape = elbo_landscape(&gen, &data.test[0], &grid, 5, &marked).unwrap();
    for v in &scape.values {
        assert!(scape.optimum_value <= *v + 1e-15);
    }
    assert_eq!(scape.marked.len(), 1);
    assert!(scape.marked[0].in_range);
}

#[test]
fn landscape_requires_two_latent_dimensions() {
    let gen = zero_gen(5, 3);
    let err = elbo_landscape(&gen, &[1, 2], &GridSpec::default(), 0, &[]);
    assert!(matches!(
        err,
        Err(Error::DimensionError { expected: 2, got: 3 })
    ));
}

#[test]
fn output_saliency_is_zero_when_decoder_ignores_z() {
    let gen = zero_gen(6, 2);
    let lam = VarParams::new(vec![0.5, -0.5], vec![0.0, 0.0]);
    let sal = output_saliency(&gen, &lam, &[1, 2, 3, 4], 5, 9).unwrap();
    assert!(sal.iter().all(|&s| s == 0.0), "{sal:?}");
}

#[test]
fn output_saliency_scales_with_latent_pathway_weights() {
    // on a linear-in-z toy (zero LSTM), the token-logprob gradient w.r.t. z
    // is linear in out_w_z, so doubling those weights increases saliency
    let dims = GenDims {
        vocab: 6,
        embed: 4,
        hidden: 4,
        latent: 2,
        wiring: LatentWiring::OutputMlp,
    };
    let mut params = ModelParams::new();
    for (name, shape) in dims.param_specs() {
        params.insert(name, Tensor::zeros(shape));
    }
    let wz: Vec<f64> = (0..12).map(|i| 0.1 * (i as f64 - 6.0)).collect();
    params
        .get_mut("gen.out_w_z")
        .unwrap()
        .data_mut()
        .copy_from_slice(&wz);
    let gen = SeqGenModel::new(dims, params.clone()).unwrap();

    let mut doubled = params.clone();
    let wz2: Vec<f64> = wz.iter().map(|w| 2.0 * w).collect();
    doubled
        .get_mut("gen.out_w_z")
        .unwrap()
        .data_mut()
        .copy_from_slice(&wz2);
    let gen2 = SeqGenModel::new(dims, doubled).unwrap();

    let lam = VarParams::new(vec![0.2, -0.1], vec![-1.0, -1.0]);
    let x = vec![0, 3, 5];
    let s1 = output_saliency(&gen, &lam, &x, 5, 4).unwrap();
    let s2 = output_saliency(&gen2, &lam, &x, 5, 4).unwrap();
    for (a, b) in s1.iter().zip(&s2) {
        assert!(b > a, "doubling latent weights should raise saliency: {a} vs {b}");
    }
}

#[test]
fn output_saliency_is_reproducible() {
    let spec = OracleSpec {
        vocab: 10,
        embed: 5,
        hidden: 5,
        latent: 2,
        seq_len: 4,
        narrow_init: 1.0,
        wide_init: 3.0,
        n_train: 1,
        n_valid: 0,
        n_test: 1,
        seed: 8,
    };
    let gen = build_oracle(&spec);
    let data = sample_dataset(&gen, &spec);
    let lam = VarParams::new(vec![0.1, 0.4], vec![-0.5, 0.0]);
    let a = output_saliency(&gen, &lam, &data.test[0], 5, 33).unwrap();
    let b = output_saliency(&gen, &lam, &data.test[0], 5, 33).unwrap();
    assert_eq!(a, b);
}

fn encoder_with_scale(scale: f64, seed: u64) -> SeqEncoder {
    SeqEncoder::init_uniform(
        EncDims {
            vocab: 8,
            embed: 4,
            hidden: 4,
            latent: 1,
        },
        scale,
        seed,
    )
}

#[test]
fn input_saliency_is_zero_for_zero_encoder_weights() {
    let dims = EncDims {
        vocab: 8,
        embed: 4,
        hidden: 4,
        latent: 2,
    };
    let mut params = ModelParams::new();
    for (name, shape) in dims.param_specs() {
        params.insert(name, Tensor::zeros(shape));
    }
    // nonzero embeddings, but everything after the lookup is zero
    for (i, v) in params
        .get_mut("enc.embed")
        .unwrap()
        .data_mut()
        .iter_mut()
        .enumerate()
    {
        *v = 0.01 * i as f64;
    }
    let enc = SeqEncoder::new(dims, params).unwrap();
    let sal = input_saliency(&enc, &[1, 2, 3], 4, 7).unwrap();
    assert!(sal.iter().all(|&s| s == 0.0), "{sal:?}");
}

#[test]
fn input_saliency_collapses_to_deterministic_when_sigma_vanishes() {
    // encoder whose log-variance head saturates the clamp (sigma = e^-10)
    // and whose weights are tiny: the sample dependence of the gradient is
    // quadratically small, so 1-sample and 2-sample estimates coincide
    let mut enc = encoder_with_scale(1e-6, 21);
    let d = enc.dims.latent;
    {
        let out_b = enc.params.get_mut("enc.out_b").unwrap().data_mut();
        out_b[0] = 1.0; // mean head bias: keep ||z|| well away from zero
        for v in out_b[d..].iter_mut() {
            *v = -40.0; // log-variance head saturates the clamp
        }
    }
    let x = vec![1, 5, 2];
    let one = input_saliency(&enc, &x, 1, 64).unwrap();
    let two = input_saliency(&enc, &x, 2, 64).unwrap();
    for (a, b) in one.iter().zip(&two) {
        assert!((a - b).abs() < 1e-10, "one {a} vs two {b}");
        assert!(*a > 0.0, "saliency degenerated to zero");
    }
}

#[test]
fn input_saliency_is_reproducible() {
    let enc = encoder_with_scale(0.4, 5);
    let x = vec![0, 7, 3, 3];
    assert_eq!(
        input_saliency(&enc, &x, 5, 12).unwrap(),
        input_saliency(&enc, &x, 5, 12).unwrap()
    );
}

fn small_trained_free_bundle(seed: u64) -> (Bundle, savae::oracle::Dataset) {
    let spec = OracleSpec {
        vocab: 15,
        embed: 6,
        hidden: 6,
        latent: 2,
        seq_len: 5,
        narrow_init: 1.0,
        wide_init: 4.0,
        n_train: 30,
        n_valid: 10,
        n_test: 10,
        seed,
    };
    let gen = build_oracle(&spec);
    let data = sample_dataset(&gen, &spec);
    let enc = SeqEncoder::init_uniform(
        EncDims {
            vocab: spec.vocab,
            embed: spec.embed,
            hidden: spec.hidden,
            latent: spec.latent,
        },
        0.1,
        seed + 1,
    );
    (
        Bundle {
            gen,
            enc: Some(enc),
        },
        data,
    )
}

#[test]
fn refinement_curves_cover_the_protocol_steps() {
    let (bundle, data) = small_trained_free_bundle(31);
    let cfg = SviConfig::with_steps(20);
    let ks = [0usize, 10, 20, 40];
    let rows = refinement_curves(&bundle, "sa_vae", &data.test, &cfg, &ks, true, 0.02, 3).unwrap();
    assert_eq!(rows.len(), 8); // random + encoder per K
    for &k in &ks {
        assert!(rows.iter().any(|r| r.steps == k && r.init == "random"));
        assert!(rows.iter().any(|r| r.steps == k && r.init == "encoder"));
    }
    // K' = 0 encoder row equals plain evaluation
    let plain = evaluate(&bundle, &data.test, &cfg, EvalMode::EncoderOnly, 0.02, 3).unwrap();
    let row0 = rows
        .iter()
        .find(|r| r.steps == 0 && r.init == "encoder")
        .unwrap();
    assert_eq!(row0.bound.to_bits(), plain.neg_elbo.to_bits());
}

#[test]
fn saliency_report_and_aggregates_are_consistent() {
    let (bundle, data) = small_trained_free_bundle(32);
    let cfg = SviConfig::with_steps(4);
    let report = saliency_report(&bundle, &data.test[..4], &cfg, 4, 3, 0.02, 17).unwrap();
    let n_tokens: usize = data.test[..4].iter().map(|s| s.len()).sum();
    assert_eq!(report.records.len(), n_tokens);
    assert!(report.records.iter().all(|r| r.out_saliency >= 0.0));
    assert!(report.records.iter().all(|r| r.in_saliency >= 0.0));

    let agg = saliency_aggregates(&report, None);
    let count_sum: usize = agg.by_position.iter().map(|b| b.count).sum();
    assert_eq!(count_sum, n_tokens);
    let freq_sum: usize = agg.by_log2_frequency.iter().map(|b| b.count).sum();
    assert_eq!(freq_sum, n_tokens);
    assert!(agg.by_class.is_none());
    assert!(agg.saliency_logprob_correlation.abs() <= 1.0);

    // with a tag map, class aggregation appears
    let mut classes = std::collections::HashMap::new();
    for t in 0..15 {
        classes.insert(t, if t % 2 == 0 { "even".to_string() } else { "odd".to_string() });
    }
    let agg2 = saliency_aggregates(&report, Some(&classes));
    let class_sum: usize = agg2.by_class.as_ref().unwrap().iter().map(|b| b.count).sum();
    assert_eq!(class_sum, n_tokens);
}

#[test]
fn uniform_saliency_gives_equal_bucket_means() {
    use savae::analysis::{SaliencyRecord, SaliencyReport};
    let records = (0..12)
        .map(|i| SaliencyRecord {
            example: i / 4,
            position: i % 4,
            token: i % 3,
            out_saliency: 2.5,
            in_saliency: 1.5,
            log_prob: -1.0 - (i % 2) as f64,
        })
        .collect();
    let report = SaliencyReport { records };
    let agg = saliency_aggregates(&report, None);
    for b in agg.by_position.iter().chain(&agg.by_log2_frequency) {
        assert_eq!(b.mean_out, 2.5);
        assert_eq!(b.mean_in, 1.5);
    }
}

#[test]
fn saliency_sample_count_is_rank_stable() {
    // longer sequence: with very few tokens a single adjacent rank swap
    // already drags spearman to the 0.9 boundary
    let spec = OracleSpec {
        vocab: 15,
        embed: 6,
        hidden: 6,
        latent: 2,
        seq_len: 12,
        narrow_init: 1.0,
        wide_init: 4.0,
        n_train: 1,
        n_valid: 0,
        n_test: 1,
        seed: 33,
    };
    let gen = build_oracle(&spec);
    let data = sample_dataset(&gen, &spec);
    let x = &data.test[0];
    // a fitted per-example posterior, as the measurement protocol assumes
    let obj = savae::variational::ElboObjective::new(&gen, x, 1.0, false)
        .unwrap()
        .with_loss_scale(0.02);
    let cfg = SviConfig::with_steps(40);
    let lam = savae::svi::svi_forward(&obj, &VarParams::prior(2), &cfg, 6)
        .unwrap()
        .lambda_final()
        .clone();
    let s5 = output_saliency(&gen, &lam, x, 5, 2).unwrap();
    let s50 = output_saliency(&gen, &lam, x, 50, 2).unwrap();
    let rho = spearman(&s5, &s50);
    assert!(rho > 0.9, "spearman {rho}");
}
