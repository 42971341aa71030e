//! Properties of the learnable in-context vectors: the gradient against finite
//! differences of an independently computed loss, gauge symmetry, neutral
//! elements, merging, initialization and teacher isolation.

use icvlab_core::intervention::{IcvBundle, InterventionSpec};
use icvlab_core::live::{
    init_live, live_loss, merge_live, student_distribution, student_gradients,
    teacher_distribution, train_live, LiveHyper, LiveObjective,
};
use icvlab_core::model::{forward, init_model, ForwardOptions, ModelConfig, Parameters};
use icvlab_core::tasks::{generate_dataset, render, sample_episode, Dataset, Split, TaskSpec};
use icvlab_core::tensor::{kl_divergence, softmax, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_mlp: 32,
        vocab_size: 128,
        max_seq_len: 160,
        recency_bias: true,
    }
}

fn dataset(seed: u64) -> Dataset {
    let spec = TaskSpec {
        train_size: Some(40),
        eval_size: Some(10),
        ..TaskSpec::mixed()
    };
    generate_dataset(&spec, seed).unwrap()
}

fn random_bundle(rng: &mut ChaCha8Rng, cfg: &ModelConfig, shared: bool, spread: f64) -> IcvBundle<f64> {
    let slots = if shared { 1 } else { cfg.n_layers };
    IcvBundle {
        vectors: (0..slots)
            .map(|_| (0..cfg.d_model).map(|_| rng.random_range(-spread..spread)).collect())
            .collect(),
        alphas: (0..slots).map(|_| rng.random_range(0.2..1.2)).collect(),
        shared,
    }
}

/// Objective through the numeric path: student distributions from a plain
/// forward, then the explicit KL and log-likelihood terms.
fn numeric_objective(
    params: &Parameters<f64>,
    data: &Dataset,
    index: usize,
    teacher: &Tensor<f64>,
    bundle: &IcvBundle<f64>,
    lambda: f64,
    objective: LiveObjective,
) -> f64 {
    let query = &data.train[index];
    let student = student_distribution(params, query, bundle).unwrap();
    let parts = live_loss(teacher, &student, &query.answer, lambda).unwrap();
    match objective {
        LiveObjective::Combined => parts.loss,
        LiveObjective::DistillOnly => parts.l_d,
        LiveObjective::GroundTruthOnly => parts.l_gt,
    }
}

#[test]
fn bundle_gradient_matches_finite_differences_of_the_numeric_loss() {
    let cfg = small_config();
    let objectives = [
        LiveObjective::Combined,
        LiveObjective::DistillOnly,
        LiveObjective::GroundTruthOnly,
    ];
    for seed in 0..20u64 {
        let params = init_model::<f64>(&cfg, 100 + seed).unwrap();
        let data = dataset(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shared = seed % 4 == 3;
        let bundle = random_bundle(&mut rng, &cfg, shared, 1.0);
        let index = rng.random_range(0..data.train.len());
        let episode = sample_episode(&data, Split::Train, 2, seed, index).unwrap();
        let teacher = teacher_distribution(&params, &episode).unwrap();
        let objective = objectives[seed as usize % 3];
        let lambda = 0.5;

        let (parts, grad) =
            student_gradients(&params, &episode.query, &teacher, &bundle, lambda, objective).unwrap();
        let f = |b: &IcvBundle<f64>| numeric_objective(&params, &data, index, &teacher, b, lambda, objective);
        let value = f(&bundle);
        let tape_value = match objective {
            LiveObjective::Combined => parts.loss,
            LiveObjective::DistillOnly => parts.l_d,
            LiveObjective::GroundTruthOnly => parts.l_gt,
        };
        assert!((value - tape_value).abs() <= 1e-10, "seed {seed}: {value} vs {tape_value}");

        let eps = 1e-5;
        let mut worst = 0.0f64;
        let mut probe = |analytic: f64, edit: &dyn Fn(&mut IcvBundle<f64>, f64)| {
            let mut plus = bundle.clone();
            edit(&mut plus, eps);
            let mut minus = bundle.clone();
            edit(&mut minus, -eps);
            let numeric = (f(&plus) - f(&minus)) / (2.0 * eps);
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(1.0));
        };
        for s in 0..bundle.alphas.len() {
            probe(grad.alphas[s], &|b, e| b.alphas[s] += e);
            for j in [0, 5, 11, cfg.d_model - 1] {
                probe(grad.vectors[s][j], &|b, e| b.vectors[s][j] += e);
            }
        }
        assert!(worst <= 1e-5, "seed {seed}: relative error {worst:e}");
    }
}

#[test]
fn gauge_rescaling_by_a_power_of_two_is_exact() {
    let cfg = small_config();
    let params = init_model::<f64>(&cfg, 5).unwrap();
    let data = dataset(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bundle = random_bundle(&mut rng, &cfg, false, 0.5);
    let episode = sample_episode(&data, Split::Train, 2, 5, 3).unwrap();
    let teacher = teacher_distribution(&params, &episode).unwrap();
    for c in [0.25, 2.0, 8.0] {
        let gauged = IcvBundle {
            vectors: bundle.vectors.iter().map(|v| v.iter().map(|x| x * c).collect()).collect(),
            alphas: bundle.alphas.iter().map(|a| a / c).collect(),
            shared: false,
        };
        let (p0, g0) =
            student_gradients(&params, &episode.query, &teacher, &bundle, 0.5, LiveObjective::Combined).unwrap();
        let (p1, g1) =
            student_gradients(&params, &episode.query, &teacher, &gauged, 0.5, LiveObjective::Combined).unwrap();
        assert_eq!(p0, p1, "c = {c}");
        for l in 0..cfg.n_layers {
            assert_eq!(g1.alphas[l], g0.alphas[l] * c);
            for (a, b) in g1.vectors[l].iter().zip(&g0.vectors[l]) {
                assert_eq!(*a, b / c);
            }
        }
    }
}

#[test]
fn zero_bundle_reproduces_the_plain_forward() {
    let cfg = small_config();
    let params = init_model::<f64>(&cfg, 9).unwrap();
    let data = dataset(9);
    let episode = sample_episode(&data, Split::Eval, 0, 9, 0).unwrap();
    let r = render(&episode, true, cfg.max_seq_len).unwrap();
    let opts = ForwardOptions::default();
    let plain = forward(&params, &r.tokens, &InterventionSpec::None, &opts).unwrap();
    for shared in [false, true] {
        let mut zero = IcvBundle::zeros(cfg.n_layers, cfg.d_model);
        if shared {
            zero = IcvBundle {
                vectors: vec![vec![0.0; cfg.d_model]],
                alphas: vec![0.0],
                shared: true,
            };
        }
        let shifted = forward(&params, &r.tokens, &InterventionSpec::AddPerLayer(zero), &opts).unwrap();
        assert_eq!(plain.logits, shifted.logits);
    }
    // A nonzero vector behind a zero gate is also neutral.
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut gated = random_bundle(&mut rng, &cfg, false, 3.0);
    gated.alphas = vec![0.0; cfg.n_layers];
    let shifted = forward(&params, &r.tokens, &InterventionSpec::AddPerLayer(gated), &opts).unwrap();
    assert_eq!(plain.logits, shifted.logits);
}

#[test]
fn zero_shot_teacher_equals_zero_bundle_student() {
    let cfg = small_config();
    let params = init_model::<f64>(&cfg, 11).unwrap();
    let data = dataset(11);
    for i in 0..5 {
        let episode = sample_episode(&data, Split::Train, 0, 3, i).unwrap();
        assert!(episode.demos.is_empty());
        let teacher = teacher_distribution(&params, &episode).unwrap();
        let student =
            student_distribution(&params, &episode.query, &IcvBundle::zeros(cfg.n_layers, cfg.d_model)).unwrap();
        assert_eq!(teacher, student);
        let parts = live_loss(&teacher, &student, &episode.query.answer, 0.0).unwrap();
        assert!(parts.l_d.abs() <= 1e-15);
    }
}

#[test]
fn merge_sums_gated_vectors() {
    let cfg = small_config();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let bundles: Vec<_> = (0..4).map(|_| random_bundle(&mut rng, &cfg, false, 1.0)).collect();
    let merged = merge_live(&bundles).unwrap();
    assert_eq!(merged.alphas, vec![1.0; cfg.n_layers]);
    for l in 0..cfg.n_layers {
        for j in 0..cfg.d_model {
            let oracle: f64 = bundles.iter().map(|b| b.alphas[l] * b.vectors[l][j]).sum();
            assert!((merged.vectors[l][j] - oracle).abs() <= 1e-12);
        }
    }
    let mut mixed = bundles.clone();
    mixed[1].vectors.pop();
    mixed[1].alphas.pop();
    assert!(merge_live(&mixed).is_err());
    assert!(merge_live::<f64>(&[]).is_err());
}

#[test]
fn init_statistics_and_parameter_count() {
    let cfg = ModelConfig::default();
    let mut values = Vec::new();
    for seed in 0..100 {
        let b = init_live::<f64>(&cfg, seed, false);
        assert_eq!(b.n_trainable(), 260);
        assert_eq!(b.alphas, vec![0.1; 4]);
        values.extend(b.vectors.into_iter().flatten());
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 4.0 * 0.01 / n.sqrt(), "mean {mean}");
    assert!((sd - 0.01).abs() < 0.0003, "sd {sd}");
    let shared = init_live::<f64>(&cfg, 0, true);
    assert_eq!(shared.n_trainable(), 65);
    assert_eq!(init_live::<f64>(&cfg, 3, false), init_live::<f64>(&cfg, 3, false));
}

fn quick_hyper() -> LiveHyper {
    LiveHyper {
        batch_size: 2,
        accumulation: 2,
        epochs: 1,
        k: 2,
        seed: 4,
        ..LiveHyper::default()
    }
}

#[test]
fn zero_learning_rates_leave_the_bundle_at_init() {
    let cfg = small_config();
    let params = init_model::<f64>(&cfg, 13).unwrap();
    let data = dataset(13).truncated(12, 4);
    let hyper = LiveHyper {
        lr_v: 0.0,
        lr_alpha: 0.0,
        ..quick_hyper()
    };
    let mut seen = 0;
    let out = train_live(&params, &data, &hyper, |_| seen += 1).unwrap();
    assert_eq!(out.bundle, init_live::<f64>(&cfg, hyper.seed, false));
    assert_eq!(seen, 3);
    assert_eq!(out.metrics.len(), 3);
}

#[test]
fn training_moves_the_bundle_and_never_the_model() {
    let cfg = small_config();
    let params = init_model::<f64>(&cfg, 17).unwrap();
    let before = params.fingerprint();
    let data = dataset(17).truncated(12, 4);
    let hyper = LiveHyper {
        lr_v: 1e-2,
        ..quick_hyper()
    };
    let out = train_live(&params, &data, &hyper, |_| {}).unwrap();
    assert_eq!(params.fingerprint(), before);
    assert_ne!(out.bundle, init_live::<f64>(&cfg, hyper.seed, false));
    assert!(out.metrics.iter().all(|m| m.loss.is_finite()));
    let again = train_live(&params, &data, &hyper, |_| {}).unwrap();
    assert_eq!(out.bundle, again.bundle);
}

#[test]
fn loss_shape_mismatches_are_rejected() {
    let t = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
    let s = Tensor::from_rows(&[vec![0.5, 0.25, 0.25]]).unwrap();
    assert!(live_loss(&t, &s, &[0], 0.5).is_err());
    assert!(live_loss(&t, &t, &[], 0.5).is_err());
    assert!(live_loss(&t, &t, &[7], 0.5).is_err());
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, n).prop_map(|l| softmax(&l))
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_obeys_pinsker((p, q) in (2usize..12).prop_flat_map(|n| (distribution(n), distribution(n)))) {
        let kl = kl_divergence(&p, &q).unwrap();
        let l1: f64 = p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(kl >= -1e-15);
        prop_assert!(kl + 1e-12 >= 0.5 * l1 * l1);
        prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-15);
    }

    #[test]
    fn loss_combines_its_terms(
        (p, q) in (2usize..8).prop_flat_map(|n| (distribution(n), distribution(n))),
        lambda in 0.0f64..2.0,
        gold_seed in any::<usize>(),
    ) {
        let gold = gold_seed % q.len();
        let t = Tensor::from_rows(&[p.clone()]).unwrap();
        let s = Tensor::from_rows(&[q.clone()]).unwrap();
        let parts = live_loss(&t, &s, &[gold], lambda).unwrap();
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        prop_assert!((parts.l_d - kl).abs() <= 1e-12);
        prop_assert!((parts.l_gt + q[gold].ln()).abs() <= 1e-12);
        prop_assert!((parts.loss - (lambda * parts.l_gt + parts.l_d)).abs() <= 1e-12);
    }
}
