use std::sync::Arc;

use icvlab_core::intervention::InterventionSpec;
use icvlab_core::model::{
    forward, init_model, sequence_gradients, ForwardOptions, ModelConfig, Parameters,
    TrainingSequence,
};
use icvlab_core::tensor::cross_entropy;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: 11,
        max_seq_len: 12,
        recency_bias: true,
    }
}

fn loss(params: &Parameters<f64>, seq: &TrainingSequence) -> f64 {
    let out = forward(params, &seq.tokens, &InterventionSpec::None, &ForwardOptions::default())
        .unwrap();
    let total: f64 = seq
        .positions
        .iter()
        .zip(&seq.targets)
        .map(|(&p, &t)| cross_entropy(out.logits.row(p), t).unwrap())
        .sum();
    total / seq.positions.len() as f64
}

/// Perturbs randomly initialised (non-trivial) parameters so gains and biases
/// are not at their special initial values.
fn jittered(seed: u64) -> Parameters<f64> {
    let mut p = init_model::<f64>(&tiny(), seed).unwrap();
    let noise = init_model::<f64>(&tiny(), seed + 1000).unwrap();
    let noise: Vec<_> = noise.named().into_iter().map(|(_, t)| t.clone()).collect();
    for (slot, n) in p.tensors_mut().into_iter().zip(noise) {
        let t = Arc::make_mut(slot);
        for (x, &y) in t.data_mut().iter_mut().zip(n.data()) {
            *x += 10.0 * y;
        }
    }
    p
}

#[test]
fn full_model_gradients_match_central_differences() {
    let seq = TrainingSequence {
        tokens: vec![0, 4, 7, 2, 9, 3, 1, 5, 2, 10],
        positions: vec![3, 4, 8],
        targets: vec![9, 3, 10],
    };
    for seed in 0..3 {
        let params = jittered(seed);
        let (value, grads) = sequence_gradients(&params, &seq).unwrap();
        assert!((value - loss(&params, &seq)).abs() < 1e-12);
        let eps = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, (name, t)) in params.named().into_iter().enumerate() {
            for j in 0..t.len() {
                let probe = |delta: f64| {
                    let mut p = params.clone();
                    Arc::make_mut(p.tensors_mut().swap_remove(i)).data_mut()[j] += delta;
                    loss(&p, &seq)
                };
                let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
                let a = grads[i].data()[j];
                let err = (a - numeric).abs() / a.abs().max(1.0);
                assert!(err <= 1e-5, "{name}[{j}]: analytic {a} numeric {numeric}");
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-5);
    }
}
