use serde::{Deserialize, Serialize};

use super::forward::{run_graph, TapeShift};
use super::params::Parameters;
use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, lr_multiplier, AdamW};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One supervised sequence: next-token targets at selected positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSequence {
    pub tokens: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainHyper {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub grad_clip: Option<f64>,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 0.01,
            warmup_fraction: 0.05,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome<T> {
    pub params: Parameters<T>,
    /// Mean answer-token cross-entropy per optimizer step.
    pub losses: Vec<f64>,
}

impl<T> PretrainOutcome<T> {
    /// Exponential moving average of the loss curve.
    pub fn smoothed(&self, decay: f64) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.losses.len());
        let mut acc = None;
        for &l in &self.losses {
            let v = match acc {
                None => l,
                Some(a) => decay * a + (1.0 - decay) * l,
            };
            acc = Some(v);
            out.push(v);
        }
        out
    }
}

/// Loss and parameter gradients of one sequence.
pub fn sequence_gradients<T: Scalar>(
    params: &Parameters<T>,
    seq: &TrainingSequence,
) -> Result<(T, Vec<Tensor<T>>)> {
    let tape = Tape::new();
    let vars = params.on_tape(&tape, true);
    let out = run_graph(
        &vars,
        params,
        &seq.tokens,
        seq.tokens.len(),
        &TapeShift::None,
        None,
        false,
    )?;
    let loss = out.logits.cross_entropy(&seq.positions, &seq.targets)?;
    let grads = tape.backward(loss)?;
    let value = loss.value().item();
    Ok((value, vars.all().into_iter().map(|v| grads.get_or_zeros(v)).collect()))
}

/// Next-token training on answer positions with AdamW.
///
/// `stream(i)` yields the `i`-th training sequence; sequence `i` lands in
/// step `i / batch_size`.
pub fn pretrain<T: Scalar>(
    params: &Parameters<T>,
    stream: &mut dyn FnMut(usize) -> Result<TrainingSequence>,
    hyper: &PretrainHyper,
    mut on_step: impl FnMut(usize, f64),
) -> Result<PretrainOutcome<T>> {
    if hyper.batch_size == 0 {
        return Err(Error::Config("pretrain.batch_size must be positive".into()));
    }
    let mut params = params.clone();
    let shapes: Vec<[usize; 2]> = params.named().iter().map(|(_, t)| t.shape()).collect();
    let decay: Vec<f64> = shapes
        .iter()
        .map(|s| if s[0] > 1 && s[1] > 1 { hyper.weight_decay } else { 0.0 })
        .collect();
    let mut opt = AdamW::<T>::new(&shapes);
    let mut losses = Vec::with_capacity(hyper.steps);
    let inv_batch = T::one() / T::lit(hyper.batch_size as f64);
    for step in 0..hyper.steps {
        let mut acc: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect();
        let mut total = 0.0;
        for b in 0..hyper.batch_size {
            let seq = stream(step * hyper.batch_size + b)?;
            let (loss, grads) = sequence_gradients(&params, &seq)?;
            let l = loss.to_f64_lossy();
            if !l.is_finite() {
                return Err(Error::Diverged { step, loss: l });
            }
            total += l;
            for (a, g) in acc.iter_mut().zip(&grads) {
                for (x, &y) in a.data_mut().iter_mut().zip(g.data()) {
                    *x += y * inv_batch;
                }
            }
        }
        if let Some(max_norm) = hyper.grad_clip {
            clip_grad_norm(&mut acc, max_norm);
        }
        let lr = hyper.lr * lr_multiplier(step, hyper.steps, hyper.warmup_fraction);
        let lrs = vec![lr; shapes.len()];
        let mut slots: Vec<&mut Tensor<T>> = params
            .tensors_mut()
            .into_iter()
            .map(std::sync::Arc::make_mut)
            .collect();
        opt.step(&mut slots, &acc, &lrs, &decay);
        let mean = total / hyper.batch_size as f64;
        losses.push(mean);
        on_step(step, mean);
    }
    Ok(PretrainOutcome { params, losses })
}
