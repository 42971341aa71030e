//! Adaptive-moment optimizer with decoupled weight decay and the
//! warmup/cosine learning-rate schedule shared by every trainer.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: i32,
}

impl<T: Scalar> AdamW<T> {
    /// Fresh (zeroed) moments for parameters of the given shapes.
    pub fn new(shapes: &[[usize; 2]]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    /// One update. `lr[i]` and `weight_decay[i]` apply to `params[i]`.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[Tensor<T>],
        lr: &[f64],
        weight_decay: &[f64],
    ) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.steps += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.steps));
        let c2 = T::lit(1.0 - self.beta2.powi(self.steps));
        let eps = T::lit(self.eps);
        let one = T::one();
        for i in 0..params.len() {
            let rate = T::lit(lr[i]);
            let decay = T::lit(lr[i] * weight_decay[i]);
            let p = params[i].data_mut();
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] = p[j] - decay * p[j] - rate * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Learning-rate multiplier: linear warmup over `ceil(warmup_fraction * total)`
/// steps, then cosine decay to zero at `total`.
pub fn lr_multiplier(step: usize, total: usize, warmup_fraction: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let warmup = (warmup_fraction * total as f64).ceil() as usize;
    if step < warmup {
        return (step + 1) as f64 / warmup as f64;
    }
    let span = (total - warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| {
            let v = x.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = T::lit(max_norm / total);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    total
}
