//! Learnable in-context vectors: one shift vector and one scalar gate per
//! layer, trained so that the zero-shot model with the shift reproduces the
//! output distribution it has when demonstrations are present.

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalPlan};
use crate::intervention::{IcvBundle, InterventionSpec};
use crate::model::{forward, run_graph, ForwardOptions, ModelConfig, Parameters, TapeShift};
use crate::optim::{lr_multiplier, AdamW};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, rng_for};
use crate::tasks::{render, sample_episode, Dataset, Episode, Pair, Split};
use crate::tensor::{kl_divergence, softmax, Tensor};

pub const BUNDLE_TAG: &str = "icv_bundle";

/// Which terms of `lambda * L_gt + L_d` are optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiveObjective {
    #[default]
    Combined,
    DistillOnly,
    GroundTruthOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LiveHyper {
    /// Weight of the ground-truth term.
    pub lambda: f64,
    pub objective: LiveObjective,
    pub lr_v: f64,
    pub lr_alpha: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Micro-batches per optimizer step.
    pub accumulation: usize,
    pub epochs: usize,
    /// Demonstrations per teacher episode.
    pub k: usize,
    pub seed: u64,
    /// One vector and gate broadcast to every layer.
    pub shared: bool,
    /// Evaluate on the eval split after every epoch.
    pub eval_each_epoch: bool,
    pub eval_limit: Option<usize>,
}

impl Default for LiveHyper {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            objective: LiveObjective::Combined,
            lr_v: 1e-3,
            lr_alpha: 1e-2,
            weight_decay: 1e-3,
            warmup_fraction: 0.1,
            batch_size: 2,
            accumulation: 8,
            epochs: 10,
            k: 8,
            seed: 0,
            shared: false,
            eval_each_epoch: false,
            eval_limit: None,
        }
    }
}

impl LiveHyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("live.{m}")));
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if !(self.lr_v >= 0.0 && self.lr_alpha >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rates and weight_decay must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return bad("batch_size and accumulation must be positive");
        }
        Ok(())
    }

    /// Queries consumed per optimizer step.
    pub fn queries_per_step(&self) -> usize {
        self.batch_size * self.accumulation
    }
}

/// `v ~ N(0, 0.01^2)` per component and every gate at 0.1.
pub fn init_live<T: Scalar>(config: &ModelConfig, seed: u64, shared: bool) -> IcvBundle<T> {
    let slots = if shared { 1 } else { config.n_layers };
    let normal = Normal::new(0.0, 0.01).expect("valid normal");
    let mut rng = rng_for(seed, "live-init");
    IcvBundle {
        vectors: (0..slots)
            .map(|_| {
                (0..config.d_model)
                    .map(|_| T::lit(normal.sample(&mut rng)))
                    .collect()
            })
            .collect(),
        alphas: vec![T::lit(0.1); slots],
        shared,
    }
}

fn answer_distributions<T: Scalar>(
    params: &Parameters<T>,
    episode: &Episode,
    intervention: &InterventionSpec<T>,
) -> Result<Tensor<T>> {
    let r = render(episode, true, params.config.max_seq_len)?;
    let opts = ForwardOptions {
        prompt_len: Some(r.prompt_len),
        ..ForwardOptions::default()
    };
    let out = forward(params, &r.tokens, intervention, &opts)?;
    let rows: Vec<Vec<T>> = r
        .answer_positions
        .iter()
        .map(|&p| softmax(out.logits.row(p)))
        .collect();
    Tensor::from_rows(&rows)
}

/// Next-token distributions at the query's answer positions with the
/// episode's demonstrations in context. Computed from values only, so no
/// gradient can reach the model.
pub fn teacher_distribution<T: Scalar>(
    params: &Parameters<T>,
    episode: &Episode,
) -> Result<Tensor<T>> {
    answer_distributions(params, episode, &InterventionSpec::None)
}

fn zero_shot_episode(query: &Pair) -> Episode {
    Episode {
        demos: Vec::new(),
        query: query.clone(),
        task: String::new(),
        seed: 0,
    }
}

/// Distributions at the answer positions of the bare query with the bundle
/// applied at every layer.
pub fn student_distribution<T: Scalar>(
    params: &Parameters<T>,
    query: &Pair,
    bundle: &IcvBundle<T>,
) -> Result<Tensor<T>> {
    answer_distributions(
        params,
        &zero_shot_episode(query),
        &InterventionSpec::AddPerLayer(bundle.clone()),
    )
}

/// Terms of the training objective, averaged over answer positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    pub l_d: f64,
    pub l_gt: f64,
}

fn combine(objective: LiveObjective, lambda: f64, l_d: f64, l_gt: f64) -> f64 {
    match objective {
        LiveObjective::Combined => lambda * l_gt + l_d,
        LiveObjective::DistillOnly => l_d,
        LiveObjective::GroundTruthOnly => l_gt,
    }
}

/// `lambda * L_gt + L_d` from explicit distributions: `L_d` is the mean of
/// `KL(teacher || student)` and `L_gt` the mean of `-ln student[gold]`.
pub fn live_loss<T: Scalar>(
    teacher: &Tensor<T>,
    student: &Tensor<T>,
    gold: &[usize],
    lambda: f64,
) -> Result<LossParts> {
    if teacher.shape() != student.shape() || teacher.rows() != gold.len() || gold.is_empty() {
        return Err(Error::Invalid(format!(
            "live_loss: teacher {:?}, student {:?}, {} gold tokens",
            teacher.shape(),
            student.shape(),
            gold.len()
        )));
    }
    let n = gold.len() as f64;
    let mut l_d = 0.0;
    let mut l_gt = 0.0;
    for (i, &g) in gold.iter().enumerate() {
        l_d += kl_divergence(teacher.row(i), student.row(i))?.to_f64_lossy();
        let p = student.row(i).get(g).copied().ok_or(Error::OutOfRange {
            what: "gold token",
            index: g,
            limit: student.cols(),
        })?;
        l_gt -= p.to_f64_lossy().max(crate::tensor::KL_FLOOR).ln();
    }
    let (l_d, l_gt) = (l_d / n, l_gt / n);
    Ok(LossParts {
        loss: combine(LiveObjective::Combined, lambda, l_d, l_gt),
        l_d,
        l_gt,
    })
}

/// Objective value and its gradient with respect to the bundle (vectors and
/// gates) for one query, given the teacher's distributions.
pub fn student_gradients<T: Scalar>(
    params: &Parameters<T>,
    query: &Pair,
    teacher: &Tensor<T>,
    bundle: &IcvBundle<T>,
    lambda: f64,
    objective: LiveObjective,
) -> Result<(LossParts, IcvBundle<T>)> {
    let cfg = &params.config;
    bundle.validate(cfg.n_layers, cfg.d_model)?;
    let r = render(&zero_shot_episode(query), true, cfg.max_seq_len)?;
    let tape = Tape::new();
    let vars = params.on_tape(&tape, false);
    let vs: Vec<_> = bundle
        .vectors
        .iter()
        .map(|v| tape.leaf(Tensor::row_vector(v.clone()), true))
        .collect();
    let alphas: Vec<_> = bundle
        .alphas
        .iter()
        .map(|&a| tape.leaf(Tensor::scalar(a), true))
        .collect();
    let shifts = vs
        .iter()
        .zip(&alphas)
        .map(|(&v, &a)| v.scale_by(a))
        .collect::<Result<Vec<_>>>()?;
    let out = run_graph(
        &vars,
        params,
        &r.tokens,
        r.prompt_len,
        &TapeShift::PerLayer(shifts),
        None,
        false,
    )?;
    let l_d = out.logits.kl_from_logits(&r.answer_positions, teacher)?;
    let l_gt = out.logits.cross_entropy(&r.answer_positions, &r.answer_targets)?;
    let loss = match objective {
        LiveObjective::Combined => l_gt.scale(T::lit(lambda)).add(l_d)?,
        LiveObjective::DistillOnly => l_d,
        LiveObjective::GroundTruthOnly => l_gt,
    };
    let grads = tape.backward(loss)?;
    let parts = LossParts {
        loss: loss.value().item().to_f64_lossy(),
        l_d: l_d.value().item().to_f64_lossy(),
        l_gt: l_gt.value().item().to_f64_lossy(),
    };
    let grad_bundle = IcvBundle {
        vectors: vs.iter().map(|&v| grads.get_or_zeros(v).into_vec()).collect(),
        alphas: alphas.iter().map(|&a| grads.get_or_zeros(a).item()).collect(),
        shared: bundle.shared,
    };
    Ok((parts, grad_bundle))
}

/// One optimizer step's record; `eval_acc` is set on the last step of an
/// epoch when per-epoch evaluation is on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub loss: f64,
    pub l_d: f64,
    pub l_gt: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LiveOutcome<T> {
    pub bundle: IcvBundle<T>,
    pub metrics: Vec<StepMetric>,
}

/// Trains a bundle on the training split of `dataset` with the model frozen.
///
/// Every epoch visits the training queries in a fresh order and draws fresh
/// demonstrations for each teacher episode. Vectors and gates form two
/// parameter groups with their own learning rates; both use decoupled weight
/// decay and a linear warmup followed by cosine decay. `on_step` receives each
/// metric as soon as it is final.
pub fn train_live<T: Scalar>(
    params: &Parameters<T>,
    dataset: &Dataset,
    hyper: &LiveHyper,
    mut on_step: impl FnMut(&StepMetric),
) -> Result<LiveOutcome<T>> {
    hyper.validate()?;
    let cfg = &params.config;
    let n = dataset.train.len();
    if n < hyper.batch_size || n <= hyper.k {
        return Err(Error::Config(format!(
            "training split of {n} queries is too small for batch {} with k = {}",
            hyper.batch_size, hyper.k
        )));
    }
    let mut bundle = init_live::<T>(cfg, hyper.seed, hyper.shared);
    let slots = bundle.vectors.len();
    let group = hyper.queries_per_step();
    let steps_per_epoch = n.div_ceil(group);
    let total = steps_per_epoch * hyper.epochs;

    // Parameter layout for the optimizer: one row per vector, then all gates.
    let mut shapes = vec![[1, cfg.d_model]; slots];
    shapes.push([1, slots]);
    let mut opt = AdamW::<T>::new(&shapes);
    let mut lrs = vec![hyper.lr_v; slots];
    lrs.push(hyper.lr_alpha);
    let decay = vec![hyper.weight_decay; slots + 1];

    let mut metrics = Vec::with_capacity(total);
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let epoch_seed = derive_seed(hyper.seed, &format!("live-epoch-{epoch}"));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(epoch_seed, "order"));
        for chunk in order.chunks(group) {
            let results = chunk
                .par_iter()
                .map(|&i| {
                    let episode = sample_episode(dataset, Split::Train, hyper.k, epoch_seed, i)?;
                    let teacher = teacher_distribution(params, &episode)?;
                    student_gradients(
                        params,
                        &episode.query,
                        &teacher,
                        &bundle,
                        hyper.lambda,
                        hyper.objective,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let scale = 1.0 / results.len() as f64;
            let mut grads: Vec<Tensor<T>> = shapes.iter().map(|s| Tensor::zeros(s[0], s[1])).collect();
            let mut sums = (0.0, 0.0, 0.0);
            for (parts, g) in &results {
                sums.0 += parts.loss * scale;
                sums.1 += parts.l_d * scale;
                sums.2 += parts.l_gt * scale;
                let w = T::lit(scale);
                for (s, v) in g.vectors.iter().enumerate() {
                    for (acc, &x) in grads[s].data_mut().iter_mut().zip(v) {
                        *acc += x * w;
                    }
                }
                for (acc, &a) in grads[slots].data_mut().iter_mut().zip(&g.alphas) {
                    *acc += a * w;
                }
            }
            if !sums.0.is_finite() {
                return Err(Error::Diverged { step, loss: sums.0 });
            }
            let mult = lr_multiplier(step, total, hyper.warmup_fraction);
            let step_lrs: Vec<f64> = lrs.iter().map(|&lr| lr * mult).collect();
            let mut tensors: Vec<Tensor<T>> = bundle
                .vectors
                .iter()
                .map(|v| Tensor::row_vector(v.clone()))
                .collect();
            tensors.push(Tensor::row_vector(bundle.alphas.clone()));
            {
                let mut refs: Vec<&mut Tensor<T>> = tensors.iter_mut().collect();
                opt.step(&mut refs, &grads, &step_lrs, &decay);
            }
            bundle.alphas = tensors.pop().expect("gate row").into_vec();
            bundle.vectors = tensors.into_iter().map(Tensor::into_vec).collect();

            let mut metric = StepMetric {
                step,
                loss: sums.0,
                l_d: sums.1,
                l_gt: sums.2,
                eval_acc: None,
            };
            step += 1;
            let epoch_done = step % steps_per_epoch == 0;
            if epoch_done && hyper.eval_each_epoch {
                let plan = EvalPlan {
                    k: 0,
                    seed: derive_seed(hyper.seed, "live-eval"),
                    limit: hyper.eval_limit,
                };
                let spec = InterventionSpec::AddPerLayer(bundle.clone());
                metric.eval_acc = Some(evaluate(params, dataset, Split::Eval, &spec, &plan)?.accuracy);
            }
            on_step(&metric);
            metrics.push(metric);
        }
    }
    Ok(LiveOutcome { bundle, metrics })
}

/// Folds several per-layer bundles into one: `v_l = sum_i alpha_l^i v_l^i`
/// with every merged gate equal to one.
pub fn merge_live<T: Scalar>(bundles: &[IcvBundle<T>]) -> Result<IcvBundle<T>> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Invalid("merge_live needs at least one bundle".into()))?;
    let layers = first.vectors.len();
    let d = first.vectors.first().map_or(0, Vec::len);
    let mut vectors = vec![vec![T::zero(); d]; layers];
    for (i, b) in bundles.iter().enumerate() {
        if b.shared {
            return Err(Error::Invalid(format!("bundle {i} is in shared mode")));
        }
        b.validate(layers, d)?;
        for (l, acc) in vectors.iter_mut().enumerate() {
            for (x, &v) in acc.iter_mut().zip(&b.vectors[l]) {
                *x += b.alphas[l] * v;
            }
        }
    }
    Ok(IcvBundle {
        vectors,
        alphas: vec![T::one(); layers],
        shared: false,
    })
}

impl<T: Scalar> IcvBundle<T> {
    /// Container form: one `1 x d` tensor per slot plus a `1 x slots` gate row.
    pub fn to_container(&self, metadata: serde_json::Value) -> Container<T> {
        let mut meta = serde_json::json!({ "shared": self.shared });
        if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), metadata) {
            m.extend(extra);
        }
        let mut c = Container::new(BUNDLE_TAG, meta);
        for (l, v) in self.vectors.iter().enumerate() {
            c.push(format!("vector.{l}"), Tensor::row_vector(v.clone()));
        }
        c.push("alphas", Tensor::row_vector(self.alphas.clone()));
        c
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.tag != BUNDLE_TAG {
            return Err(Error::Checkpoint(format!("expected an icv bundle, found {:?}", c.tag)));
        }
        let shared = c
            .metadata
            .get("shared")
            .and_then(serde_json::Value::as_bool)
            .ok_or_else(|| Error::Checkpoint("bundle manifest lacks `shared`".into()))?;
        let alphas = c.get("alphas")?.data().to_vec();
        let vectors = (0..alphas.len())
            .map(|l| Ok(c.get(&format!("vector.{l}"))?.data().to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            vectors,
            alphas,
            shared,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_of_one_folds_gates() {
        let b = IcvBundle {
            vectors: vec![vec![1.0, 2.0], vec![-1.0, 0.5]],
            alphas: vec![0.5, 3.0],
            shared: false,
        };
        let m = merge_live(&[b.clone()]).unwrap();
        assert_eq!(m.alphas, vec![1.0, 1.0]);
        for l in 0..2 {
            assert_eq!(m.shift(l), b.shift(l));
        }
    }

    #[test]
    fn merge_rejects_shared() {
        let b = IcvBundle {
            vectors: vec![vec![1.0]],
            alphas: vec![1.0],
            shared: true,
        };
        assert!(merge_live(&[b]).is_err());
    }

    #[test]
    fn loss_is_zero_when_student_is_teacher() {
        let t = Tensor::from_rows(&[vec![0.25, 0.75]]).unwrap();
        let parts = live_loss(&t, &t, &[1], 0.0).unwrap();
        assert!(parts.loss.abs() < 1e-15);
        assert!(live_loss(&t, &t, &[1, 0], 0.0).is_err());
    }

    #[test]
    fn bundle_container_round_trip() {
        let b = init_live::<f64>(&ModelConfig::default(), 3, false);
        let c = b.to_container(serde_json::json!({ "task": "x" }));
        assert_eq!(c.metadata["task"], "x");
        let back = IcvBundle::from_container(&Container::from_bytes(&c.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, b);
    }
}
