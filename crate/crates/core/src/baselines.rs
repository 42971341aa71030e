//! Non-learnable in-context vectors (task vector, function vector, PCA-ICV)
//! and a trainable low-rank adapter on the unembedding.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::eval::{evaluate, evaluate_queries, EvalPlan};
use crate::intervention::InterventionSpec;
use crate::model::{
    forward, residual_streams, run_graph, ForwardOptions, HeadAdapter, ModelConfig, Parameters,
    TapeShift,
};
use crate::optim::{lr_multiplier, AdamW};
use crate::scalar::Scalar;
use crate::seed::{derive_seed, indexed_rng, rng_for};
use crate::tasks::{render, Dataset, Episode, Pair, Split};
use crate::tensor::{dot, norm, Tensor};

pub const EXTRACTED_TAG: &str = "extracted_vector";
pub const LORA_TAG: &str = "lora_head";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VectorMethod {
    TaskVector,
    FunctionVector,
    PcaIcv,
}

/// A vector (or per-layer set) read off the model, with how to apply it.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractedVector<T> {
    pub method: VectorMethod,
    /// Target layer for task and function vectors.
    pub layer: Option<usize>,
    /// One vector, or one per layer for PCA-ICV.
    pub vectors: Vec<Vec<T>>,
    /// PCA-ICV strength.
    pub strength: Option<f64>,
    /// Number of extraction episodes or demonstrations.
    pub episodes: usize,
    pub seed: u64,
}

impl<T: Scalar> ExtractedVector<T> {
    pub fn intervention(&self) -> Result<InterventionSpec<T>> {
        let single = || {
            self.vectors
                .first()
                .cloned()
                .ok_or_else(|| Error::Invalid("extracted vector is empty".into()))
        };
        let layer = || {
            self.layer
                .ok_or_else(|| Error::Invalid("extracted vector lacks a layer".into()))
        };
        Ok(match self.method {
            VectorMethod::TaskVector => InterventionSpec::ReplaceLastToken {
                layer: layer()?,
                vector: single()?,
            },
            VectorMethod::FunctionVector => InterventionSpec::AddLastToken {
                layer: layer()?,
                vector: single()?,
            },
            VectorMethod::PcaIcv => InterventionSpec::AddAllTokens {
                vectors: self.vectors.clone(),
                strength: T::lit(
                    self.strength
                        .ok_or_else(|| Error::Invalid("PCA-ICV lacks a strength".into()))?,
                ),
                renormalize: true,
            },
        })
    }

    pub fn with_strength(&self, strength: f64) -> Self {
        Self {
            strength: Some(strength),
            ..self.clone()
        }
    }

    pub fn to_container(&self) -> Result<Container<T>> {
        let mut c = Container::new(
            EXTRACTED_TAG,
            serde_json::json!({
                "method": self.method,
                "layer": self.layer,
                "strength": self.strength,
                "episodes": self.episodes,
                "seed": self.seed,
            }),
        );
        for (i, v) in self.vectors.iter().enumerate() {
            c.push(format!("vector.{i}"), Tensor::row_vector(v.clone()));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.tag != EXTRACTED_TAG {
            return Err(Error::Checkpoint(format!(
                "expected an extracted vector, found {:?}",
                c.tag
            )));
        }
        #[derive(Deserialize)]
        struct Meta {
            method: VectorMethod,
            layer: Option<usize>,
            strength: Option<f64>,
            episodes: usize,
            seed: u64,
        }
        let m: Meta = serde_json::from_value(c.metadata.clone())?;
        let vectors = c.tensors.iter().map(|(_, t)| t.data().to_vec()).collect();
        Ok(Self {
            method: m.method,
            layer: m.layer,
            vectors,
            strength: m.strength,
            episodes: m.episodes,
            seed: m.seed,
        })
    }
}

fn mean_rows<T: Scalar>(rows: &[Vec<T>]) -> Vec<T> {
    let n = T::lit(rows.len() as f64);
    let mut out = vec![T::zero(); rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (o, &x) in out.iter_mut().zip(r) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Post-block states of the final prompt position at every layer, for an
/// episode rendered without the query answer.
fn last_token_states<T: Scalar>(params: &Parameters<T>, episode: &Episode) -> Result<Vec<Vec<T>>> {
    let r = render(episode, false, params.config.max_seq_len)?;
    let (_, streams) = residual_streams(params, &r.tokens, &InterventionSpec::None, None)?;
    let last = r.tokens.len() - 1;
    Ok(streams.iter().map(|s| s.row(last).to_vec()).collect())
}

/// Task vectors for every layer: the mean final-prompt-position state over
/// the extraction episodes (demonstrations plus an unanswered query).
pub fn task_vectors<T: Scalar>(
    params: &Parameters<T>,
    episodes: &[Episode],
    seed: u64,
) -> Result<Vec<ExtractedVector<T>>> {
    if episodes.is_empty() {
        return Err(Error::Invalid("task vector needs at least one episode".into()));
    }
    let states = episodes
        .par_iter()
        .map(|e| last_token_states(params, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..params.config.n_layers)
        .map(|l| {
            let per_layer: Vec<Vec<T>> = states.iter().map(|s| s[l].clone()).collect();
            ExtractedVector {
                method: VectorMethod::TaskVector,
                layer: Some(l),
                vectors: vec![mean_rows(&per_layer)],
                strength: None,
                episodes: episodes.len(),
                seed,
            }
        })
        .collect())
}

pub fn extract_task_vector<T: Scalar>(
    params: &Parameters<T>,
    episodes: &[Episode],
    layer: usize,
    seed: u64,
) -> Result<ExtractedVector<T>> {
    if layer >= params.config.n_layers {
        return Err(Error::OutOfRange {
            what: "task vector layer",
            index: layer,
            limit: params.config.n_layers,
        });
    }
    Ok(task_vectors(params, episodes, seed)?.swap_remove(layer))
}

/// Accuracy of each candidate and the best one (lowest index on ties).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    /// `(setting, accuracy)`: the layer for layer sweeps, the strength for
    /// strength sweeps.
    pub rows: Vec<(f64, f64)>,
    pub best: usize,
}

impl Sweep {
    pub fn best_setting(&self) -> f64 {
        self.rows[self.best].0
    }

    pub fn best_accuracy(&self) -> f64 {
        self.rows[self.best].1
    }

    fn from_rows(rows: Vec<(f64, f64)>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Invalid("empty sweep".into()));
        }
        let mut best = 0;
        for (i, r) in rows.iter().enumerate() {
            if r.1 > rows[best].1 {
                best = i;
            }
        }
        Ok(Self { rows, best })
    }
}

/// Zero-shot accuracy on the eval split with each candidate applied, keyed by
/// `setting(candidate)`.
pub fn sweep<T: Scalar>(
    params: &Parameters<T>,
    dataset: &Dataset,
    candidates: &[ExtractedVector<T>],
    setting: impl Fn(&ExtractedVector<T>) -> f64,
    plan: &EvalPlan,
) -> Result<Sweep> {
    let plan = EvalPlan { k: 0, ..*plan };
    let rows = candidates
        .iter()
        .map(|c| {
            let acc = evaluate(params, dataset, Split::Eval, &c.intervention()?, &plan)?.accuracy;
            Ok((setting(c), acc))
        })
        .collect::<Result<Vec<_>>>()?;
    Sweep::from_rows(rows)
}

pub fn sweep_layers<T: Scalar>(
    params: &Parameters<T>,
    dataset: &Dataset,
    per_layer: &[ExtractedVector<T>],
    plan: &EvalPlan,
) -> Result<Sweep> {
    sweep(params, dataset, per_layer, |c| c.layer.unwrap_or(0) as f64, plan)
}

/// Each head's contribution to the residual stream at the final prompt
/// position: its slice of the attention mix times its rows of `W_O`.
fn head_outputs<T: Scalar>(params: &Parameters<T>, episode: &Episode) -> Result<Vec<Vec<Vec<T>>>> {
    let cfg = &params.config;
    let r = render(episode, false, cfg.max_seq_len)?;
    let opts = ForwardOptions {
        attention: true,
        ..ForwardOptions::default()
    };
    let out = forward(params, &r.tokens, &InterventionSpec::None, &opts)?;
    let traces = out.attention.expect("attention requested");
    let last = r.tokens.len() - 1;
    let dh = cfg.head_dim();
    Ok(traces
        .iter()
        .zip(&params.layers)
        .map(|(tr, lp)| {
            let mix = tr.mix.row(last);
            (0..cfg.n_heads)
                .map(|h| {
                    let mut o = vec![T::zero(); cfg.d_model];
                    for i in h * dh..(h + 1) * dh {
                        for (oj, &w) in o.iter_mut().zip(lp.w_o.row(i)) {
                            *oj += mix[i] * w;
                        }
                    }
                    o
                })
                .collect()
        })
        .collect())
}

/// Mean output of every head over the extraction episodes, `[layer][head]`.
pub fn head_means<T: Scalar>(
    params: &Parameters<T>,
    episodes: &[Episode],
) -> Result<Vec<Vec<Vec<T>>>> {
    if episodes.is_empty() {
        return Err(Error::Invalid("head means need at least one episode".into()));
    }
    let outs = episodes
        .par_iter()
        .map(|e| head_outputs(params, e))
        .collect::<Result<Vec<_>>>()?;
    let cfg = &params.config;
    Ok((0..cfg.n_layers)
        .map(|l| {
            (0..cfg.n_heads)
                .map(|h| {
                    let rows: Vec<Vec<T>> = outs.iter().map(|o| o[l][h].clone()).collect();
                    mean_rows(&rows)
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    /// Dev accuracy with the head's mean added at its layer minus zero-shot
    /// dev accuracy.
    pub score: f64,
}

/// Causal score of every head on a dev query list.
pub fn score_heads<T: Scalar>(
    params: &Parameters<T>,
    means: &[Vec<Vec<T>>],
    dev: &[Pair],
) -> Result<Vec<HeadScore>> {
    if dev.is_empty() {
        return Err(Error::Invalid("head scoring needs a nonempty dev set".into()));
    }
    let base = evaluate_queries(params, dev, &InterventionSpec::None)?.accuracy;
    let mut scores = Vec::new();
    for (layer, heads) in means.iter().enumerate() {
        for (head, v) in heads.iter().enumerate() {
            let spec = InterventionSpec::AddLastToken {
                layer,
                vector: v.clone(),
            };
            let acc = evaluate_queries(params, dev, &spec)?.accuracy;
            scores.push(HeadScore {
                layer,
                head,
                score: acc - base,
            });
        }
    }
    Ok(scores)
}

/// `max(1, floor(L * H / 10))`.
pub fn default_top_n(config: &ModelConfig) -> usize {
    (config.n_layers * config.n_heads / 10).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionVectorReport<T> {
    pub vector: ExtractedVector<T>,
    pub scores: Vec<HeadScore>,
    /// Selected `(layer, head)` pairs, best first.
    pub selected: Vec<(usize, usize)>,
}

/// Sum of the `top_n` best-scoring heads' mean outputs, injected at `layer`
/// or, by default, at the layer of the best single head.
pub fn function_vector_from_scores<T: Scalar>(
    means: &[Vec<Vec<T>>],
    scores: &[HeadScore],
    top_n: usize,
    layer: Option<usize>,
    episodes: usize,
    seed: u64,
) -> Result<FunctionVectorReport<T>> {
    let total: usize = means.iter().map(Vec::len).sum();
    if top_n > total {
        return Err(Error::OutOfRange {
            what: "function vector top_n",
            index: top_n,
            limit: total,
        });
    }
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then((a.layer, a.head).cmp(&(b.layer, b.head)))
    });
    let selected: Vec<(usize, usize)> = ranked.iter().take(top_n).map(|s| (s.layer, s.head)).collect();
    let d = means.first().and_then(|l| l.first()).map_or(0, Vec::len);
    let mut v = vec![T::zero(); d];
    for &(l, h) in &selected {
        for (o, &x) in v.iter_mut().zip(&means[l][h]) {
            *o += x;
        }
    }
    let layer = layer.or(ranked.first().map(|s| s.layer)).unwrap_or(0);
    Ok(FunctionVectorReport {
        vector: ExtractedVector {
            method: VectorMethod::FunctionVector,
            layer: Some(layer),
            vectors: vec![v],
            strength: None,
            episodes,
            seed,
        },
        scores: scores.to_vec(),
        selected,
    })
}

pub fn extract_function_vector<T: Scalar>(
    params: &Parameters<T>,
    episodes: &[Episode],
    dev: &[Pair],
    top_n: usize,
    layer: Option<usize>,
    seed: u64,
) -> Result<FunctionVectorReport<T>> {
    let means = head_means(params, episodes)?;
    let scores = score_heads(params, &means, dev)?;
    function_vector_from_scores(&means, &scores, top_n, layer, episodes.len(), seed)
}

/// Leading eigenvector of `sum_i x_i x_i^T` (uncentered, so identical rows
/// give their own direction), sign-aligned with the mean row. All-zero input
/// gives the zero vector.
pub fn principal_direction(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut m = DMatrix::<f64>::zeros(d, d);
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += r[i] * r[j];
            }
        }
    }
    if m.iter().all(|&x| x == 0.0) {
        return vec![0.0; d];
    }
    let eig = SymmetricEigen::new(m);
    let top = eig.eigenvalues.imax();
    let mut v: Vec<f64> = eig.eigenvectors.column(top).iter().copied().collect();
    let mean: Vec<f64> = (0..d).map(|i| rows.iter().map(|r| r[i]).sum::<f64>()).collect();
    if dot(&v, &mean) < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// PCA-ICV: per layer, the principal direction of `state(question + answer)
/// - state(question)` at the last token over the demonstrations.
pub fn extract_pca_icv<T: Scalar>(
    params: &Parameters<T>,
    demos: &[Pair],
    strength: f64,
    seed: u64,
) -> Result<ExtractedVector<T>> {
    if demos.len() < 2 {
        return Err(Error::Invalid(format!(
            "PCA-ICV needs at least 2 demonstrations, got {}",
            demos.len()
        )));
    }
    let deltas = demos
        .par_iter()
        .map(|p| {
            let ep = Episode {
                demos: Vec::new(),
                query: p.clone(),
                task: String::new(),
                seed,
            };
            let r = render(&ep, true, params.config.max_seq_len)?;
            let none = InterventionSpec::None;
            let (_, q) = residual_streams(params, r.prompt(), &none, None)?;
            let (_, qa) = residual_streams(params, &r.tokens, &none, None)?;
            let (lq, lqa) = (r.prompt_len - 1, r.tokens.len() - 1);
            Ok(q.iter()
                .zip(&qa)
                .map(|(a, b)| {
                    b.row(lqa)
                        .iter()
                        .zip(a.row(lq))
                        .map(|(&x, &y)| (x - y).to_f64_lossy())
                        .collect::<Vec<f64>>()
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let vectors = (0..params.config.n_layers)
        .map(|l| {
            let rows: Vec<Vec<f64>> = deltas.iter().map(|d| d[l].clone()).collect();
            principal_direction(&rows).into_iter().map(T::lit).collect()
        })
        .collect();
    Ok(ExtractedVector {
        method: VectorMethod::PcaIcv,
        layer: None,
        vectors,
        strength: Some(strength),
        episodes: demos.len(),
        seed,
    })
}

/// Strengths tried for PCA-ICV.
pub const PCA_STRENGTHS: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoraHyper {
    pub rank: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for LoraHyper {
    fn default() -> Self {
        Self {
            rank: 8,
            lr: 1e-3,
            weight_decay: 0.0,
            warmup_fraction: 0.1,
            batch_size: 16,
            epochs: 3,
            dropout: 0.05,
            seed: 0,
        }
    }
}

/// `Delta E = A B` with `A: d x r` and `B: r x N`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// `rank * (d + N)`.
    pub fn n_trainable(&self) -> usize {
        self.a.len() + self.b.len()
    }

    pub fn to_container(&self) -> Container<T> {
        let mut c = Container::new(LORA_TAG, serde_json::json!({ "rank": self.rank() }));
        c.push("a", self.a.clone());
        c.push("b", self.b.clone());
        c
    }

    pub fn from_container(c: &Container<T>) -> Result<Self> {
        if c.tag != LORA_TAG {
            return Err(Error::Checkpoint(format!("expected a head adapter, found {:?}", c.tag)));
        }
        let (a, b) = (c.get("a")?.clone(), c.get("b")?.clone());
        if a.cols() != b.rows() {
            return Err(Error::Checkpoint(format!(
                "adapter factors {:?} and {:?} do not chain",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }

    /// Rank zero applies nothing.
    pub fn intervention(&self) -> InterventionSpec<T> {
        if self.rank() == 0 {
            InterventionSpec::None
        } else {
            InterventionSpec::LowRankHead {
                a: self.a.clone(),
                b: self.b.clone(),
            }
        }
    }
}

/// Trainable count of a rank-`rank` head adapter.
pub fn lora_param_count(config: &ModelConfig, rank: usize) -> usize {
    rank * (config.d_model + config.vocab_size)
}

#[derive(Debug, Clone)]
pub struct LoraOutcome<T> {
    pub adapter: LoraAdapter<T>,
    pub losses: Vec<f64>,
}

fn lora_gradients<T: Scalar>(
    params: &Parameters<T>,
    query: &Pair,
    adapter: &LoraAdapter<T>,
    dropout: f64,
    rng_seed: u64,
    index: u64,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let cfg = &params.config;
    let ep = Episode {
        demos: Vec::new(),
        query: query.clone(),
        task: String::new(),
        seed: 0,
    };
    let r = render(&ep, true, cfg.max_seq_len)?;
    let tape = Tape::new();
    let vars = params.on_tape(&tape, false);
    let a = tape.leaf(adapter.a.clone(), true);
    let b = tape.leaf(adapter.b.clone(), true);
    let dropout_mask = (dropout > 0.0).then(|| {
        let mut rng = indexed_rng(rng_seed, "lora-dropout", index);
        let keep = T::lit(1.0 / (1.0 - dropout));
        let data = (0..r.tokens.len() * cfg.d_model)
            .map(|_| if rng.random_bool(dropout) { T::zero() } else { keep })
            .collect();
        tape.constant(Tensor::from_vec(r.tokens.len(), cfg.d_model, data).expect("mask shape"))
    });
    let head = HeadAdapter { a, b, dropout_mask };
    let out = run_graph(
        &vars,
        params,
        &r.tokens,
        r.prompt_len,
        &TapeShift::None,
        Some(&head),
        false,
    )?;
    let loss = out.logits.cross_entropy(&r.answer_positions, &r.answer_targets)?;
    let grads = tape.backward(loss)?;
    Ok((
        loss.value().item().to_f64_lossy(),
        grads.get_or_zeros(a),
        grads.get_or_zeros(b),
    ))
}

/// Trains only the adapter with cross-entropy on zero-shot query answers.
/// `A` starts Gaussian with standard deviation `1 / sqrt(d)` and `B` at zero,
/// so training starts from the unmodified model.
pub fn train_lora_head<T: Scalar>(
    params: &Parameters<T>,
    dataset: &Dataset,
    hyper: &LoraHyper,
    mut on_step: impl FnMut(usize, f64),
) -> Result<LoraOutcome<T>> {
    let cfg = &params.config;
    if hyper.rank > cfg.d_model.min(cfg.vocab_size) {
        return Err(Error::Config(format!(
            "lora.rank {} exceeds min(d, N) = {}",
            hyper.rank,
            cfg.d_model.min(cfg.vocab_size)
        )));
    }
    if hyper.batch_size == 0 || !(0.0..1.0).contains(&hyper.dropout) {
        return Err(Error::Config("lora.batch_size must be positive and dropout in [0, 1)".into()));
    }
    let normal = Normal::new(0.0, 1.0 / (cfg.d_model as f64).sqrt()).expect("valid normal");
    let mut rng = rng_for(hyper.seed, "lora-init");
    let a_data = (0..cfg.d_model * hyper.rank)
        .map(|_| T::lit(normal.sample(&mut rng)))
        .collect();
    let mut adapter = LoraAdapter {
        a: Tensor::from_vec(cfg.d_model, hyper.rank, a_data)?,
        b: Tensor::zeros(hyper.rank, cfg.vocab_size),
    };
    let mut losses = Vec::new();
    if hyper.rank == 0 {
        return Ok(LoraOutcome { adapter, losses });
    }
    let n = dataset.train.len();
    let steps_per_epoch = n.div_ceil(hyper.batch_size);
    let total = steps_per_epoch * hyper.epochs;
    let mut opt = AdamW::<T>::new(&[adapter.a.shape(), adapter.b.shape()]);
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let epoch_seed = derive_seed(hyper.seed, &format!("lora-epoch-{epoch}"));
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng_for(epoch_seed, "order"));
        for chunk in order.chunks(hyper.batch_size) {
            let results = chunk
                .par_iter()
                .map(|&i| {
                    lora_gradients(params, &dataset.train[i], &adapter, hyper.dropout, epoch_seed, i as u64)
                })
                .collect::<Result<Vec<_>>>()?;
            let w = T::lit(1.0 / results.len() as f64);
            let mut ga = Tensor::zeros(cfg.d_model, hyper.rank);
            let mut gb = Tensor::zeros(hyper.rank, cfg.vocab_size);
            let mut loss = 0.0;
            for (l, a, b) in &results {
                loss += l / results.len() as f64;
                ga.add_assign(&a.scale(w))?;
                gb.add_assign(&b.scale(w))?;
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            let lr = hyper.lr * lr_multiplier(step, total, hyper.warmup_fraction);
            opt.step(
                &mut [&mut adapter.a, &mut adapter.b],
                &[ga, gb],
                &[lr, lr],
                &[hyper.weight_decay, hyper.weight_decay],
            );
            on_step(step, loss);
            losses.push(loss);
            step += 1;
        }
    }
    Ok(LoraOutcome { adapter, losses })
}

/// Unit-normalizes `v`; zero stays zero.
pub fn unit<T: Scalar>(v: &[T]) -> Vec<T> {
    let n = norm(v);
    if n > T::zero() {
        v.iter().map(|&x| x / n).collect()
    } else {
        v.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_rows_give_their_direction() {
        let r = vec![3.0, -4.0, 0.0];
        let v = principal_direction(&[r.clone(), r.clone(), r]);
        assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] + 0.8).abs() < 1e-12);
    }

    #[test]
    fn sweep_ties_go_to_lowest() {
        let s = Sweep::from_rows(vec![(0.0, 0.5), (1.0, 0.7), (2.0, 0.7)]).unwrap();
        assert_eq!(s.best, 1);
    }
}
