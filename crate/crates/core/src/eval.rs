//! Exact-match evaluation.
//!
//! Greedy decoding stops at `SEP`, so a prediction is correct exactly when,
//! under teacher forcing, the argmax at every answer slot is the gold token and
//! the argmax after the last answer token is `SEP`. One forward pass over
//! `prompt + answer + SEP` therefore decides it.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::intervention::InterventionSpec;
use crate::model::{forward, generate, DecodeConfig, ForwardOptions, Parameters};
use crate::scalar::Scalar;
use crate::tasks::{render, sample_episode, AnswerCategory, Dataset, Episode, Pair, Split, SEP};
use crate::tensor::argmax;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub query_index: usize,
    /// Greedy first answer token.
    pub first_token: usize,
    pub expected: Vec<usize>,
    pub category: AnswerCategory,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<Prediction>,
}

impl EvalResult {
    fn from_predictions(predictions: Vec<Prediction>) -> Self {
        let correct = predictions.iter().filter(|p| p.correct).count();
        let total = predictions.len();
        Self {
            accuracy: if total == 0 {
                0.0
            } else {
                correct as f64 / total as f64
            },
            correct,
            total,
            predictions,
        }
    }
}

/// Evaluation protocol: `k` demonstrations per query (0 = zero-shot),
/// resampled per query from `seed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPlan {
    pub k: usize,
    pub seed: u64,
    /// Number of evaluation queries (capped at the split size).
    pub limit: Option<usize>,
}

pub fn eval_episode<T: Scalar>(
    params: &Parameters<T>,
    episode: &Episode,
    intervention: &InterventionSpec<T>,
) -> Result<(usize, bool)> {
    let r = render(episode, true, params.config.max_seq_len.saturating_sub(1))?;
    let mut tokens = r.tokens.clone();
    tokens.push(SEP);
    let opts = ForwardOptions {
        prompt_len: Some(r.prompt_len),
        ..ForwardOptions::default()
    };
    let out = forward(params, &tokens, intervention, &opts)?;
    let mut correct = true;
    let mut first = None;
    for (&pos, &target) in r.answer_positions.iter().zip(&r.answer_targets) {
        let pred = argmax(out.logits.row(pos));
        first.get_or_insert(pred);
        correct &= pred == target;
    }
    let last = r.prompt_len - 1 + r.answer_targets.len();
    correct &= argmax(out.logits.row(last)) == SEP;
    Ok((first.unwrap_or(SEP), correct))
}

pub fn evaluate<T: Scalar>(
    params: &Parameters<T>,
    dataset: &Dataset,
    split: Split,
    intervention: &InterventionSpec<T>,
    plan: &EvalPlan,
) -> Result<EvalResult> {
    let n = plan.limit.map_or(dataset.split(split).len(), |l| {
        l.min(dataset.split(split).len())
    });
    let predictions = (0..n)
        .into_par_iter()
        .map(|i| {
            let ep = sample_episode(dataset, split, plan.k, plan.seed, i)?;
            let (first_token, correct) = eval_episode(params, &ep, intervention)?;
            Ok(Prediction {
                query_index: i,
                first_token,
                expected: ep.query.answer.clone(),
                category: ep.query.category,
                correct,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_predictions(predictions))
}

/// Zero-shot evaluation of an explicit query list.
pub fn evaluate_queries<T: Scalar>(
    params: &Parameters<T>,
    queries: &[Pair],
    intervention: &InterventionSpec<T>,
) -> Result<EvalResult> {
    let predictions = queries
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let ep = Episode {
                demos: Vec::new(),
                query: q.clone(),
                task: String::new(),
                seed: 0,
            };
            let (first_token, correct) = eval_episode(params, &ep, intervention)?;
            Ok(Prediction {
                query_index: i,
                first_token,
                expected: q.answer.clone(),
                category: q.category,
                correct,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalResult::from_predictions(predictions))
}

/// Reference path: explicit decoding with `generate`. Slow; used to check
/// the single-pass evaluator.
pub fn evaluate_by_generation<T: Scalar>(
    params: &Parameters<T>,
    dataset: &Dataset,
    split: Split,
    intervention: &InterventionSpec<T>,
    plan: &EvalPlan,
    decode: &DecodeConfig,
) -> Result<EvalResult> {
    let n = plan.limit.map_or(dataset.split(split).len(), |l| {
        l.min(dataset.split(split).len())
    });
    let mut predictions = Vec::with_capacity(n);
    for i in 0..n {
        let ep = sample_episode(dataset, split, plan.k, plan.seed, i)?;
        let r = render(&ep, false, params.config.max_seq_len)?;
        let out = generate(params, r.prompt(), intervention, decode)?;
        predictions.push(Prediction {
            query_index: i,
            first_token: out.first().copied().unwrap_or(SEP),
            correct: out == ep.query.answer,
            expected: ep.query.answer,
            category: ep.query.category,
        });
    }
    Ok(EvalResult::from_predictions(predictions))
}
