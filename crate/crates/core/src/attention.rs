//! Exact split of one attention read over `[X_D, x̂]` into a demonstration
//! part and a query part:
//!
//! ```text
//! SA(x̂_i, X, X) = mu * h(X_D) + (1 - mu) * h(x̂),   mu = Z_1 / (Z_1 + Z_2)
//! ```
//!
//! where `Z_1` and `Z_2` are the softmax partition sums over the demonstration
//! and query keys. The identity only uses the score row, so it also holds per
//! head inside the model, with projections, scaling and the recency bias.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{forward, ForwardOptions, Parameters};
use crate::intervention::InterventionSpec;
use crate::scalar::Scalar;
use crate::tensor::{dot, softmax, Tensor};

/// Raw dot-product attention of one query token over a demonstration context
/// followed by a query context. Keys and values are the context rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInstance<T> {
    pub query_token: Vec<T>,
    /// `l_c x d`, possibly empty.
    pub demo_context: Tensor<T>,
    /// `l_q x d`, `l_q >= 1`.
    pub query_context: Tensor<T>,
    /// Score multiplier, typically 1 or `1/sqrt(d)`.
    pub scale: T,
}

impl<T: Scalar> AttentionInstance<T> {
    pub fn validate(&self) -> Result<()> {
        let d = self.query_token.len();
        if d == 0 {
            return Err(shape_err("attention_instance", "d must be positive"));
        }
        if self.query_context.rows() == 0 {
            return Err(shape_err("attention_instance", "query context needs a row"));
        }
        for (name, m) in [("demo", &self.demo_context), ("query", &self.query_context)] {
            if m.rows() > 0 && m.cols() != d {
                return Err(shape_err(
                    "attention_instance",
                    format!("{name} context has {} columns, query token has {d}", m.cols()),
                ));
            }
        }
        let finite = self.query_token.iter().all(|x| x.is_finite())
            && self.demo_context.is_finite()
            && self.query_context.is_finite()
            && self.scale.is_finite();
        if !finite {
            return Err(Error::NonFinite);
        }
        Ok(())
    }

    fn scores(&self, ctx: &Tensor<T>) -> Vec<T> {
        (0..ctx.rows())
            .map(|j| self.scale * dot(&self.query_token, ctx.row(j)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition<T> {
    pub mu: T,
    pub h_demo: Vec<T>,
    pub h_query: Vec<T>,
    pub full: Vec<T>,
}

impl<T: Scalar> Decomposition<T> {
    /// `max |full - mu * h_demo - (1 - mu) * h_query|`.
    pub fn residual(&self) -> T {
        let one = T::one();
        self.full
            .iter()
            .zip(&self.h_demo)
            .zip(&self.h_query)
            .map(|((&f, &a), &b)| (f - (self.mu * a + (one - self.mu) * b)).abs())
            .fold(T::zero(), T::max)
    }
}

/// `(Z_1, Z_2)` after subtracting the maximum of the concatenated row.
fn partition_sums<T: Scalar>(demo: &[T], query: &[T]) -> (T, T) {
    let m = demo
        .iter()
        .chain(query)
        .copied()
        .fold(T::neg_infinity(), T::max);
    let z = |s: &[T]| s.iter().map(|&x| (x - m).exp()).sum::<T>();
    (z(demo), z(query))
}

fn mu_from_scores<T: Scalar>(demo: &[T], query: &[T]) -> T {
    if demo.is_empty() {
        return T::zero();
    }
    let (z1, z2) = partition_sums(demo, query);
    z1 / (z1 + z2)
}

/// Softmax-weighted mix of `values` rows under `scores`; zero when empty.
fn mix<T: Scalar>(scores: &[T], values: &[&[T]], d: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d];
    if scores.is_empty() {
        return out;
    }
    for (p, v) in softmax(scores).into_iter().zip(values) {
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o += p * x;
        }
    }
    out
}

/// Decomposition of an arbitrary score row split into two key segments.
/// `full` is computed from the concatenated row directly, not from the parts.
fn decompose_row<T: Scalar>(
    demo_scores: &[T],
    query_scores: &[T],
    demo_values: &[&[T]],
    query_values: &[&[T]],
    d: usize,
) -> Decomposition<T> {
    let all_scores: Vec<T> = demo_scores.iter().chain(query_scores).copied().collect();
    let all_values: Vec<&[T]> = demo_values.iter().chain(query_values).copied().collect();
    Decomposition {
        mu: mu_from_scores(demo_scores, query_scores),
        h_demo: mix(demo_scores, demo_values, d),
        h_query: mix(query_scores, query_values, d),
        full: mix(&all_scores, &all_values, d),
    }
}

/// Share of attention mass on the demonstration context.
pub fn mu_coefficient<T: Scalar>(inst: &AttentionInstance<T>) -> Result<T> {
    inst.validate()?;
    Ok(mu_from_scores(
        &inst.scores(&inst.demo_context),
        &inst.scores(&inst.query_context),
    ))
}

pub fn decompose<T: Scalar>(inst: &AttentionInstance<T>) -> Result<Decomposition<T>> {
    inst.validate()?;
    let rows = |m: &Tensor<T>| -> Vec<Vec<T>> { (0..m.rows()).map(|j| m.row(j).to_vec()).collect() };
    let (demo_rows, query_rows) = (rows(&inst.demo_context), rows(&inst.query_context));
    let demo_values: Vec<&[T]> = demo_rows.iter().map(Vec::as_slice).collect();
    let query_values: Vec<&[T]> = query_rows.iter().map(Vec::as_slice).collect();
    Ok(decompose_row(
        &inst.scores(&inst.demo_context),
        &inst.scores(&inst.query_context),
        &demo_values,
        &query_values,
        inst.query_token.len(),
    ))
}

/// Result of checking the split on one model head at one query position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadCheck<T> {
    pub layer: usize,
    pub head: usize,
    pub position: usize,
    pub mu: T,
    /// Max deviation of `mu * h_demo + (1 - mu) * h_query` from the model's
    /// own head output (before the output projection).
    pub residual: T,
}

fn check_boundary(len: usize, boundary: usize, position: usize) -> Result<()> {
    if boundary >= len {
        return Err(Error::OutOfRange {
            what: "demonstration/query boundary",
            index: boundary,
            limit: len,
        });
    }
    if position < boundary || position >= len {
        return Err(Error::Invalid(format!(
            "position {position} is outside the query region {boundary}..{len}"
        )));
    }
    Ok(())
}

/// Recomputes head outputs from the model's projected keys and values, split
/// at `boundary` (the first query token), for every requested
/// `(layer, head, position)`. One forward pass serves all checks.
pub fn verify_heads<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    boundary: usize,
    sites: &[(usize, usize, usize)],
) -> Result<Vec<HeadCheck<T>>> {
    let cfg = &params.config;
    for &(layer, head, position) in sites {
        check_boundary(tokens.len(), boundary, position)?;
        if layer >= cfg.n_layers {
            return Err(Error::OutOfRange {
                what: "layer",
                index: layer,
                limit: cfg.n_layers,
            });
        }
        if head >= cfg.n_heads {
            return Err(Error::OutOfRange {
                what: "head",
                index: head,
                limit: cfg.n_heads,
            });
        }
    }
    let out = forward(
        params,
        tokens,
        &InterventionSpec::None,
        &ForwardOptions {
            attention: true,
            ..ForwardOptions::default()
        },
    )?;
    let traces = out.attention.expect("attention was requested");
    let dh = cfg.head_dim();
    let scale = T::one() / T::lit(dh as f64).sqrt();
    let slopes = cfg.head_slopes();
    Ok(sites
        .iter()
        .map(|&(layer, head, i)| {
            let tr = &traces[layer];
            let cols = head * dh..(head + 1) * dh;
            let slope = T::lit(slopes.get(head).copied().unwrap_or(0.0));
            let qi = &tr.q.row(i)[cols.clone()];
            let score = |j: usize| {
                scale * dot(qi, &tr.k.row(j)[cols.clone()]) - slope * T::lit((i - j) as f64)
            };
            let value = |j: usize| &tr.v.row(j)[cols.clone()];
            let demo_scores: Vec<T> = (0..boundary).map(score).collect();
            let query_scores: Vec<T> = (boundary..=i).map(score).collect();
            let demo_values: Vec<&[T]> = (0..boundary).map(value).collect();
            let query_values: Vec<&[T]> = (boundary..=i).map(value).collect();
            let dec = decompose_row(&demo_scores, &query_scores, &demo_values, &query_values, dh);
            let one = T::one();
            let model_out = &tr.mix.row(i)[cols];
            let residual = model_out
                .iter()
                .zip(&dec.h_demo)
                .zip(&dec.h_query)
                .map(|((&m, &a), &b)| (m - (dec.mu * a + (one - dec.mu) * b)).abs())
                .fold(T::zero(), T::max);
            HeadCheck {
                layer,
                head,
                position: i,
                mu: dec.mu,
                residual,
            }
        })
        .collect())
}

/// Residual of the split for one head at one query position.
pub fn verify_on_model_head<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    boundary: usize,
    layer: usize,
    head: usize,
    position: usize,
) -> Result<T> {
    Ok(verify_heads(params, tokens, boundary, &[(layer, head, position)])?[0].residual)
}

/// Checks every layer, head and query position; returns all checks.
pub fn verify_all_heads<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    boundary: usize,
) -> Result<Vec<HeadCheck<T>>> {
    check_boundary(tokens.len(), boundary, boundary)?;
    let cfg = &params.config;
    let sites: Vec<(usize, usize, usize)> = (0..cfg.n_layers)
        .flat_map(|l| {
            (0..cfg.n_heads).flat_map(move |h| (boundary..tokens.len()).map(move |p| (l, h, p)))
        })
        .collect();
    verify_heads(params, tokens, boundary, &sites)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(demo: Vec<Vec<f64>>, query: Vec<Vec<f64>>, q: Vec<f64>) -> AttentionInstance<f64> {
        let d = q.len();
        AttentionInstance {
            query_token: q,
            demo_context: if demo.is_empty() {
                Tensor::zeros(0, d)
            } else {
                Tensor::from_rows(&demo).unwrap()
            },
            query_context: Tensor::from_rows(&query).unwrap(),
            scale: 1.0,
        }
    }

    #[test]
    fn uniform_scores_give_context_share() {
        let i = inst(vec![vec![0.0, 1.0], vec![0.0, 2.0]], vec![vec![0.0, 3.0]], vec![1.0, 0.0]);
        assert!((mu_coefficient(&i).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_context_is_query_only() {
        let i = inst(vec![], vec![vec![0.5, 1.0], vec![2.0, -1.0]], vec![1.0, 0.3]);
        let dec = decompose(&i).unwrap();
        assert_eq!(dec.mu, 0.0);
        assert_eq!(dec.h_demo, vec![0.0, 0.0]);
        assert_eq!(dec.full, dec.h_query);
    }

    #[test]
    fn mirrored_context_halves_mu() {
        let rows = vec![vec![0.2, -1.0, 0.5], vec![1.5, 0.3, -0.7]];
        let i = inst(rows.clone(), rows, vec![0.4, 0.9, -0.2]);
        let dec = decompose(&i).unwrap();
        assert!((dec.mu - 0.5).abs() < 1e-15);
        for ((a, b), f) in dec.h_demo.iter().zip(&dec.h_query).zip(&dec.full) {
            assert!((a - b).abs() < 1e-15 && (a - f).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_ragged_context() {
        let mut i = inst(vec![vec![1.0, 2.0]], vec![vec![1.0, 2.0]], vec![1.0, 0.0]);
        i.demo_context = Tensor::zeros(1, 3);
        assert!(decompose(&i).is_err());
    }
}
