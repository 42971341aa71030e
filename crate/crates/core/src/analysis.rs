//! Diagnostics over trained vectors and evaluation runs: shift-direction
//! similarity, logit-lens decoding, answer-category bias, FLOPs and latency,
//! and 2-D projections. The CSV writers at the bottom define the files the
//! plotting scripts read.
//!
//! FLOPs are counted as 2 per multiply-add. Only matrix-type work is counted
//! (embedding gathers, projections, attention scores and mixing, MLP,
//! unembedding, intervention adds); normalisation, activations and softmax
//! are left out, identically in the closed form and in the instrumented
//! forward pass.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Prediction;
use crate::flops::{self, Component, MacCounts};
use crate::intervention::{InterventionKind, InterventionSpec};
use crate::model::{forward, ForwardOptions, ModelConfig, Parameters};
use crate::scalar::Scalar;
use crate::tasks::{render, sample_episode, AnswerCategory, Dataset, Episode, Split, Vocab};
use crate::tensor::{dot, norm, softmax};

/// Norm below which a shift counts as degenerate.
pub const DEGENERATE_NORM: f64 = 1e-9;

/// Queries used for shift similarity unless told otherwise.
pub const DEFAULT_SIMILARITY_QUERIES: usize = 200;

/// Representations of one query's first answer token under zero-shot, k-shot
/// ICL and the method under test, all taken at the same capture point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftRecord {
    pub query_index: usize,
    pub r_zs: Vec<f64>,
    pub r_icl: Vec<f64>,
    pub r_method: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Cosine of `s* = r_method - r_zs` with `s_gt = r_icl - r_zs`; `None`
    /// where either shift is degenerate.
    pub cosines: Vec<Option<f64>>,
    pub query_indices: Vec<usize>,
    pub mean: f64,
    pub degenerate: usize,
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na <= DEGENERATE_NORM || nb <= DEGENERATE_NORM {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn shift_similarity(records: &[ShiftRecord]) -> Result<SimilarityReport> {
    let cosines: Vec<Option<f64>> = records
        .iter()
        .map(|r| {
            let diff = |x: &[f64]| -> Vec<f64> { x.iter().zip(&r.r_zs).map(|(a, b)| a - b).collect() };
            cosine(&diff(&r.r_method), &diff(&r.r_icl))
        })
        .collect();
    let valid: Vec<f64> = cosines.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Invalid(format!(
            "all {} shift records are degenerate",
            records.len()
        )));
    }
    Ok(SimilarityReport {
        mean: valid.iter().sum::<f64>() / valid.len() as f64,
        degenerate: cosines.len() - valid.len(),
        query_indices: records.iter().map(|r| r.query_index).collect(),
        cosines,
    })
}

/// Where representations are read: post-block residual of `layer` at the last
/// prompt position, whose output is the first answer token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturePoint {
    pub layer: usize,
}

impl CapturePoint {
    pub fn final_layer(config: &ModelConfig) -> Self {
        Self {
            layer: config.n_layers - 1,
        }
    }
}

fn capture_prompt_state<T: Scalar>(
    params: &Parameters<T>,
    episode: &Episode,
    intervention: &InterventionSpec<T>,
    at: CapturePoint,
) -> Result<Vec<f64>> {
    let r = render(episode, false, params.config.max_seq_len)?;
    let pos = r.prompt_len - 1;
    let out = forward(
        params,
        r.prompt(),
        intervention,
        &ForwardOptions::capture(vec![(at.layer, pos)]),
    )?;
    Ok(out.captured[&(at.layer, pos)].iter().map(|x| x.to_f64_lossy()).collect())
}

/// Shift records for the first `n` evaluation queries. ICL demonstrations are
/// drawn with `seed`, exactly as [`crate::eval::evaluate`] draws them.
pub fn collect_shift_records<T: Scalar>(
    params: &Parameters<T>,
    dataset: &Dataset,
    k: usize,
    seed: u64,
    method: &InterventionSpec<T>,
    n: usize,
    at: CapturePoint,
) -> Result<Vec<ShiftRecord>> {
    use rayon::prelude::*;
    let n = n.min(dataset.eval.len());
    (0..n)
        .into_par_iter()
        .map(|i| {
            let zs = sample_episode(dataset, Split::Eval, 0, seed, i)?;
            let icl = sample_episode(dataset, Split::Eval, k, seed, i)?;
            Ok(ShiftRecord {
                query_index: i,
                r_zs: capture_prompt_state(params, &zs, &InterventionSpec::None, at)?,
                r_icl: capture_prompt_state(params, &icl, &InterventionSpec::None, at)?,
                r_method: capture_prompt_state(params, &zs, method, at)?,
            })
        })
        .collect()
}

/// Logit-lens reading of a residual-space vector: `softmax(v E)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodedVector {
    /// `(token, probability)`, most probable first, ties by lower id.
    pub top: Vec<(usize, f64)>,
    pub probabilities: Vec<f64>,
}

pub fn decode_vector<T: Scalar>(v: &[T], params: &Parameters<T>, top_k: usize) -> Result<DecodedVector> {
    let e = &params.unembed;
    if v.len() != e.rows() {
        return Err(Error::Shape {
            op: "decode_vector",
            detail: format!("vector of length {} for d = {}", v.len(), e.rows()),
        });
    }
    let logits: Vec<T> = (0..e.cols())
        .map(|j| v.iter().enumerate().map(|(i, &x)| x * e.get(i, j)).sum())
        .collect();
    let probabilities: Vec<f64> = softmax(&logits).into_iter().map(|p| p.to_f64_lossy()).collect();
    let mut order: Vec<usize> = (0..probabilities.len()).collect();
    order.sort_by(|&a, &b| probabilities[b].total_cmp(&probabilities[a]).then(a.cmp(&b)));
    Ok(DecodedVector {
        top: order
            .into_iter()
            .take(top_k)
            .map(|t| (t, probabilities[t]))
            .collect(),
        probabilities,
    })
}

/// Column of the bias matrix: an answer category or "outside every answer
/// space".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emitted {
    Category(AnswerCategory),
    Meaningless,
}

impl Emitted {
    pub fn label(self) -> &'static str {
        match self {
            Emitted::Category(c) => c.as_str(),
            Emitted::Meaningless => "meaningless",
        }
    }
}

const CATEGORIES: [AnswerCategory; 4] = [
    AnswerCategory::Mapped,
    AnswerCategory::Symbol,
    AnswerCategory::Number,
    AnswerCategory::YesNo,
];

fn category_index(c: AnswerCategory) -> usize {
    CATEGORIES.iter().position(|&x| x == c).expect("listed")
}

/// Expected-by-emitted category counts of first answer tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasReport {
    /// `counts[expected][emitted]`, rows in `CATEGORIES` order, columns the
    /// same plus a final "meaningless" column.
    pub counts: Vec<Vec<usize>>,
    /// `yes/no` emitted for a question that does not expect it.
    pub hallucinations: usize,
    pub meaningless: usize,
    pub total: usize,
}

impl BiasReport {
    pub fn expected_labels() -> Vec<&'static str> {
        CATEGORIES.iter().map(|c| c.as_str()).collect()
    }

    pub fn emitted_labels() -> Vec<&'static str> {
        let mut v = Self::expected_labels();
        v.push(Emitted::Meaningless.label());
        v
    }

    pub fn count(&self, expected: AnswerCategory, emitted: Emitted) -> usize {
        let col = match emitted {
            Emitted::Category(c) => category_index(c),
            Emitted::Meaningless => CATEGORIES.len(),
        };
        self.counts[category_index(expected)][col]
    }

    /// Hallucinations plus meaningless answers.
    pub fn bias_total(&self) -> usize {
        self.hallucinations + self.meaningless
    }
}

/// Tallies first answer tokens against the expected category of each query.
/// `expected[i]` labels `predictions[i]`; a missing label is an error.
pub fn bias_report(
    predictions: &[Prediction],
    expected: &[Option<AnswerCategory>],
    vocab: &Vocab,
) -> Result<BiasReport> {
    if predictions.len() != expected.len() {
        return Err(Error::Invalid(format!(
            "{} predictions but {} category labels",
            predictions.len(),
            expected.len()
        )));
    }
    let mut counts = vec![vec![0usize; CATEGORIES.len() + 1]; CATEGORIES.len()];
    let (mut hallucinations, mut meaningless) = (0, 0);
    for (p, e) in predictions.iter().zip(expected) {
        let e = e.ok_or_else(|| {
            Error::Invalid(format!("query {} has no expected category", p.query_index))
        })?;
        let col = match vocab.category_of(p.first_token) {
            Some(c) => {
                if c == AnswerCategory::YesNo && e != AnswerCategory::YesNo {
                    hallucinations += 1;
                }
                category_index(c)
            }
            None => {
                meaningless += 1;
                CATEGORIES.len()
            }
        };
        counts[category_index(e)][col] += 1;
    }
    Ok(BiasReport {
        counts,
        hallucinations,
        meaningless,
        total: predictions.len(),
    })
}

/// FLOPs per component for one forward pass (2 per multiply-add).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub seq_len: usize,
    pub embeddings: u64,
    pub attention_scores: u64,
    pub attention_mix: u64,
    pub projections: u64,
    pub mlp: u64,
    pub unembedding: u64,
    pub intervention_adds: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.components().iter().map(|(_, f)| f).sum()
    }

    pub fn components(&self) -> [(Component, u64); 7] {
        [
            (Component::Embeddings, self.embeddings),
            (Component::AttentionScores, self.attention_scores),
            (Component::AttentionMix, self.attention_mix),
            (Component::Projections, self.projections),
            (Component::Mlp, self.mlp),
            (Component::Unembedding, self.unembedding),
            (Component::InterventionAdds, self.intervention_adds),
        ]
    }

    pub fn from_macs(seq_len: usize, macs: &MacCounts) -> Self {
        let f = |c| 2 * macs.get(c);
        Self {
            seq_len,
            embeddings: f(Component::Embeddings),
            attention_scores: f(Component::AttentionScores),
            attention_mix: f(Component::AttentionMix),
            projections: f(Component::Projections),
            mlp: f(Component::Mlp),
            unembedding: f(Component::Unembedding),
            intervention_adds: f(Component::InterventionAdds),
        }
    }
}

/// Closed-form FLOPs of one forward pass over `seq_len` tokens.
pub fn flops_estimate(config: &ModelConfig, seq_len: usize, kind: InterventionKind) -> Result<FlopsBreakdown> {
    config.validate()?;
    if seq_len > config.max_seq_len {
        return Err(Error::OutOfRange {
            what: "sequence length",
            index: seq_len,
            limit: config.max_seq_len,
        });
    }
    let (t, d, m, n, l) = (
        seq_len as u64,
        config.d_model as u64,
        config.d_mlp as u64,
        config.vocab_size as u64,
        config.n_layers as u64,
    );
    let visible = t * (t + 1) / 2;
    let head = match kind {
        InterventionKind::LowRankHead { rank } if t > 0 => {
            let r = rank as u64;
            t * d * r + t * r * n
        }
        _ => 0,
    };
    let adds = match kind {
        InterventionKind::None | InterventionKind::ReplaceLastToken | InterventionKind::LowRankHead { .. } => 0,
        InterventionKind::AddPerLayer => l * t * d,
        InterventionKind::AddLastToken if t > 0 => d,
        InterventionKind::AddLastToken => 0,
        InterventionKind::AddAllTokens { renormalize } => l * t * d * if renormalize { 4 } else { 1 },
    };
    Ok(FlopsBreakdown {
        seq_len,
        embeddings: 2 * t * d,
        attention_scores: 2 * l * visible * d,
        attention_mix: 2 * l * visible * d,
        projections: 2 * l * 4 * t * d * d,
        mlp: 2 * l * 2 * t * d * m,
        unembedding: 2 * (t * d * n + head),
        intervention_adds: 2 * adds,
    })
}

/// FLOPs actually executed by one instrumented forward pass.
pub fn instrumented_flops<T: Scalar>(
    params: &Parameters<T>,
    tokens: &[usize],
    intervention: &InterventionSpec<T>,
) -> Result<FlopsBreakdown> {
    let (out, macs) = flops::measure(|| forward(params, tokens, intervention, &ForwardOptions::default()));
    out?;
    Ok(FlopsBreakdown::from_macs(tokens.len(), &macs))
}

/// One timed method: its intervention and the prompts it runs on.
#[derive(Debug, Clone)]
pub struct TimingMethod<T> {
    pub name: String,
    pub intervention: InterventionSpec<T>,
    pub prompts: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    /// Median over repeats of the mean seconds per forward pass.
    pub median_seconds: f64,
    pub repeats: usize,
    pub mean_prompt_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn median(&self, method: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.method == method)
            .map(|r| r.median_seconds)
    }

    pub fn ratio(&self, method: &str, baseline: &str) -> Option<f64> {
        Some(self.median(method)? / self.median(baseline)?)
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Wall-clock timing on the calling thread. One untimed warmup pass per
/// method, then `repeats` rounds; each round times every method once, in
/// turn, so drift affects all methods alike.
pub fn timing_benchmark<T: Scalar>(
    params: &Parameters<T>,
    methods: &[TimingMethod<T>],
    repeats: usize,
) -> Result<TimingTable> {
    if repeats < 3 {
        return Err(Error::Invalid(format!("timing needs at least 3 repeats, got {repeats}")));
    }
    let run = |m: &TimingMethod<T>| -> Result<f64> {
        let start = Instant::now();
        for p in &m.prompts {
            std::hint::black_box(forward(params, p, &m.intervention, &ForwardOptions::default())?);
        }
        Ok(start.elapsed().as_secs_f64() / m.prompts.len().max(1) as f64)
    };
    for m in methods {
        run(m)?;
    }
    let mut samples = vec![Vec::with_capacity(repeats); methods.len()];
    for _ in 0..repeats {
        for (m, s) in methods.iter().zip(samples.iter_mut()) {
            s.push(run(m)?);
        }
    }
    Ok(TimingTable {
        rows: methods
            .iter()
            .zip(samples.iter_mut())
            .map(|(m, s)| TimingRow {
                method: m.name.clone(),
                median_seconds: median(s),
                repeats,
                mean_prompt_len: m.prompts.iter().map(Vec::len).sum::<usize>() as f64
                    / m.prompts.len().max(1) as f64,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    /// Unit principal directions (the second is zero when rank-deficient).
    pub axes: [Vec<f64>; 2],
    pub variances: [f64; 2],
    /// The centered data has rank below 2; the second axis is zeroed.
    pub rank_deficient: bool,
}

/// Flips `v` so that its first entry above `tol` in magnitude is positive.
fn fix_sign(v: &mut [f64], tol: f64) {
    if let Some(&first) = v.iter().find(|x| x.abs() > tol) {
        if first < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Centered projection onto the top two principal directions.
pub fn project_2d(states: &[Vec<f64>], labels: &[String]) -> Result<Projection> {
    if states.len() < 3 {
        return Err(Error::Invalid(format!("project_2d needs at least 3 states, got {}", states.len())));
    }
    if labels.len() != states.len() {
        return Err(Error::Invalid("one label per state".into()));
    }
    let d = states[0].len();
    if d == 0 || states.iter().any(|s| s.len() != d) {
        return Err(Error::Shape {
            op: "project_2d",
            detail: "states must share a positive dimension".into(),
        });
    }
    let n = states.len();
    let mut mean = vec![0.0; d];
    for s in states {
        mean.iter_mut().zip(s).for_each(|(m, x)| *m += x / n as f64);
    }
    let centered: Vec<Vec<f64>> = states
        .iter()
        .map(|s| s.iter().zip(&mean).map(|(x, m)| x - m).collect())
        .collect();
    let x = DMatrix::from_fn(n, d, |i, j| centered[i][j]);
    let eig = SymmetricEigen::new(x.transpose() * &x);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let tol = 1e-12 * top.max(f64::MIN_POSITIVE);
    let mut axes: [Vec<f64>; 2] = [vec![0.0; d], vec![0.0; d]];
    let mut variances = [0.0; 2];
    let mut rank_deficient = false;
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= tol {
            rank_deficient = true;
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        fix_sign(&mut v, 1e-12);
        axes[slot] = v;
        variances[slot] = lambda / n as f64;
    }
    if d < 2 {
        rank_deficient = true;
    }
    let coords = centered
        .iter()
        .map(|c| [dot(c, &axes[0]), dot(c, &axes[1])])
        .collect();
    Ok(Projection {
        coords,
        labels: labels.to_vec(),
        axes,
        variances,
        rank_deficient,
    })
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

/// `method,query_index,cosine,degenerate` (empty cosine when degenerate).
pub fn write_similarity_csv(path: &Path, reports: &[(String, SimilarityReport)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["method", "query_index", "cosine", "degenerate"]).map_err(csv_err)?;
    for (method, r) in reports {
        for (q, c) in r.query_indices.iter().zip(&r.cosines) {
            let cos = c.map_or(String::new(), |c| format!("{c:.17e}"));
            w.write_record([method.as_str(), &q.to_string(), &cos, &c.is_none().to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `method,expected,emitted,count`, one row per matrix cell.
pub fn write_bias_csv(path: &Path, reports: &[(String, BiasReport)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["method", "expected", "emitted", "count"]).map_err(csv_err)?;
    let (rows, cols) = (BiasReport::expected_labels(), BiasReport::emitted_labels());
    for (method, r) in reports {
        for (i, e) in rows.iter().enumerate() {
            for (j, o) in cols.iter().enumerate() {
                w.write_record([method.as_str(), e, o, &r.counts[i][j].to_string()])
                    .map_err(csv_err)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `label,seq_len,component,flops` with 2 FLOPs per multiply-add, plus one
/// `total` row per breakdown.
pub fn write_flops_csv(path: &Path, rows: &[(String, FlopsBreakdown)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["label", "seq_len", "component", "flops"]).map_err(csv_err)?;
    for (label, b) in rows {
        let seq = b.seq_len.to_string();
        for (c, f) in b.components() {
            w.write_record([label.as_str(), &seq, c.as_str(), &f.to_string()])
                .map_err(csv_err)?;
        }
        w.write_record([label.as_str(), &seq, "total", &b.total().to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `method,median_seconds,repeats,mean_prompt_len`.
pub fn write_timing_csv(path: &Path, table: &TimingTable) -> Result<()> {
    let mut w = csv_writer(path)?;
    for row in &table.rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `x,y,label,method`.
pub fn write_projection_csv(path: &Path, projections: &[(String, Projection)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["x", "y", "label", "method"]).map_err(csv_err)?;
    for (method, p) in projections {
        for (c, label) in p.coords.iter().zip(&p.labels) {
            w.write_record([&format!("{:.17e}", c[0]), &format!("{:.17e}", c[1]), label, method])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `rows` as a plain CSV with the given header; used for sweep tables.
pub fn write_table_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Appends one JSON object per line.
pub fn append_jsonl<S: Serialize>(path: &Path, items: &[S]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    for it in items {
        serde_json::to_writer(&mut f, it)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}
