//! Experiment stages on in-memory artifacts. The command line wraps these
//! with persistence; the acceptance suite calls them directly.

use icvlab_core::baselines::{
    default_top_n, extract_function_vector, extract_pca_icv, function_vector_from_scores,
    head_means, score_heads, sweep, sweep_layers, task_vectors, train_lora_head, LoraOutcome,
    Sweep,
};
use icvlab_core::eval::{evaluate, EvalPlan, EvalResult};
use icvlab_core::live::{train_live, StepMetric};
use icvlab_core::model::{init_model, pretrain, PretrainOutcome};
use icvlab_core::seed::derive_seed;
use icvlab_core::tasks::{
    generate_dataset, pretraining_sequence, sample_episode, Dataset, Episode, SimpleFamily, Split,
    TaskSpec,
};
use icvlab_core::{ExtractedVector, FunctionVectorReport, InterventionSpec, LiveOutcome, Parameters, Result};

use crate::config::{ExperimentConfig, ResolvedSeeds};

/// Pretrains a fresh model on the stream described by `cfg.pretrain_mix`.
/// Initialization and stream both follow the model seed.
pub fn pretrain_model(
    cfg: &ExperimentConfig,
    seeds: &ResolvedSeeds,
    on_step: impl FnMut(usize, f64),
) -> Result<PretrainOutcome<f64>> {
    let init = init_model::<f64>(&cfg.model, seeds.model)?;
    let family = SimpleFamily::new(&cfg.task)?;
    let stream_seed = derive_seed(seeds.model, "pretrain-stream");
    let max = cfg.model.max_seq_len;
    let mut stream = |i| pretraining_sequence(&cfg.task, &family, &cfg.pretrain_mix, stream_seed, i, max);
    pretrain(&init, &mut stream, &cfg.pretrain, on_step)
}

pub fn dataset(task: &TaskSpec, seeds: &ResolvedSeeds) -> Result<Dataset> {
    generate_dataset(task, seeds.data)
}

/// Evaluation protocol with `k` demonstrations per query.
pub fn plan(cfg: &ExperimentConfig, seeds: &ResolvedSeeds, k: usize) -> EvalPlan {
    EvalPlan {
        k,
        seed: seeds.eval,
        limit: cfg.eval.limit,
    }
}

pub fn score(
    params: &Parameters,
    ds: &Dataset,
    spec: &InterventionSpec,
    k: usize,
    cfg: &ExperimentConfig,
    seeds: &ResolvedSeeds,
) -> Result<EvalResult> {
    evaluate(params, ds, Split::Eval, spec, &plan(cfg, seeds, k))
}

/// ICL episodes over training queries used to extract task and function
/// vectors.
pub fn extraction_episodes(ds: &Dataset, cfg: &ExperimentConfig, seeds: &ResolvedSeeds) -> Result<Vec<Episode>> {
    let b = &cfg.baselines;
    let seed = derive_seed(seeds.train, "extraction");
    (0..b.extraction_episodes)
        .map(|i| sample_episode(ds, Split::Train, b.extraction_k, seed, i % ds.train.len()))
        .collect()
}

/// Task vectors for every layer, the layer sweep, and the vector kept: the
/// configured layer or the best one.
pub fn task_vector(
    params: &Parameters,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    seeds: &ResolvedSeeds,
) -> Result<(ExtractedVector, Sweep)> {
    let eps = extraction_episodes(ds, cfg, seeds)?;
    let mut per_layer = task_vectors(params, &eps, seeds.train)?;
    let sw = sweep_layers(params, ds, &per_layer, &plan(cfg, seeds, 0))?;
    let layer = cfg.baselines.tv_layer.unwrap_or(sw.best_setting() as usize);
    Ok((per_layer.swap_remove(layer), sw))
}

fn dev_queries<'a>(ds: &'a Dataset, cfg: &ExperimentConfig) -> &'a [icvlab_core::tasks::Pair] {
    &ds.train[..cfg.baselines.fv_dev_queries.min(ds.train.len())]
}

pub fn function_vector(
    params: &Parameters,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    seeds: &ResolvedSeeds,
) -> Result<FunctionVectorReport> {
    let eps = extraction_episodes(ds, cfg, seeds)?;
    let top_n = cfg.baselines.fv_top_n.unwrap_or_else(|| default_top_n(&params.config));
    extract_function_vector(params, &eps, dev_queries(ds, cfg), top_n, cfg.baselines.fv_layer, seeds.train)
}

/// The function vector injected at each layer in turn.
pub fn function_vector_layers(
    params: &Parameters,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    seeds: &ResolvedSeeds,
) -> Result<Sweep> {
    let eps = extraction_episodes(ds, cfg, seeds)?;
    let top_n = cfg.baselines.fv_top_n.unwrap_or_else(|| default_top_n(&params.config));
    let means = head_means(params, &eps)?;
    let scores = score_heads(params, &means, dev_queries(ds, cfg))?;
    let per_layer = (0..params.config.n_layers)
        .map(|l| Ok(function_vector_from_scores(&means, &scores, top_n, Some(l), eps.len(), seeds.train)?.vector))
        .collect::<Result<Vec<_>>>()?;
    sweep_layers(params, ds, &per_layer, &plan(cfg, seeds, 0))
}

/// PCA-ICV at the best of the configured strengths.
pub fn pca_icv(
    params: &Parameters,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    seeds: &ResolvedSeeds,
) -> Result<(ExtractedVector, Sweep)> {
    let b = &cfg.baselines;
    let demos = &ds.train[..b.pca_demos.min(ds.train.len())];
    let base = extract_pca_icv(params, demos, b.pca_strengths[0], seeds.train)?;
    let candidates: Vec<ExtractedVector> = b.pca_strengths.iter().map(|&s| base.with_strength(s)).collect();
    let sw = sweep(params, ds, &candidates, |c| c.strength.unwrap_or(0.0), &plan(cfg, seeds, 0))?;
    Ok((base.with_strength(sw.best_setting()), sw))
}

/// LIVE with the configured hyperparameters, seeded from the train seed.
pub fn live(
    params: &Parameters,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    seeds: &ResolvedSeeds,
    on_step: impl FnMut(&StepMetric),
) -> Result<LiveOutcome> {
    let hyper = icvlab_core::live::LiveHyper {
        seed: seeds.train,
        eval_limit: cfg.live.eval_limit.or(cfg.eval.limit),
        ..cfg.live.clone()
    };
    train_live(params, ds, &hyper, on_step)
}

pub fn lora(
    params: &Parameters,
    ds: &Dataset,
    cfg: &ExperimentConfig,
    seeds: &ResolvedSeeds,
    on_step: impl FnMut(usize, f64),
) -> Result<LoraOutcome<f64>> {
    let hyper = icvlab_core::baselines::LoraHyper {
        seed: seeds.train,
        ..cfg.lora.clone()
    };
    train_lora_head(params, ds, &hyper, on_step)
}
