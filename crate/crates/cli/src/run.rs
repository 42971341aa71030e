//! Subcommands: load the config, own the output directory, run one stage and
//! write its artifacts plus a manifest.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use icvlab_core::analysis::{
    bias_report, collect_shift_records, decode_vector, flops_estimate, instrumented_flops,
    project_2d, shift_similarity, timing_benchmark, write_bias_csv, write_flops_csv,
    write_projection_csv, write_similarity_csv, write_table_csv, write_timing_csv, CapturePoint,
    TimingMethod,
};
use icvlab_core::baselines::{ExtractedVector as Extracted, LoraAdapter, EXTRACTED_TAG, LORA_TAG};
use icvlab_core::checkpoint::{write_atomic, Container};
use icvlab_core::eval::EvalResult;
use icvlab_core::intervention::{IcvBundle, InterventionKind};
use icvlab_core::live::{merge_live, BUNDLE_TAG};
use icvlab_core::tasks::{render, sample_episode, Dataset, Split};
use icvlab_core::{InterventionSpec, Parameters, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{validate_config, AnalyzeBlock, ExperimentConfig, Method, ResolvedSeeds, SweepBlock};
use crate::error::{CliError, CliResult};
use crate::pipeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ExtractKind {
    Tv,
    Fv,
    Pca,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    TrainLive,
    Extract(ExtractKind),
    TrainLora,
    Eval,
    Sweep,
    Analyze,
    Merge,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::TrainLive => "train-live",
            Stage::Extract(ExtractKind::Tv) => "extract-tv",
            Stage::Extract(ExtractKind::Fv) => "extract-fv",
            Stage::Extract(ExtractKind::Pca) => "extract-pca",
            Stage::TrainLora => "train-lora",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Analyze => "analyze",
            Stage::Merge => "merge",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

/// Written atomically when a stage finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seeds: ResolvedSeeds,
    pub config: ExperimentConfig,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
    /// Reproducible results: identical configs give identical values.
    pub metrics: BTreeMap<String, f64>,
    /// Wall-clock measurements; these vary between runs.
    pub measurements: BTreeMap<String, f64>,
}

/// Standard artifact names inside the output directory.
pub const MODEL_FILE: &str = "model.ckpt";
pub const LIVE_FILE: &str = "live.bundle";
pub const GENERAL_LIVE_FILE: &str = "general_live.bundle";
pub const LORA_FILE: &str = "lora_head.ckpt";
pub const LOCK_FILE: &str = ".icvlab.lock";

pub fn vector_file(kind: ExtractKind) -> &'static str {
    match kind {
        ExtractKind::Tv => "tv.vec",
        ExtractKind::Fv => "fv.vec",
        ExtractKind::Pca => "pca_icv.vec",
    }
}

/// Exclusive ownership of an output directory for the life of a run.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CliError::Locked(dir.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Loads the config, applies command-line overrides and re-validates.
pub fn load_config(path: &Path, ov: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = validate_config(path).map_err(CliError::Config)?;
    if let Some(seed) = ov.seed {
        cfg.seeds.root = seed;
    }
    if let Some(out) = &ov.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

/// Runs one stage with an already validated config.
pub fn run_stage(stage: Stage, cfg: ExperimentConfig) -> CliResult<RunManifest> {
    let out = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("icvlab-out"));
    fs::create_dir_all(&out)?;
    let _lock = DirLock::acquire(&out)?;
    let seeds = cfg.seeds.resolve();
    let mut run = Run {
        manifest: RunManifest {
            stage: stage.name().into(),
            config_hash: cfg.hash(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            started_unix: unix_now(),
            finished_unix: 0,
            seeds,
            config: cfg.clone(),
            artifacts: Vec::new(),
            metrics: BTreeMap::new(),
            measurements: BTreeMap::new(),
        },
        cfg,
        seeds,
        out,
    };
    match stage {
        Stage::Pretrain => run.pretrain()?,
        Stage::TrainLive => run.train_live()?,
        Stage::Extract(kind) => run.extract(kind)?,
        Stage::TrainLora => run.train_lora()?,
        Stage::Eval => run.eval()?,
        Stage::Sweep => run.sweep()?,
        Stage::Analyze => run.analyze()?,
        Stage::Merge => run.merge()?,
    }
    run.manifest.finished_unix = unix_now();
    let path = run.out.join(format!("{}.manifest.json", stage.name()));
    write_atomic(&path, &serde_json::to_vec_pretty(&run.manifest).map_err(icvlab_core::Error::from)?)?;
    Ok(run.manifest)
}

struct Run {
    cfg: ExperimentConfig,
    seeds: ResolvedSeeds,
    out: PathBuf,
    manifest: RunManifest,
}

fn require(path: PathBuf, what: &'static str, key: &'static str) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::MissingArtifact {
            what,
            key,
            path: path.display().to_string(),
        })
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

impl Run {
    fn input(&self, set: &Option<PathBuf>, default: &str, what: &'static str, key: &'static str) -> CliResult<PathBuf> {
        require(set.clone().unwrap_or_else(|| self.out.join(default)), what, key)
    }

    fn model(&self) -> CliResult<Parameters> {
        let path = self.input(&self.cfg.inputs.model, MODEL_FILE, "model checkpoint", "model")?;
        let params = Parameters::load(&path)?;
        if params.config != self.cfg.model {
            return Err(CliError::Config(vec![format!(
                "model: checkpoint {} was trained with a different architecture",
                path.display()
            )]));
        }
        Ok(params)
    }

    fn dataset(&self) -> CliResult<Dataset> {
        Ok(pipeline::dataset(&self.cfg.task, &self.seeds)?)
    }

    fn load_bundle(&self, set: &Option<PathBuf>, default: &str, key: &'static str) -> CliResult<IcvBundle<f64>> {
        let path = self.input(set, default, "icv bundle", key)?;
        Ok(IcvBundle::from_container(&Container::load_tagged(&path, BUNDLE_TAG)?)?)
    }

    /// Intervention and shot count that score `method`.
    fn method_spec(&self, method: Method) -> CliResult<(InterventionSpec, usize)> {
        let inputs = &self.cfg.inputs;
        let vector = |set: &Option<PathBuf>, kind: ExtractKind, key| -> CliResult<InterventionSpec> {
            let path = self.input(set, vector_file(kind), "extracted vector", key)?;
            Ok(Extracted::from_container(&Container::load_tagged(&path, EXTRACTED_TAG)?)?.intervention()?)
        };
        Ok(match method {
            Method::ZeroShot => (InterventionSpec::None, 0),
            Method::Icl { k } => (InterventionSpec::None, k),
            Method::Live => (InterventionSpec::AddPerLayer(self.load_bundle(&inputs.live, LIVE_FILE, "live")?), 0),
            Method::GeneralLive => (
                InterventionSpec::AddPerLayer(self.load_bundle(&inputs.general_live, GENERAL_LIVE_FILE, "general_live")?),
                0,
            ),
            Method::Tv => (vector(&inputs.tv, ExtractKind::Tv, "tv")?, 0),
            Method::Fv => (vector(&inputs.fv, ExtractKind::Fv, "fv")?, 0),
            Method::PcaIcv => (vector(&inputs.pca_icv, ExtractKind::Pca, "pca_icv")?, 0),
            Method::LoraHead => {
                let path = self.input(&inputs.lora_head, LORA_FILE, "head adapter", "lora_head")?;
                (LoraAdapter::from_container(&Container::load_tagged(&path, LORA_TAG)?)?.intervention(), 0)
            }
        })
    }

    fn artifact(&mut self, name: &str) -> PathBuf {
        self.manifest.artifacts.push(PathBuf::from(name));
        let path = self.out.join(name);
        if let Some(dir) = path.parent() {
            let _ = fs::create_dir_all(dir);
        }
        path
    }

    fn metric(&mut self, key: impl Into<String>, value: f64) {
        self.manifest.metrics.insert(key.into(), value);
    }

    /// Replaces `metrics/<name>.jsonl` with `items`.
    fn jsonl<S: Serialize>(&mut self, name: &str, items: &[S]) -> CliResult<()> {
        let path = self.artifact(&format!("metrics/{name}.jsonl"));
        let _ = fs::remove_file(&path);
        icvlab_core::analysis::append_jsonl(&path, items)?;
        Ok(())
    }

    fn table(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
        let path = self.artifact(&format!("tables/{name}.csv"));
        write_table_csv(&path, header, rows)?;
        Ok(())
    }

    fn record_eval(&mut self, label: &str, k: usize, r: &EvalResult) -> CliResult<()> {
        self.metric(format!("accuracy.{label}"), r.accuracy);
        self.jsonl(
            &format!("eval-{label}"),
            &[json!({ "method": label, "k": k, "accuracy": r.accuracy, "correct": r.correct, "total": r.total })],
        )?;
        let rows: Vec<Vec<String>> = r
            .predictions
            .iter()
            .map(|p| {
                vec![
                    p.query_index.to_string(),
                    p.first_token.to_string(),
                    p.category.as_str().into(),
                    p.correct.to_string(),
                ]
            })
            .collect();
        self.table(
            &format!("predictions_{label}"),
            &["query_index", "first_token", "expected_category", "correct"],
            &rows,
        )
    }

    fn pretrain(&mut self) -> CliResult<()> {
        let mut losses = Vec::new();
        let outcome = pipeline::pretrain_model(&self.cfg, &self.seeds, |step, loss| {
            losses.push(json!({ "step": step, "loss": loss }));
        })?;
        outcome.params.save(&self.artifact(MODEL_FILE))?;
        self.jsonl("pretrain", &losses)?;
        let tail = &outcome.losses[outcome.losses.len().saturating_sub(50)..];
        self.metric("pretrain.final_loss", tail.iter().sum::<f64>() / tail.len().max(1) as f64);
        self.metric("model.parameters", outcome.params.count() as f64);
        Ok(())
    }

    fn train_live(&mut self) -> CliResult<()> {
        let params = self.model()?;
        let ds = self.dataset()?;
        let outcome = pipeline::live(&params, &ds, &self.cfg, &self.seeds, |_| {})?;
        let meta = json!({ "task": ds.spec.task_id(), "k": self.cfg.live.k, "objective": self.cfg.live.objective });
        outcome.bundle.to_container(meta).save(&self.artifact(LIVE_FILE))?;
        self.jsonl("train-live", &outcome.metrics)?;
        self.metric("live.parameters", outcome.bundle.n_trainable() as f64);
        let r = pipeline::score(&params, &ds, &InterventionSpec::AddPerLayer(outcome.bundle), 0, &self.cfg, &self.seeds)?;
        self.record_eval("live", 0, &r)
    }

    fn sweep_rows(sw: &icvlab_core::baselines::Sweep) -> Vec<Vec<String>> {
        sw.rows.iter().map(|&(s, a)| vec![fmt(s), fmt(a)]).collect()
    }

    fn extract(&mut self, kind: ExtractKind) -> CliResult<()> {
        let params = self.model()?;
        let ds = self.dataset()?;
        let (vector, sw, label) = match kind {
            ExtractKind::Tv => {
                let (v, sw) = pipeline::task_vector(&params, &ds, &self.cfg, &self.seeds)?;
                (v, Some(sw), "tv")
            }
            ExtractKind::Fv => {
                let report = pipeline::function_vector(&params, &ds, &self.cfg, &self.seeds)?;
                let rows: Vec<Vec<String>> = report
                    .scores
                    .iter()
                    .map(|s| vec![s.layer.to_string(), s.head.to_string(), fmt(s.score)])
                    .collect();
                self.table("fv_head_scores", &["layer", "head", "causal_dev_score"], &rows)?;
                (report.vector, None, "fv")
            }
            ExtractKind::Pca => {
                let (v, sw) = pipeline::pca_icv(&params, &ds, &self.cfg, &self.seeds)?;
                (v, Some(sw), "pca_icv")
            }
        };
        vector.to_container()?.save(&self.artifact(vector_file(kind)))?;
        if let Some(sw) = sw {
            let setting = if kind == ExtractKind::Pca { "strength" } else { "layer" };
            self.table(&format!("sweep_{label}"), &[setting, "accuracy"], &Self::sweep_rows(&sw))?;
            self.metric(format!("{label}.selected_{setting}"), sw.best_setting());
        }
        let r = pipeline::score(&params, &ds, &vector.intervention()?, 0, &self.cfg, &self.seeds)?;
        self.record_eval(label, 0, &r)
    }

    fn train_lora(&mut self) -> CliResult<()> {
        let params = self.model()?;
        let ds = self.dataset()?;
        let mut losses = Vec::new();
        let outcome = pipeline::lora(&params, &ds, &self.cfg, &self.seeds, |step, loss| {
            losses.push(json!({ "step": step, "loss": loss }));
        })?;
        outcome.adapter.to_container().save(&self.artifact(LORA_FILE))?;
        self.jsonl("train-lora", &losses)?;
        self.metric("lora_head.parameters", outcome.adapter.n_trainable() as f64);
        let r = pipeline::score(&params, &ds, &outcome.adapter.intervention(), 0, &self.cfg, &self.seeds)?;
        self.record_eval("lora_head", 0, &r)
    }

    fn eval(&mut self) -> CliResult<()> {
        let params = self.model()?;
        let ds = self.dataset()?;
        let method = self.cfg.method;
        let (spec, k) = self.method_spec(method)?;
        let r = pipeline::score(&params, &ds, &spec, k, &self.cfg, &self.seeds)?;
        self.record_eval(&method.label(), k, &r)
    }

    fn sweep(&mut self) -> CliResult<()> {
        let Some(block) = self.cfg.sweep.clone() else {
            return Err(CliError::Config(vec!["sweep: the sweep block is required".into()]));
        };
        let params = self.model()?;
        let ds = self.dataset()?;
        match block {
            SweepBlock::TvLayers => {
                let (_, sw) = pipeline::task_vector(&params, &ds, &self.cfg, &self.seeds)?;
                self.table("sweep_tv_layers", &["layer", "accuracy"], &Self::sweep_rows(&sw))?;
                self.metric("tv.best_accuracy", sw.best_accuracy());
            }
            SweepBlock::FvLayers => {
                let sw = pipeline::function_vector_layers(&params, &ds, &self.cfg, &self.seeds)?;
                self.table("sweep_fv_layers", &["layer", "accuracy"], &Self::sweep_rows(&sw))?;
                self.metric("fv.best_accuracy", sw.best_accuracy());
            }
            SweepBlock::PcaStrengths => {
                let (_, sw) = pipeline::pca_icv(&params, &ds, &self.cfg, &self.seeds)?;
                self.table("sweep_pca_strengths", &["strength", "accuracy"], &Self::sweep_rows(&sw))?;
                self.metric("pca_icv.best_accuracy", sw.best_accuracy());
            }
            SweepBlock::LiveShots { ks } => {
                let mut rows = Vec::new();
                for k in ks {
                    let mut cfg = self.cfg.clone();
                    cfg.live.k = k;
                    let icl = pipeline::score(&params, &ds, &InterventionSpec::None, k, &cfg, &self.seeds)?.accuracy;
                    let bundle = pipeline::live(&params, &ds, &cfg, &self.seeds, |_| {})?.bundle;
                    let live = pipeline::score(&params, &ds, &InterventionSpec::AddPerLayer(bundle), 0, &cfg, &self.seeds)?
                        .accuracy;
                    self.metric(format!("shots.k{k}.icl"), icl);
                    self.metric(format!("shots.k{k}.live"), live);
                    rows.push(vec![k.to_string(), fmt(icl), fmt(live)]);
                }
                self.table("sweep_live_shots", &["k", "icl_accuracy", "live_accuracy"], &rows)?;
            }
            SweepBlock::TrainSizes { sizes } => {
                let mut rows = Vec::new();
                for n in sizes {
                    let sub = ds.truncated(n, ds.eval.len());
                    let bundle = pipeline::live(&params, &sub, &self.cfg, &self.seeds, |_| {})?.bundle;
                    let acc = pipeline::score(&params, &sub, &InterventionSpec::AddPerLayer(bundle), 0, &self.cfg, &self.seeds)?
                        .accuracy;
                    self.metric(format!("train_size.n{n}.live"), acc);
                    rows.push(vec![n.to_string(), fmt(acc)]);
                }
                self.table("sweep_train_sizes", &["train_size", "live_accuracy"], &rows)?;
            }
        }
        Ok(())
    }

    fn analyze(&mut self) -> CliResult<()> {
        let Some(block) = self.cfg.analyze.clone() else {
            return Err(CliError::Config(vec!["analyze: the analyze block is required".into()]));
        };
        let params = self.model()?;
        match block {
            AnalyzeBlock::Similarity { methods } => {
                let ds = self.dataset()?;
                let at = CapturePoint::final_layer(&params.config);
                let k = self.cfg.reference_k();
                let mut reports = Vec::new();
                for m in methods {
                    let (spec, _) = self.method_spec(m)?;
                    let recs = collect_shift_records(&params, &ds, k, self.seeds.eval, &spec, self.cfg.eval.similarity_queries, at)?;
                    let rep = shift_similarity(&recs)?;
                    self.metric(format!("similarity.{}", m.label()), rep.mean);
                    reports.push((m.label(), rep));
                }
                write_similarity_csv(&self.artifact("tables/similarity.csv"), &reports)?;
            }
            AnalyzeBlock::Decode => {
                let ds = self.dataset()?;
                let vocab = ds.vocab();
                let bundle = self.load_bundle(&self.cfg.inputs.live, LIVE_FILE, "live")?;
                let mut rows = Vec::new();
                for l in 0..params.config.n_layers {
                    let dec = decode_vector(&bundle.shift(l), &params, self.cfg.eval.decode_top_k)?;
                    for (rank, (tok, p)) in dec.top.iter().enumerate() {
                        let cat = vocab.category_of(*tok).map_or("none", |c| c.as_str());
                        rows.push(vec![l.to_string(), rank.to_string(), tok.to_string(), cat.into(), fmt(*p)]);
                    }
                }
                self.table("decode_live", &["layer", "rank", "token", "category", "probability"], &rows)?;
            }
            AnalyzeBlock::Bias { methods } => {
                let ds = self.dataset()?;
                let vocab = ds.vocab();
                let mut reports = Vec::new();
                for m in methods {
                    let (spec, k) = self.method_spec(m)?;
                    let r = pipeline::score(&params, &ds, &spec, k, &self.cfg, &self.seeds)?;
                    let expected: Vec<_> = r.predictions.iter().map(|p| Some(p.category)).collect();
                    let rep = bias_report(&r.predictions, &expected, &vocab)?;
                    self.metric(format!("bias.{}.hallucinations", m.label()), rep.hallucinations as f64);
                    self.metric(format!("bias.{}.meaningless", m.label()), rep.meaningless as f64);
                    reports.push((m.label(), rep));
                }
                write_bias_csv(&self.artifact("tables/bias.csv"), &reports)?;
            }
            AnalyzeBlock::Flops { seq_lens } => {
                let rows = flops_rows(&params, &self.cfg, &seq_lens)?;
                for (label, b) in &rows {
                    self.metric(format!("flops.{label}.t{}", b.seq_len), b.total() as f64);
                }
                write_flops_csv(&self.artifact("tables/flops.csv"), &rows)?;
            }
            AnalyzeBlock::Timing { methods } => {
                let ds = self.dataset()?;
                let n = self.cfg.eval.timing_prompts.min(ds.eval.len());
                let mut timed = Vec::new();
                for m in methods {
                    let (spec, k) = self.method_spec(m)?;
                    let prompts = (0..n)
                        .map(|i| {
                            let ep = sample_episode(&ds, Split::Eval, k, self.seeds.eval, i)?;
                            Ok(render(&ep, false, params.config.max_seq_len)?.tokens)
                        })
                        .collect::<icvlab_core::Result<Vec<_>>>()?;
                    timed.push(TimingMethod { name: m.label(), intervention: spec, prompts });
                }
                let table = timing_benchmark(&params, &timed, self.cfg.eval.timing_repeats)?;
                for row in &table.rows {
                    self.manifest.measurements.insert(format!("latency.{}", row.method), row.median_seconds);
                }
                write_timing_csv(&self.artifact("tables/timing.csv"), &table)?;
            }
            AnalyzeBlock::Project { methods } => {
                let ds = self.dataset()?;
                let at = CapturePoint::final_layer(&params.config);
                let k = self.cfg.reference_k();
                let n = self.cfg.eval.projection_queries;
                let (mut states, mut labels) = (Vec::new(), Vec::new());
                for (i, m) in methods.iter().enumerate() {
                    let (spec, _) = self.method_spec(*m)?;
                    let recs = collect_shift_records(&params, &ds, k, self.seeds.eval, &spec, n, at)?;
                    for r in recs {
                        if i == 0 {
                            states.push(r.r_zs);
                            labels.push("zero_shot".to_string());
                            states.push(r.r_icl);
                            labels.push(format!("icl_k{k}"));
                        }
                        states.push(r.r_method);
                        labels.push(m.label());
                    }
                }
                let proj = project_2d(&states, &labels)?;
                write_projection_csv(&self.artifact("tables/projection.csv"), &[("first_answer_token".into(), proj)])?;
            }
        }
        Ok(())
    }

    fn merge(&mut self) -> CliResult<()> {
        let Some(block) = self.cfg.merge.clone() else {
            return Err(CliError::Config(vec!["merge: the merge block is required".into()]));
        };
        let params = self.model()?;
        let bundles = block
            .bundles
            .iter()
            .map(|p| self.load_bundle(&Some(p.clone()), LIVE_FILE, "live"))
            .collect::<CliResult<Vec<_>>>()?;
        let merged = merge_live(&bundles)?;
        merged
            .to_container(json!({ "merged_from": block.bundles.len() }))
            .save(&self.artifact(GENERAL_LIVE_FILE))?;
        let mut rows = Vec::new();
        for task in &block.tasks {
            let ds = pipeline::dataset(task, &self.seeds)?;
            let zs = pipeline::score(&params, &ds, &InterventionSpec::None, 0, &self.cfg, &self.seeds)?.accuracy;
            let acc = pipeline::score(&params, &ds, &InterventionSpec::AddPerLayer(merged.clone()), 0, &self.cfg, &self.seeds)?
                .accuracy;
            let id = task.task_id();
            self.metric(format!("merge.{id}.general_live"), acc);
            self.metric(format!("merge.{id}.zero_shot"), zs);
            rows.push(vec![id, fmt(zs), fmt(acc)]);
        }
        self.table("merge", &["task", "zero_shot_accuracy", "general_live_accuracy"], &rows)
    }
}

/// Closed-form FLOPs for every intervention kind at each length, each
/// checked against an instrumented forward pass.
pub fn flops_rows(
    params: &Parameters,
    cfg: &ExperimentConfig,
    seq_lens: &[usize],
) -> CliResult<Vec<(String, icvlab_core::analysis::FlopsBreakdown)>> {
    let c = &params.config;
    let (l, d) = (c.n_layers, c.d_model);
    let r = cfg.lora.rank.max(1);
    let probes: Vec<(&str, InterventionSpec)> = vec![
        ("zero_shot", InterventionSpec::None),
        ("live", InterventionSpec::AddPerLayer(IcvBundle::zeros(l, d))),
        ("tv", InterventionSpec::ReplaceLastToken { layer: l / 2, vector: vec![0.0; d] }),
        ("fv", InterventionSpec::AddLastToken { layer: l / 2, vector: vec![0.0; d] }),
        (
            "pca_icv",
            InterventionSpec::AddAllTokens { vectors: vec![vec![1.0; d]; l], strength: 1e-3, renormalize: true },
        ),
        ("lora_head", InterventionSpec::LowRankHead { a: Tensor::zeros(d, r), b: Tensor::zeros(r, c.vocab_size) }),
    ];
    let mut rows = Vec::new();
    for &t in seq_lens {
        let tokens: Vec<usize> = (0..t).map(|i| i % c.vocab_size).collect();
        for (label, spec) in &probes {
            let kind: InterventionKind = spec.kind();
            let closed = flops_estimate(c, t, kind)?;
            let measured = instrumented_flops(params, &tokens, spec)?;
            if closed != measured {
                return Err(icvlab_core::Error::Invalid(format!(
                    "{label} at {t} tokens: closed form {} FLOPs, instrumented {}",
                    closed.total(),
                    measured.total()
                ))
                .into());
            }
            rows.push((label.to_string(), closed));
        }
    }
    Ok(rows)
}
