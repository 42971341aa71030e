//! Experiment configuration: one JSON document per run, validated in full
//! before any compute.

use std::path::{Path, PathBuf};

use icvlab_core::baselines::{default_top_n, PCA_STRENGTHS};
use icvlab_core::live::LiveHyper;
use icvlab_core::model::{ModelConfig, PretrainHyper};
use icvlab_core::seed::derive_seed;
use icvlab_core::tasks::{PretrainMix, TaskSpec};
use icvlab_core::baselines::LoraHyper;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// The method an `eval` run scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Method {
    #[default]
    ZeroShot,
    Icl {
        k: usize,
    },
    Live,
    Tv,
    Fv,
    PcaIcv,
    LoraHead,
    GeneralLive,
}

impl Method {
    pub fn label(self) -> String {
        match self {
            Method::ZeroShot => "zero_shot".into(),
            Method::Icl { k } => format!("icl_k{k}"),
            Method::Live => "live".into(),
            Method::Tv => "tv".into(),
            Method::Fv => "fv".into(),
            Method::PcaIcv => "pca_icv".into(),
            Method::LoraHead => "lora_head".into(),
            Method::GeneralLive => "general_live".into(),
        }
    }
}

/// Seeds for the four independent sources of randomness. Unset seeds are
/// derived from `root` and the purpose name.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Seeds {
    pub root: u64,
    /// Model initialization and the pretraining stream.
    pub model: Option<u64>,
    /// Dataset generation.
    pub data: Option<u64>,
    /// Vector initialization, training order and extraction episodes.
    pub train: Option<u64>,
    /// Demonstrations drawn for evaluation queries.
    pub eval: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResolvedSeeds {
    pub model: u64,
    pub data: u64,
    pub train: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn resolve(&self) -> ResolvedSeeds {
        let pick = |s: Option<u64>, purpose| s.unwrap_or_else(|| derive_seed(self.root, purpose));
        ResolvedSeeds {
            model: pick(self.model, "model"),
            data: pick(self.data, "data"),
            train: pick(self.train, "train"),
            eval: pick(self.eval, "eval"),
        }
    }
}

/// Settings shared by the non-learnable baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineHyper {
    /// ICL episodes averaged for task and function vectors.
    pub extraction_episodes: usize,
    /// Demonstrations per extraction episode.
    pub extraction_k: usize,
    /// Task-vector layer; unset picks the best layer on the eval split.
    pub tv_layer: Option<usize>,
    /// Heads summed into the function vector; unset uses `max(1, L*H/10)`.
    pub fv_top_n: Option<usize>,
    /// Injection layer; unset uses the layer of the best head.
    pub fv_layer: Option<usize>,
    /// Training queries used to score heads.
    pub fv_dev_queries: usize,
    /// Demonstrations whose representation differences feed PCA-ICV.
    pub pca_demos: usize,
    /// Candidate strengths; the best on the eval split is kept.
    pub pca_strengths: Vec<f64>,
}

impl Default for BaselineHyper {
    fn default() -> Self {
        Self {
            extraction_episodes: 32,
            extraction_k: 8,
            tv_layer: None,
            fv_top_n: None,
            fv_layer: None,
            fv_dev_queries: 100,
            pca_demos: 32,
            pca_strengths: PCA_STRENGTHS.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalBlock {
    /// Evaluation queries scored (all when unset).
    pub limit: Option<usize>,
    /// Shots of the reference ICL run in analyses; unset uses `live.k`.
    pub reference_k: Option<usize>,
    pub similarity_queries: usize,
    pub projection_queries: usize,
    pub timing_prompts: usize,
    pub timing_repeats: usize,
    pub decode_top_k: usize,
}

impl Default for EvalBlock {
    fn default() -> Self {
        Self {
            limit: None,
            reference_k: None,
            similarity_queries: 200,
            projection_queries: 50,
            timing_prompts: 20,
            timing_repeats: 15,
            decode_top_k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SweepBlock {
    TvLayers,
    FvLayers,
    PcaStrengths,
    /// Teacher shot counts; LIVE is retrained and ICL rerun for each.
    LiveShots { ks: Vec<usize> },
    /// LIVE retrained on the first `n` training queries for each size.
    TrainSizes { sizes: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AnalyzeBlock {
    Similarity { methods: Vec<Method> },
    Decode,
    Bias { methods: Vec<Method> },
    Flops { seq_lens: Vec<usize> },
    Timing { methods: Vec<Method> },
    Project { methods: Vec<Method> },
}

/// General LIVE: the bundles to merge and the tasks to score the merge on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeBlock {
    pub bundles: Vec<PathBuf>,
    pub tasks: Vec<TaskSpec>,
}

/// Artifact locations read by downstream stages; unset entries default to
/// the standard names inside the output directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Inputs {
    pub model: Option<PathBuf>,
    pub live: Option<PathBuf>,
    pub tv: Option<PathBuf>,
    pub fv: Option<PathBuf>,
    pub pca_icv: Option<PathBuf>,
    pub lora_head: Option<PathBuf>,
    pub general_live: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Free text; the format has no comments.
    pub description: String,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub method: Method,
    pub pretrain: PretrainHyper,
    pub pretrain_mix: PretrainMix,
    pub live: LiveHyper,
    pub lora: LoraHyper,
    pub baselines: BaselineHyper,
    pub eval: EvalBlock,
    pub seeds: Seeds,
    pub inputs: Inputs,
    pub sweep: Option<SweepBlock>,
    pub analyze: Option<AnalyzeBlock>,
    pub merge: Option<MergeBlock>,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn reference_k(&self) -> usize {
        self.eval.reference_k.unwrap_or(self.live.k)
    }
}

/// Parses and validates a config file. Every problem is reported, each
/// prefixed with the offending field.
pub fn validate_config(path: &Path) -> Result<ExperimentConfig, Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig, Vec<String>> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| vec![e.to_string()])?;
    let errors = check(&cfg);
    if errors.is_empty() {
        Ok(cfg)
    } else {
        Err(errors)
    }
}

/// Cross-field checks on an already parsed config.
pub fn check(cfg: &ExperimentConfig) -> Vec<String> {
    let mut errs = Vec::new();
    let mut push = |r: icvlab_core::Result<()>| {
        if let Err(e) = r {
            errs.push(e.to_string());
        }
    };
    push(cfg.model.validate());
    push(cfg.task.validate());
    push(cfg.live.validate());
    let m = &cfg.model;
    let t = &cfg.task;
    if t.vocab_size != m.vocab_size {
        errs.push(format!(
            "task.vocab_size ({}) must equal model.vocab_size ({})",
            t.vocab_size, m.vocab_size
        ));
    }
    let p = &cfg.pretrain;
    if p.steps == 0 || p.batch_size == 0 || !(p.lr > 0.0) {
        errs.push("pretrain: steps, batch_size and lr must be positive".into());
    }
    let mix = &cfg.pretrain_mix;
    if !(0.0..=1.0).contains(&mix.simple_fraction) || !(0.0..1.0).contains(&mix.label_noise) {
        errs.push("pretrain_mix: simple_fraction must lie in [0, 1] and label_noise in [0, 1)".into());
    }
    let l = &cfg.lora;
    if l.rank > m.d_model.min(m.vocab_size) {
        errs.push(format!("lora.rank ({}) exceeds min(d_model, vocab_size)", l.rank));
    }
    if l.batch_size == 0 || !(0.0..1.0).contains(&l.dropout) || !(l.lr >= 0.0) {
        errs.push("lora: batch_size must be positive, dropout in [0, 1), lr non-negative".into());
    }
    let b = &cfg.baselines;
    if b.extraction_episodes == 0 {
        errs.push("baselines.extraction_episodes must be positive".into());
    }
    if let Some(layer) = b.tv_layer.filter(|&x| x >= m.n_layers) {
        errs.push(format!("baselines.tv_layer ({layer}) must be below model.n_layers ({})", m.n_layers));
    }
    if let Some(layer) = b.fv_layer.filter(|&x| x >= m.n_layers) {
        errs.push(format!("baselines.fv_layer ({layer}) must be below model.n_layers ({})", m.n_layers));
    }
    let heads = m.n_layers * m.n_heads;
    if b.fv_top_n.unwrap_or_else(|| default_top_n(m)) > heads {
        errs.push(format!("baselines.fv_top_n exceeds the {heads} heads of the model"));
    }
    if b.pca_demos < 2 {
        errs.push("baselines.pca_demos must be at least 2".into());
    }
    if b.pca_strengths.is_empty() || b.pca_strengths.iter().any(|s| !s.is_finite()) {
        errs.push("baselines.pca_strengths must be a non-empty list of finite numbers".into());
    }
    let train = t.train_size();
    for (field, n) in [
        ("baselines.fv_dev_queries", b.fv_dev_queries),
        ("baselines.pca_demos", b.pca_demos),
    ] {
        if n > train {
            errs.push(format!("{field} ({n}) exceeds the {train} training queries"));
        }
    }
    if cfg.eval.limit == Some(0) {
        errs.push("eval.limit must be positive when set".into());
    }
    if cfg.eval.timing_repeats < 3 || cfg.eval.timing_prompts == 0 {
        errs.push("eval: timing_repeats must be at least 3 and timing_prompts positive".into());
    }
    if cfg.eval.projection_queries < 2 || cfg.eval.similarity_queries == 0 {
        errs.push("eval: projection_queries must be at least 2 and similarity_queries positive".into());
    }

    let mut shots = vec![
        ("live.k", cfg.live.k),
        ("baselines.extraction_k", b.extraction_k),
        ("eval.reference_k", cfg.reference_k()),
    ];
    if let Method::Icl { k } = cfg.method {
        shots.push(("method.k", k));
    }
    if let Some(SweepBlock::LiveShots { ks }) = &cfg.sweep {
        if ks.is_empty() {
            errs.push("sweep.ks must not be empty".into());
        }
        shots.extend(ks.iter().map(|&k| ("sweep.ks", k)));
    }
    for (field, k) in shots {
        let len = t.max_episode_len(k);
        if len > m.max_seq_len {
            errs.push(format!(
                "{field} = {k}: a {k}-shot episode renders to up to {len} tokens but model.max_seq_len is {}",
                m.max_seq_len
            ));
        }
        if k >= train {
            errs.push(format!("{field} = {k} needs more than {train} training queries"));
        }
    }
    if let Some(SweepBlock::TrainSizes { sizes }) = &cfg.sweep {
        if sizes.is_empty() || sizes.iter().any(|&n| n > train || n <= cfg.live.k) {
            errs.push(format!(
                "sweep.sizes must be non-empty, each above live.k ({}) and at most {train}",
                cfg.live.k
            ));
        }
    }
    if let Some(a) = &cfg.analyze {
        match a {
            AnalyzeBlock::Similarity { methods } | AnalyzeBlock::Project { methods } => {
                if methods.is_empty() {
                    errs.push("analyze.methods must not be empty".into());
                }
                if methods.contains(&Method::LoraHead) {
                    errs.push(
                        "analyze.methods: lora_head changes only the output head and has no residual shift".into(),
                    );
                }
            }
            AnalyzeBlock::Bias { methods } | AnalyzeBlock::Timing { methods } => {
                if methods.is_empty() {
                    errs.push("analyze.methods must not be empty".into());
                }
            }
            AnalyzeBlock::Flops { seq_lens } => {
                if seq_lens.is_empty() || seq_lens.iter().any(|&n| n == 0 || n > m.max_seq_len) {
                    errs.push(format!(
                        "analyze.seq_lens must be non-empty with each length in 1..={}",
                        m.max_seq_len
                    ));
                }
            }
            AnalyzeBlock::Decode => {}
        }
    }
    if let Some(mg) = &cfg.merge {
        if mg.bundles.is_empty() || mg.tasks.is_empty() {
            errs.push("merge: bundles and tasks must both be non-empty".into());
        }
        for (i, task) in mg.tasks.iter().enumerate() {
            if let Err(e) = task.validate() {
                errs.push(format!("merge.tasks[{i}]: {e}"));
            }
        }
    }
    errs
}
