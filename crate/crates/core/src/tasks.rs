//! Synthetic in-context tasks: a family of global symbol bijections, and a
//! scene-question task whose answers depend on scene content.
//!
//! Both task kinds share one vocabulary layout so a single model can be
//! pretrained on their mixture:
//!
//! ```text
//! BOS Q A SEP | simple inputs | simple answers | scene symbols | subtask tokens
//!   | symbol alphabets x F | digit alphabets x F | yes/no alphabets x F
//!   | style markers x S
//! ```
//!
//! Each simple-task family member writes its answers in its own alphabet, so
//! one demonstration reveals what zero-shot cannot know. A scene-question
//! dataset writes each answer as a value token in one of `F` alphabets
//! followed by one of `S` style markers. The marker is predicted one position
//! after the final prompt token, which is where interventions confined to the
//! last prompt position cannot reach.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TrainingSequence;
use crate::seed::{derive_seed, hash_tokens, indexed_rng, rng_for};

pub const BOS: usize = 0;
pub const Q: usize = 1;
pub const A: usize = 2;
pub const SEP: usize = 3;
const N_CONTROL: usize = 4;
const N_DIGITS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SimpleMapping,
    MixedVqa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subtask {
    /// Name the symbol in the final scene slot.
    Last,
    /// Count occurrences of a probe symbol.
    Count,
    /// Does a probe symbol occur at all.
    Exist,
    /// Most frequent symbol (scenes are drawn with a unique mode).
    Majority,
}

impl Subtask {
    pub const ALL: [Subtask; 4] = [Subtask::Last, Subtask::Count, Subtask::Exist, Subtask::Majority];

    fn index(self) -> usize {
        self as usize
    }

    pub fn category(self) -> AnswerCategory {
        match self {
            Subtask::Last | Subtask::Majority => AnswerCategory::Symbol,
            Subtask::Count => AnswerCategory::Number,
            Subtask::Exist => AnswerCategory::YesNo,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerCategory {
    /// Output of a simple-task bijection.
    Mapped,
    Symbol,
    Number,
    YesNo,
}

impl AnswerCategory {
    pub const SCENE: [AnswerCategory; 3] =
        [AnswerCategory::Symbol, AnswerCategory::Number, AnswerCategory::YesNo];

    pub fn as_str(self) -> &'static str {
        match self {
            AnswerCategory::Mapped => "mapped",
            AnswerCategory::Symbol => "symbol",
            AnswerCategory::Number => "number",
            AnswerCategory::YesNo => "yes_no",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Number of simple-task input symbols (answer symbols per member).
    pub simple_inputs: usize,
    /// Number of global bijections in the simple family, each with its own
    /// answer alphabet.
    pub family_size: usize,
    /// Which bijection this dataset uses.
    pub family: usize,
    pub scene_symbols: usize,
    pub scene_len: usize,
    /// COUNT and EXIST ask about one of the first `probe_symbols` scene
    /// symbols.
    pub probe_symbols: usize,
    pub subtasks: Vec<Subtask>,
    /// Alternative answer alphabets for scene questions.
    pub alphabets: usize,
    /// The alphabet this dataset answers in.
    pub alphabet: usize,
    /// Number of answer styles. With `styles > 0` every scene answer is
    /// followed by a style marker token, predicted one position after the
    /// value token. Zero disables markers.
    pub styles: usize,
    /// The style marker this dataset closes its answers with.
    pub style: usize,
    /// Probability that a training-split scene answer is written in a
    /// uniformly chosen other alphabet. Evaluation answers are always clean,
    /// so a single demonstration identifies the alphabet only with
    /// probability `1 - label_noise` and more demonstrations help.
    pub label_noise: f64,
    pub vocab_size: usize,
    /// Seeds the bijection family and the train/eval region split.
    pub world_seed: u64,
    pub train_size: Option<usize>,
    pub eval_size: Option<usize>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::MixedVqa,
            simple_inputs: 6,
            family_size: 8,
            family: 0,
            scene_symbols: 6,
            scene_len: 9,
            probe_symbols: 1,
            subtasks: Subtask::ALL.to_vec(),
            alphabets: 3,
            alphabet: 0,
            styles: 3,
            style: 0,
            label_noise: 0.15,
            vocab_size: 128,
            world_seed: 0,
            train_size: None,
            eval_size: None,
        }
    }
}

impl TaskSpec {
    pub fn simple() -> Self {
        Self {
            kind: TaskKind::SimpleMapping,
            ..Self::default()
        }
    }

    pub fn mixed() -> Self {
        Self::default()
    }

    pub fn train_size(&self) -> usize {
        self.train_size.unwrap_or(match self.kind {
            TaskKind::SimpleMapping => 2000,
            TaskKind::MixedVqa => 8000,
        })
    }

    pub fn eval_size(&self) -> usize {
        self.eval_size.unwrap_or(match self.kind {
            TaskKind::SimpleMapping => 500,
            TaskKind::MixedVqa => 1000,
        })
    }

    /// Upper bounds on the input and answer lengths of one pair.
    pub fn max_pair_lens(&self) -> (usize, usize) {
        match self.kind {
            TaskKind::SimpleMapping => (1, 1),
            TaskKind::MixedVqa => (self.scene_len + 2, 1 + usize::from(self.styles > 0)),
        }
    }

    /// Longest rendering of a `k`-shot episode with the query answer included.
    pub fn max_episode_len(&self, k: usize) -> usize {
        let (input, answer) = self.max_pair_lens();
        1 + k * (input + answer + 3) + input + 2 + answer
    }

    pub fn task_id(&self) -> String {
        match self.kind {
            TaskKind::SimpleMapping => format!("simple/f{}", self.family),
            TaskKind::MixedVqa => {
                let subs: Vec<&str> = self
                    .subtasks
                    .iter()
                    .map(|s| match s {
                        Subtask::Last => "last",
                        Subtask::Count => "count",
                        Subtask::Exist => "exist",
                        Subtask::Majority => "majority",
                    })
                    .collect();
                format!("mixed/a{}s{}/{}", self.alphabet, self.style, subs.join("+"))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Task(m));
        if self.simple_inputs == 0 {
            return bad("simple_inputs must be positive".into());
        }
        if self.family_size == 0 {
            return bad("family_size must be positive".into());
        }
        if self.family >= self.family_size {
            return bad(format!("family {} >= family_size {}", self.family, self.family_size));
        }
        if self.scene_symbols < 2 {
            return bad("scene_symbols must be at least 2".into());
        }
        if self.probe_symbols == 0 || self.probe_symbols > self.scene_symbols {
            return bad(format!(
                "probe_symbols must be in 1..={} (got {})",
                self.scene_symbols, self.probe_symbols
            ));
        }
        if self.scene_len == 0 {
            return bad("scene_len must be positive".into());
        }
        if self.scene_len >= N_DIGITS {
            return bad(format!(
                "scene_len {} exceeds the digit answer range 0..={}",
                self.scene_len,
                N_DIGITS - 1
            ));
        }
        if self.subtasks.is_empty() {
            return bad("subtasks must not be empty".into());
        }
        if self.alphabets == 0 {
            return bad("alphabets must be positive".into());
        }
        let wrong_each = self.label_noise / (self.alphabets.max(2) - 1) as f64;
        if !(0.0..1.0).contains(&self.label_noise) || wrong_each >= 1.0 - self.label_noise {
            return bad(format!(
                "label_noise {} must leave the true alphabet the most likely one",
                self.label_noise
            ));
        }
        if self.alphabet >= self.alphabets {
            return bad(format!("alphabet {} >= alphabets {}", self.alphabet, self.alphabets));
        }
        if self.styles > 0 && self.style >= self.styles {
            return bad(format!("style {} >= styles {}", self.style, self.styles));
        }
        if self.styles == 1 {
            return bad("styles must be 0 or at least 2".into());
        }
        let wrong_style = self.label_noise / (self.styles.max(2) - 1) as f64;
        if wrong_style >= 1.0 - self.label_noise {
            return bad(format!(
                "label_noise {} must leave the true style the most likely one",
                self.label_noise
            ));
        }
        let layout = Vocab::layout(self);
        if layout.size > self.vocab_size {
            return bad(format!(
                "vocabulary needs {} tokens but vocab_size is {}",
                layout.size, self.vocab_size
            ));
        }
        Ok(())
    }
}

/// Token-id layout shared by both task kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub simple_inputs: Range<usize>,
    pub simple_answers: Range<usize>,
    pub scene: Range<usize>,
    pub subtasks: Range<usize>,
    pub symbols: Range<usize>,
    pub digits: Range<usize>,
    pub yes_no: Range<usize>,
    pub markers: Range<usize>,
    pub scene_symbols: usize,
    pub scene_len: usize,
    pub alphabets: usize,
    /// Tokens in use (ids `0..size`).
    pub size: usize,
}

impl Vocab {
    fn layout(spec: &TaskSpec) -> Self {
        let mut next = N_CONTROL;
        let mut take = |n: usize| {
            let r = next..next + n;
            next += n;
            r
        };
        let simple_inputs = take(spec.simple_inputs);
        let simple_answers = take(spec.simple_inputs * spec.family_size);
        let scene = take(spec.scene_symbols);
        let subtasks = take(Subtask::ALL.len());
        let symbols = take(spec.scene_symbols * spec.alphabets);
        let digits = take(N_DIGITS * spec.alphabets);
        let yes_no = take(2 * spec.alphabets);
        let markers = take(spec.styles);
        Self {
            simple_inputs,
            simple_answers,
            scene,
            subtasks,
            symbols,
            digits,
            yes_no,
            markers,
            scene_symbols: spec.scene_symbols,
            scene_len: spec.scene_len,
            alphabets: spec.alphabets,
            size: next,
        }
    }

    pub fn new(spec: &TaskSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self::layout(spec))
    }

    pub fn subtask_token(&self, s: Subtask) -> usize {
        self.subtasks.start + s.index()
    }

    pub fn symbol_answer(&self, alphabet: usize, symbol: usize) -> usize {
        self.symbols.start + alphabet * self.scene_symbols + symbol
    }

    pub fn digit_answer(&self, alphabet: usize, n: usize) -> usize {
        self.digits.start + alphabet * N_DIGITS + n
    }

    pub fn yes_no_answer(&self, alphabet: usize, yes: bool) -> usize {
        self.yes_no.start + alphabet * 2 + usize::from(!yes)
    }

    pub fn marker(&self, style: usize) -> usize {
        self.markers.start + style
    }

    /// Answer category a token belongs to, if it is an answer token at all.
    pub fn category_of(&self, token: usize) -> Option<AnswerCategory> {
        if self.simple_answers.contains(&token) {
            Some(AnswerCategory::Mapped)
        } else if self.symbols.contains(&token) {
            Some(AnswerCategory::Symbol)
        } else if self.digits.contains(&token) {
            Some(AnswerCategory::Number)
        } else if self.yes_no.contains(&token) {
            Some(AnswerCategory::YesNo)
        } else {
            None
        }
    }

    /// Alphabet index of an answer token (simple answers have none).
    pub fn alphabet_of(&self, token: usize) -> Option<usize> {
        if self.symbols.contains(&token) {
            Some((token - self.symbols.start) / self.scene_symbols)
        } else if self.digits.contains(&token) {
            Some((token - self.digits.start) / N_DIGITS)
        } else if self.yes_no.contains(&token) {
            Some((token - self.yes_no.start) / 2)
        } else {
            None
        }
    }
}

/// One (input, answer) example.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Pair {
    pub input: Vec<usize>,
    pub answer: Vec<usize>,
    pub subtask: Option<Subtask>,
    pub category: AnswerCategory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: TaskSpec,
    pub seed: u64,
    pub train: Vec<Pair>,
    pub eval: Vec<Pair>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Pair] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::layout(&self.spec)
    }

    /// Copy with each split truncated.
    pub fn truncated(&self, train: usize, eval: usize) -> Self {
        Self {
            spec: self.spec.clone(),
            seed: self.seed,
            train: self.train[..train.min(self.train.len())].to_vec(),
            eval: self.eval[..eval.min(self.eval.len())].to_vec(),
        }
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        let task = self.spec.task_id();
        for (split, pairs) in [(Split::Train, &self.train), (Split::Eval, &self.eval)] {
            for p in pairs {
                let line = JsonlPair {
                    split,
                    task: task.clone(),
                    pair: p.clone(),
                };
                serde_json::to_writer(&mut w, &line)?;
                w.write_all(b"\n")?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads pairs written by [`Dataset::write_jsonl`]; the task spec and seed are
    /// supplied by the caller.
    pub fn read_jsonl(path: &Path, spec: TaskSpec, seed: u64) -> Result<Self> {
        let r = BufReader::new(fs::File::open(path)?);
        let mut ds = Self {
            spec,
            seed,
            train: Vec::new(),
            eval: Vec::new(),
        };
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: JsonlPair = serde_json::from_str(&line)?;
            match rec.split {
                Split::Train => ds.train.push(rec.pair),
                Split::Eval => ds.eval.push(rec.pair),
            }
        }
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct JsonlPair {
    split: Split,
    task: String,
    #[serde(flatten)]
    pair: Pair,
}

/// The simple family: member `t` maps input `x` to `rho_t[x]` written in
/// answer alphabet `t`. The permutations `rho_t` are independent, so the
/// members are distinct global bijections, and their answer sets are disjoint.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleFamily {
    rho: Vec<Vec<usize>>,
    answers_start: usize,
    inputs_start: usize,
}

impl SimpleFamily {
    pub fn new(spec: &TaskSpec) -> Result<Self> {
        let vocab = Vocab::new(spec)?;
        let mut rng = rng_for(spec.world_seed, "simple-family");
        let rho = (0..spec.family_size)
            .map(|_| {
                let mut p: Vec<usize> = (0..spec.simple_inputs).collect();
                p.shuffle(&mut rng);
                p
            })
            .collect();
        Ok(Self {
            rho,
            answers_start: vocab.simple_answers.start,
            inputs_start: vocab.simple_inputs.start,
        })
    }

    /// Answer token for input token `x` under family member `t`.
    pub fn apply(&self, t: usize, x: usize) -> usize {
        let n = self.rho[t].len();
        self.answers_start + t * n + self.rho[t][x - self.inputs_start]
    }

    pub fn family_size(&self) -> usize {
        self.rho.len()
    }

    /// Inputs reserved for evaluation queries: the last third of a fixed
    /// shuffle, at least one.
    pub fn eval_inputs(&self, spec: &TaskSpec) -> Vec<usize> {
        let n = spec.simple_inputs;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_for(spec.world_seed, "simple-eval-inputs"));
        let k = (n / 3).max(1);
        let mut out: Vec<usize> = order[n - k..].iter().map(|&i| self.inputs_start + i).collect();
        out.sort_unstable();
        out
    }
}

fn simple_pair(fam: &SimpleFamily, t: usize, x: usize) -> Pair {
    Pair {
        input: vec![x],
        answer: vec![fam.apply(t, x)],
        subtask: None,
        category: AnswerCategory::Mapped,
    }
}

pub fn gen_simple(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    if spec.kind != TaskKind::SimpleMapping {
        return Err(Error::Task("gen_simple needs a simple_mapping spec".into()));
    }
    let fam = SimpleFamily::new(spec)?;
    let vocab = Vocab::layout(spec);
    let eval_inputs = fam.eval_inputs(spec);
    let train_inputs: Vec<usize> = vocab
        .simple_inputs
        .clone()
        .filter(|x| !eval_inputs.contains(x))
        .collect();
    if train_inputs.is_empty() {
        return Err(Error::Task("no inputs left for training".into()));
    }
    let mut rng = rng_for(seed, "gen-simple");
    let mut draw = |pool: &[usize], n: usize| -> Vec<Pair> {
        (0..n)
            .map(|_| simple_pair(&fam, spec.family, pool[rng.random_range(0..pool.len())]))
            .collect()
    };
    let train = draw(&train_inputs, spec.train_size());
    let eval = draw(&eval_inputs, spec.eval_size());
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train,
        eval,
    })
}

/// Whether a scene-question input is reserved for evaluation. The region is
/// fixed by the world seed, so no training stream can ever produce it.
pub fn in_eval_region(spec: &TaskSpec, input: &[usize]) -> bool {
    hash_tokens(derive_seed(spec.world_seed, "eval-region"), input) % 8 == 0
}

/// Reference interpreter: the raw answer value of a scene question.
/// Returns (category, value) where value is a symbol index, a count, or 0/1.
pub fn interpret(vocab: &Vocab, input: &[usize]) -> Result<(Subtask, usize)> {
    let scene_len = vocab.scene_len;
    if input.len() < scene_len + 1 {
        return Err(Error::Task("scene question too short".into()));
    }
    let scene: Vec<usize> = input[..scene_len]
        .iter()
        .map(|&t| {
            vocab
                .scene
                .contains(&t)
                .then(|| t - vocab.scene.start)
                .ok_or_else(|| Error::Task(format!("token {t} is not a scene symbol")))
        })
        .collect::<Result<_>>()?;
    let sub_tok = input[scene_len];
    let sub = Subtask::ALL
        .into_iter()
        .find(|&s| vocab.subtask_token(s) == sub_tok)
        .ok_or_else(|| Error::Task(format!("token {sub_tok} is not a subtask")))?;
    let arg = input.get(scene_len + 1).copied();
    let symbol_arg = || {
        arg.filter(|t| vocab.scene.contains(t))
            .map(|t| t - vocab.scene.start)
            .ok_or_else(|| Error::Task("missing symbol argument".into()))
    };
    let value = match sub {
        Subtask::Last => scene[scene_len - 1],
        Subtask::Count => {
            let s = symbol_arg()?;
            scene.iter().filter(|&&x| x == s).count()
        }
        Subtask::Exist => {
            let s = symbol_arg()?;
            usize::from(scene.contains(&s))
        }
        Subtask::Majority => {
            let mut counts = vec![0usize; vocab.scene_symbols];
            for &x in &scene {
                counts[x] += 1;
            }
            let best = *counts.iter().max().unwrap();
            let winners: Vec<usize> = (0..counts.len()).filter(|&i| counts[i] == best).collect();
            if winners.len() != 1 {
                return Err(Error::Task("scene has no unique majority".into()));
            }
            winners[0]
        }
    };
    Ok((sub, value))
}

fn encode_answer(vocab: &Vocab, alphabet: usize, sub: Subtask, value: usize) -> usize {
    match sub.category() {
        AnswerCategory::Symbol => vocab.symbol_answer(alphabet, value),
        AnswerCategory::Number => vocab.digit_answer(alphabet, value),
        AnswerCategory::YesNo => vocab.yes_no_answer(alphabet, value == 1),
        AnswerCategory::Mapped => unreachable!("scene subtasks never map"),
    }
}

fn random_scene_question<R: Rng>(
    vocab: &Vocab,
    spec: &TaskSpec,
    sub: Subtask,
    rng: &mut R,
) -> Vec<usize> {
    let s = spec.scene_symbols;
    let draw_scene = |rng: &mut R| -> Vec<usize> {
        (0..spec.scene_len).map(|_| rng.random_range(0..s)).collect()
    };
    let mut scene = draw_scene(rng);
    let arg = match sub {
        Subtask::Last => None,
        Subtask::Count => Some(vocab.scene.start + rng.random_range(0..spec.probe_symbols)),
        Subtask::Exist => {
            // Balanced yes/no: the asked symbol is planted or removed.
            let a = rng.random_range(0..spec.probe_symbols);
            if rng.random_bool(0.5) {
                if !scene.contains(&a) {
                    let i = rng.random_range(0..scene.len());
                    scene[i] = a;
                }
            } else {
                for x in scene.iter_mut().filter(|x| **x == a) {
                    *x = (a + rng.random_range(1..s)) % s;
                }
            }
            Some(vocab.scene.start + a)
        }
        Subtask::Majority => {
            loop {
                let mut counts = vec![0usize; s];
                scene.iter().for_each(|&x| counts[x] += 1);
                let best = *counts.iter().max().unwrap();
                if counts.iter().filter(|&&c| c == best).count() == 1 {
                    break;
                }
                scene = draw_scene(rng);
            }
            None
        }
    };
    let mut input: Vec<usize> = scene.iter().map(|&x| vocab.scene.start + x).collect();
    input.push(vocab.subtask_token(sub));
    input.extend(arg);
    input
}

/// `true` with probability `noise`: then `pick` is replaced by a uniformly
/// chosen different one of `n`.
fn perturb<R: Rng>(pick: usize, n: usize, noise: f64, rng: &mut R) -> usize {
    if n > 1 && rng.random_bool(noise) {
        (pick + rng.random_range(1..n)) % n
    } else {
        pick
    }
}

fn scene_pair<R: Rng>(
    vocab: &Vocab,
    spec: &TaskSpec,
    (alphabet, style): (usize, usize),
    noise: f64,
    rng: &mut R,
) -> Pair {
    let sub = spec.subtasks[rng.random_range(0..spec.subtasks.len())];
    let input = random_scene_question(vocab, spec, sub, rng);
    let (_, value) = interpret(vocab, &input).expect("generated question is well formed");
    let alphabet = perturb(alphabet, spec.alphabets, noise, rng);
    let mut answer = vec![encode_answer(vocab, alphabet, sub, value)];
    if spec.styles > 0 {
        answer.push(vocab.marker(perturb(style, spec.styles, noise, rng)));
    }
    Pair {
        answer,
        input,
        subtask: Some(sub),
        category: sub.category(),
    }
}

pub fn gen_mixed(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    if spec.kind != TaskKind::MixedVqa {
        return Err(Error::Task("gen_mixed needs a mixed_vqa spec".into()));
    }
    let vocab = Vocab::new(spec)?;
    let mut rng = rng_for(seed, "gen-mixed");
    let mut fill = |want_eval: bool, noise: f64, n: usize| -> Result<Vec<Pair>> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(n);
        let mut attempts = 0usize;
        while out.len() < n {
            attempts += 1;
            if attempts > 200 * n + 10_000 {
                return Err(Error::Task(format!(
                    "could not draw {n} distinct pairs; the input space is too small"
                )));
            }
            let p = scene_pair(&vocab, spec, (spec.alphabet, spec.style), noise, &mut rng);
            if in_eval_region(spec, &p.input) == want_eval && seen.insert(p.input.clone()) {
                out.push(p);
            }
        }
        Ok(out)
    };
    let eval = fill(true, 0.0, spec.eval_size())?;
    let train = fill(false, spec.label_noise, spec.train_size())?;
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        train,
        eval,
    })
}

pub fn generate_dataset(spec: &TaskSpec, seed: u64) -> Result<Dataset> {
    match spec.kind {
        TaskKind::SimpleMapping => gen_simple(spec, seed),
        TaskKind::MixedVqa => gen_mixed(spec, seed),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub demos: Vec<Pair>,
    pub query: Pair,
    pub task: String,
    pub seed: u64,
}

/// Draws `k` demonstrations from the training split for the `query_index`-th
/// query of `split`. A training query is never among its own demonstrations.
pub fn sample_episode(
    dataset: &Dataset,
    split: Split,
    k: usize,
    seed: u64,
    query_index: usize,
) -> Result<Episode> {
    let queries = dataset.split(split);
    let query = queries
        .get(query_index)
        .ok_or(Error::OutOfRange {
            what: "query index",
            index: query_index,
            limit: queries.len(),
        })?
        .clone();
    let pool = dataset.train.len();
    let excluded = (split == Split::Train).then_some(query_index);
    let available = pool - usize::from(excluded.is_some());
    if k >= pool || k > available {
        return Err(Error::Task(format!(
            "k = {k} demonstrations needs a training split larger than {pool}"
        )));
    }
    let tag = match split {
        Split::Train => "episode-train",
        Split::Eval => "episode-eval",
    };
    let mut rng = indexed_rng(seed, tag, query_index as u64);
    let picks = index::sample(&mut rng, available, k);
    let demos = picks
        .into_iter()
        .map(|i| match excluded {
            Some(q) if i >= q => dataset.train[i + 1].clone(),
            _ => dataset.train[i].clone(),
        })
        .collect();
    Ok(Episode {
        demos,
        query,
        task: dataset.spec.task_id(),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub tokens: Vec<usize>,
    /// Tokens up to and including the query's `A`.
    pub prompt_len: usize,
    /// Positions whose next-token target is a query answer token.
    pub answer_positions: Vec<usize>,
    pub answer_targets: Vec<usize>,
}

impl Rendered {
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.tokens.len()];
        for &p in &self.answer_positions {
            if p < m.len() {
                m[p] = true;
            }
        }
        m
    }

    pub fn prompt(&self) -> &[usize] {
        &self.tokens[..self.prompt_len]
    }
}

fn episode_len(episode: &Episode, include_answer: bool) -> usize {
    let demos: usize = episode
        .demos
        .iter()
        .map(|d| d.input.len() + d.answer.len() + 3)
        .sum();
    let answer = if include_answer {
        episode.query.answer.len()
    } else {
        0
    };
    1 + demos + episode.query.input.len() + 2 + answer
}

pub fn render(episode: &Episode, include_query_answer: bool, max_seq_len: usize) -> Result<Rendered> {
    let len = episode_len(episode, include_query_answer);
    if len > max_seq_len {
        return Err(Error::Overflow {
            episode: format!(
                "{} k={} seed={}",
                episode.task,
                episode.demos.len(),
                episode.seed
            ),
            len,
            max: max_seq_len,
        });
    }
    let mut tokens = Vec::with_capacity(len);
    tokens.push(BOS);
    for d in &episode.demos {
        tokens.push(Q);
        tokens.extend(&d.input);
        tokens.push(A);
        tokens.extend(&d.answer);
        tokens.push(SEP);
    }
    tokens.push(Q);
    tokens.extend(&episode.query.input);
    tokens.push(A);
    let prompt_len = tokens.len();
    if include_query_answer {
        tokens.extend(&episode.query.answer);
    }
    let n = episode.query.answer.len();
    Ok(Rendered {
        tokens,
        prompt_len,
        answer_positions: (prompt_len - 1..prompt_len - 1 + n).collect(),
        answer_targets: episode.query.answer.clone(),
    })
}

/// Fields recovered from a rendered sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed {
    pub demos: Vec<(Vec<usize>, Vec<usize>)>,
    pub query_input: Vec<usize>,
    pub query_answer: Vec<usize>,
}

pub fn parse(tokens: &[usize]) -> Result<Parsed> {
    let err = |m: &str| Error::Task(format!("unparseable rendering: {m}"));
    if tokens.first() != Some(&BOS) {
        return Err(err("missing BOS"));
    }
    let mut segments: Vec<&[usize]> = Vec::new();
    let mut rest = &tokens[1..];
    while !rest.is_empty() {
        if rest[0] != Q {
            return Err(err("segment does not start with Q"));
        }
        let end = rest[1..].iter().position(|&t| t == Q).map_or(rest.len(), |p| p + 1);
        segments.push(&rest[1..end]);
        rest = &rest[end..];
    }
    let (last, demos) = segments.split_last().ok_or_else(|| err("no query"))?;
    let split_at_a = |seg: &[usize]| -> Result<(Vec<usize>, Vec<usize>)> {
        let a = seg.iter().position(|&t| t == A).ok_or_else(|| err("missing A"))?;
        Ok((seg[..a].to_vec(), seg[a + 1..].to_vec()))
    };
    let demos = demos
        .iter()
        .map(|seg| {
            let (input, mut ans) = split_at_a(seg)?;
            if ans.pop() != Some(SEP) {
                return Err(err("demonstration lacks SEP"));
            }
            Ok((input, ans))
        })
        .collect::<Result<Vec<_>>>()?;
    let (query_input, query_answer) = split_at_a(last)?;
    Ok(Parsed {
        demos,
        query_input,
        query_answer,
    })
}

/// Composition of the pretraining stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainMix {
    pub simple_fraction: f64,
    pub simple_max_k: usize,
    pub mixed_max_k: usize,
    /// Alphabet noise on scene answers in the stream.
    pub label_noise: f64,
}

impl Default for PretrainMix {
    fn default() -> Self {
        Self {
            simple_fraction: 0.5,
            simple_max_k: 16,
            mixed_max_k: 8,
            label_noise: 0.0,
        }
    }
}

/// The `index`-th pretraining sequence. Family member, alphabet choices and
/// shot count are drawn per sequence; scene questions from the evaluation
/// region are never produced. Every answer token and the `SEP` after it is
/// supervised.
pub fn pretraining_sequence(
    spec: &TaskSpec,
    family: &SimpleFamily,
    mix: &PretrainMix,
    seed: u64,
    index: usize,
    max_seq_len: usize,
) -> Result<TrainingSequence> {
    let vocab = Vocab::layout(spec);
    let mut rng = indexed_rng(seed, "pretrain-stream", index as u64);
    let pairs: Vec<Pair> = if rng.random_bool(mix.simple_fraction.clamp(0.0, 1.0)) {
        let t = rng.random_range(0..family.family_size());
        let k = rng.random_range(0..=mix.simple_max_k);
        (0..=k)
            .map(|_| {
                let x = rng.random_range(vocab.simple_inputs.clone());
                simple_pair(family, t, x)
            })
            .collect()
    } else {
        let alphabet = rng.random_range(0..spec.alphabets);
        let style = rng.random_range(0..spec.styles.max(1));
        let k = rng.random_range(0..=mix.mixed_max_k);
        let mut out = Vec::with_capacity(k + 1);
        while out.len() <= k {
            let p = scene_pair(&vocab, spec, (alphabet, style), mix.label_noise, &mut rng);
            if !in_eval_region(spec, &p.input) {
                out.push(p);
            }
        }
        out
    };
    let mut tokens = vec![BOS];
    let mut positions = Vec::new();
    let mut targets = Vec::new();
    for p in &pairs {
        tokens.push(Q);
        tokens.extend(&p.input);
        tokens.push(A);
        for &a in &p.answer {
            positions.push(tokens.len() - 1);
            targets.push(a);
            tokens.push(a);
        }
        positions.push(tokens.len() - 1);
        targets.push(SEP);
        tokens.push(SEP);
    }
    if tokens.len() > max_seq_len {
        return Err(Error::Overflow {
            episode: format!("pretraining sequence {index}"),
            len: tokens.len(),
            max: max_seq_len,
        });
    }
    Ok(TrainingSequence {
        tokens,
        positions,
        targets,
    })
}
