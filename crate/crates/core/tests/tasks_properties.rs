//! Task generators against an interpreter and token layout written here
//! independently, plus split hygiene, episode sampling and serialization.

use std::collections::HashSet;

use icvlab_core::tasks::{
    gen_mixed, gen_simple, generate_dataset, in_eval_region, parse, pretraining_sequence, render, sample_episode,
    AnswerCategory, Dataset, Pair, PretrainMix, SimpleFamily, Split, Subtask, TaskKind, TaskSpec,
    Vocab, A,
    BOS, Q, SEP,
};
use proptest::prelude::*;

/// Offsets of the token layout, recomputed from the task spec by hand.
struct Layout {
    scene: usize,
    subtasks: usize,
    symbols: usize,
    digits: usize,
    yes_no: usize,
    markers: usize,
}

fn layout(spec: &TaskSpec) -> Layout {
    let scene = 4 + spec.simple_inputs + spec.simple_inputs * spec.family_size;
    let subtasks = scene + spec.scene_symbols;
    let symbols = subtasks + 4;
    let digits = symbols + spec.scene_symbols * spec.alphabets;
    let yes_no = digits + 10 * spec.alphabets;
    let markers = yes_no + 2 * spec.alphabets;
    Layout {
        scene,
        subtasks,
        symbols,
        digits,
        yes_no,
        markers,
    }
}

/// Expected value token for a scene question in `alphabet`, derived from the
/// raw scene without the library's interpreter.
fn oracle_answer(spec: &TaskSpec, input: &[usize], alphabet: usize) -> (Subtask, usize) {
    let lay = layout(spec);
    let scene: Vec<usize> = input[..spec.scene_len].iter().map(|t| t - lay.scene).collect();
    let which = input[spec.scene_len] - lay.subtasks;
    match which {
        0 => (Subtask::Last, lay.symbols + alphabet * spec.scene_symbols + scene[spec.scene_len - 1]),
        1 => {
            let probe = input[spec.scene_len + 1] - lay.scene;
            let n = scene.iter().filter(|&&s| s == probe).count();
            (Subtask::Count, lay.digits + alphabet * 10 + n)
        }
        2 => {
            let probe = input[spec.scene_len + 1] - lay.scene;
            let yes = scene.contains(&probe);
            (Subtask::Exist, lay.yes_no + alphabet * 2 + if yes { 0 } else { 1 })
        }
        3 => {
            let mut best = (0, usize::MAX);
            for s in 0..spec.scene_symbols {
                let c = scene.iter().filter(|&&x| x == s).count();
                if c > best.0 {
                    best = (c, s);
                }
            }
            let ties = (0..spec.scene_symbols)
                .filter(|&s| scene.iter().filter(|&&x| x == s).count() == best.0)
                .count();
            assert_eq!(ties, 1, "majority scenes must have a unique mode");
            (Subtask::Majority, lay.symbols + alphabet * spec.scene_symbols + best.1)
        }
        other => panic!("unknown subtask token offset {other}"),
    }
}

fn mixed(train: usize, eval: usize) -> TaskSpec {
    TaskSpec {
        train_size: Some(train),
        eval_size: Some(eval),
        alphabet: 2,
        style: 1,
        ..TaskSpec::mixed()
    }
}

#[test]
fn evaluation_answers_match_the_oracle() {
    let spec = mixed(200, 1000);
    let ds = gen_mixed(&spec, 3).unwrap();
    let marker = layout(&spec).markers + spec.style;
    let mut seen_subtasks = HashSet::new();
    for p in &ds.eval {
        let (sub, value) = oracle_answer(&spec, &p.input, spec.alphabet);
        assert_eq!(p.answer, vec![value, marker], "{p:?}");
        assert_eq!(p.subtask, Some(sub));
        assert_eq!(p.category, sub.category());
        seen_subtasks.insert(sub);
    }
    assert_eq!(seen_subtasks.len(), 4);
}

#[test]
fn training_answers_are_correct_up_to_label_noise() {
    let spec = mixed(4000, 10);
    let ds = gen_mixed(&spec, 4).unwrap();
    let vocab = Vocab::new(&spec).unwrap();
    let lay = layout(&spec);
    let (mut wrong_alphabet, mut wrong_style) = (0, 0);
    for p in &ds.train {
        let alphabet = vocab.alphabet_of(p.answer[0]).unwrap();
        let (_, value) = oracle_answer(&spec, &p.input, alphabet);
        assert_eq!(p.answer[0], value, "value must be right in whatever alphabet");
        let style = p.answer[1] - lay.markers;
        assert!(style < spec.styles);
        wrong_alphabet += usize::from(alphabet != spec.alphabet);
        wrong_style += usize::from(style != spec.style);
    }
    let n = ds.train.len() as f64;
    for (what, count) in [("alphabet", wrong_alphabet), ("style", wrong_style)] {
        let rate = count as f64 / n;
        assert!((rate - spec.label_noise).abs() < 0.02, "{what} noise rate {rate}");
    }
}

#[test]
fn styles_zero_gives_single_token_answers() {
    let spec = TaskSpec {
        styles: 0,
        ..mixed(50, 50)
    };
    let ds = gen_mixed(&spec, 1).unwrap();
    assert!(ds.train.iter().chain(&ds.eval).all(|p| p.answer.len() == 1));
}

#[test]
fn splits_are_disjoint_and_respect_the_region() {
    let spec = mixed(2000, 500);
    let ds = gen_mixed(&spec, 8).unwrap();
    let train: HashSet<&Vec<usize>> = ds.train.iter().map(|p| &p.input).collect();
    let eval: HashSet<&Vec<usize>> = ds.eval.iter().map(|p| &p.input).collect();
    assert_eq!(train.len(), ds.train.len());
    assert_eq!(eval.len(), ds.eval.len());
    assert!(train.is_disjoint(&eval));
    assert!(ds.eval.iter().all(|p| in_eval_region(&spec, &p.input)));
    assert!(ds.train.iter().all(|p| !in_eval_region(&spec, &p.input)));
    let subs: HashSet<_> = ds.eval.iter().map(|p| p.subtask).collect();
    assert_eq!(subs.len(), 4, "every subtask must reach the eval split");
}

#[test]
fn generation_is_deterministic_in_the_seed() {
    let spec = mixed(100, 50);
    assert_eq!(gen_mixed(&spec, 5).unwrap(), gen_mixed(&spec, 5).unwrap());
    assert_ne!(gen_mixed(&spec, 5).unwrap().train, gen_mixed(&spec, 6).unwrap().train);
    let simple = TaskSpec::simple();
    assert_eq!(gen_simple(&simple, 2).unwrap(), gen_simple(&simple, 2).unwrap());
}

#[test]
fn simple_family_members_are_bijections_with_disjoint_answers() {
    let spec = TaskSpec::simple();
    let fam = SimpleFamily::new(&spec).unwrap();
    let inputs_start = 4;
    let answers_start = 4 + spec.simple_inputs;
    let mut all = HashSet::new();
    for t in 0..spec.family_size {
        let image: HashSet<usize> = (0..spec.simple_inputs)
            .map(|x| fam.apply(t, inputs_start + x))
            .collect();
        assert_eq!(image.len(), spec.simple_inputs);
        let block = answers_start + t * spec.simple_inputs..answers_start + (t + 1) * spec.simple_inputs;
        assert!(image.iter().all(|a| block.contains(a)));
        all.extend(image);
    }
    assert_eq!(all.len(), spec.simple_inputs * spec.family_size);
    // Distinct members disagree on the underlying permutation somewhere.
    let perm = |t: usize| -> Vec<usize> {
        (0..spec.simple_inputs)
            .map(|x| fam.apply(t, inputs_start + x) - answers_start - t * spec.simple_inputs)
            .collect()
    };
    let perms: HashSet<Vec<usize>> = (0..spec.family_size).map(perm).collect();
    assert_eq!(perms.len(), spec.family_size);
}

#[test]
fn simple_dataset_uses_its_member_and_holds_out_inputs() {
    let spec = TaskSpec {
        family: 5,
        ..TaskSpec::simple()
    };
    let fam = SimpleFamily::new(&spec).unwrap();
    let ds = gen_simple(&spec, 0).unwrap();
    let held_out: HashSet<usize> = fam.eval_inputs(&spec).into_iter().collect();
    for p in &ds.train {
        assert!(!held_out.contains(&p.input[0]));
        assert_eq!(p.answer, vec![fam.apply(5, p.input[0])]);
    }
    for p in &ds.eval {
        assert!(held_out.contains(&p.input[0]));
        assert_eq!(p.category, AnswerCategory::Mapped);
    }
}

#[test]
fn training_queries_never_see_themselves_as_demonstrations() {
    let ds = gen_mixed(&mixed(60, 10), 2).unwrap();
    for trial in 0..10_000u64 {
        let i = (trial as usize * 7) % ds.train.len();
        let ep = sample_episode(&ds, Split::Train, 8, trial, i).unwrap();
        assert_eq!(ep.demos.len(), 8);
        assert!(ep.demos.iter().all(|d| d.input != ep.query.input), "trial {trial}");
        let distinct: HashSet<&Vec<usize>> = ep.demos.iter().map(|d| &d.input).collect();
        assert_eq!(distinct.len(), 8);
    }
    assert!(sample_episode(&ds, Split::Train, 60, 0, 0).is_err());
    assert!(sample_episode(&ds, Split::Eval, 0, 0, 10).is_err());
}

#[test]
fn episodes_are_reproducible() {
    let ds = gen_mixed(&mixed(60, 10), 2).unwrap();
    let a = sample_episode(&ds, Split::Eval, 4, 11, 3).unwrap();
    let b = sample_episode(&ds, Split::Eval, 4, 11, 3).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rendering_layout_and_overflow() {
    let ds = gen_mixed(&mixed(60, 10), 2).unwrap();
    let ep = sample_episode(&ds, Split::Eval, 3, 1, 0).unwrap();
    let r = render(&ep, true, 512).unwrap();
    assert_eq!(r.tokens[0], BOS);
    assert_eq!(r.tokens[r.prompt_len - 1], A);
    assert_eq!(r.answer_targets, ep.query.answer);
    for (&p, &t) in r.answer_positions.iter().zip(&r.answer_targets) {
        assert_eq!(r.tokens[p + 1], t);
    }
    let expected_len = 1 + ep.demos.iter().map(|d| d.input.len() + d.answer.len() + 3).sum::<usize>()
        + ep.query.input.len()
        + 2
        + ep.query.answer.len();
    assert_eq!(r.tokens.len(), expected_len);
    assert!(render(&ep, true, expected_len - 1).is_err());
    let prompt_only = render(&ep, false, 512).unwrap();
    assert_eq!(prompt_only.tokens, r.prompt());
}

#[test]
fn episode_length_bound_covers_every_rendering() {
    for spec in [mixed(200, 40), TaskSpec { styles: 0, ..mixed(200, 40) }, TaskSpec::simple()] {
        let ds = generate_dataset(&spec, 4).unwrap();
        for k in [0, 1, 5, 12] {
            let mut longest = 0;
            for i in 0..ds.eval.len().min(40) {
                let ep = sample_episode(&ds, Split::Eval, k, 9, i).unwrap();
                longest = longest.max(render(&ep, true, usize::MAX).unwrap().tokens.len());
            }
            assert!(longest <= spec.max_episode_len(k), "k = {k}: {longest}");
            if spec.kind == TaskKind::SimpleMapping {
                assert_eq!(longest, spec.max_episode_len(k));
            }
        }
    }
}

#[test]
fn jsonl_round_trip() {
    let spec = mixed(30, 12);
    let ds = gen_mixed(&spec, 9).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/data.jsonl");
    ds.write_jsonl(&path).unwrap();
    let back = Dataset::read_jsonl(&path, spec.clone(), 9).unwrap();
    assert_eq!(back, ds);
    let first = std::fs::read_to_string(&path).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(line["split"], "train");
    assert_eq!(line["task"], spec.task_id());
}

#[test]
fn invalid_specs_are_rejected() {
    let base = TaskSpec::mixed();
    let cases = [
        TaskSpec { styles: 1, ..base.clone() },
        TaskSpec { style: 3, ..base.clone() },
        TaskSpec { alphabet: 3, ..base.clone() },
        TaskSpec { label_noise: 0.7, ..base.clone() },
        TaskSpec { scene_len: 10, ..base.clone() },
        TaskSpec { probe_symbols: 7, ..base.clone() },
        TaskSpec { subtasks: vec![], ..base.clone() },
        TaskSpec { vocab_size: 40, ..base.clone() },
        TaskSpec { family: 8, ..TaskSpec::simple() },
    ];
    for spec in cases {
        assert!(spec.validate().is_err(), "{spec:?}");
    }
    assert!(base.validate().is_ok());
}

#[test]
fn pretraining_stream_avoids_the_eval_region() {
    let spec = TaskSpec::mixed();
    let fam = SimpleFamily::new(&spec).unwrap();
    let mix = PretrainMix::default();
    for index in 0..300 {
        let seq = pretraining_sequence(&spec, &fam, &mix, 1, index, 512).unwrap();
        assert_eq!(seq.positions.len(), seq.targets.len());
        for (&p, &t) in seq.positions.iter().zip(&seq.targets) {
            assert_eq!(seq.tokens[p + 1], t);
        }
        let parsed = parse(&seq.tokens).unwrap();
        let inputs = parsed.demos.iter().map(|(i, _)| i).chain([&parsed.query_input]);
        for input in inputs {
            if input.len() > 1 {
                assert!(!in_eval_region(&spec, input), "sequence {index}");
            }
        }
    }
}

fn pair_strategy() -> impl Strategy<Value = Pair> {
    (
        prop::collection::vec(4usize..100, 1..12),
        prop::collection::vec(4usize..100, 1..3),
    )
        .prop_map(|(input, answer)| Pair {
            input,
            answer,
            subtask: None,
            category: AnswerCategory::Mapped,
        })
}

proptest! {
    #[test]
    fn parse_inverts_render(demos in prop::collection::vec(pair_strategy(), 0..6), query in pair_strategy()) {
        let ep = icvlab_core::tasks::Episode { demos: demos.clone(), query: query.clone(), task: "t".into(), seed: 0 };
        let r = render(&ep, true, 4096).unwrap();
        prop_assert!(r.tokens.iter().filter(|&&t| t == Q).count() == demos.len() + 1);
        prop_assert!(r.tokens.iter().filter(|&&t| t == SEP).count() == demos.len());
        let parsed = parse(&r.tokens).unwrap();
        let expect: Vec<(Vec<usize>, Vec<usize>)> = demos.iter().map(|d| (d.input.clone(), d.answer.clone())).collect();
        prop_assert_eq!(parsed.demos, expect);
        prop_assert_eq!(parsed.query_input, query.input);
        prop_assert_eq!(parsed.query_answer, query.answer);
    }
}
