use std::collections::BTreeSet;

use mcqa_core::mcqa::{canonical_lines, read_canonical, Language, McqaItem, Split};
use mcqa_core::perturb::{apply_one_step, check_transformed, shuffle, PerturbConfig, TransformKind};
use mcqa_core::prompting::{render, render_label_list, Extras, PromptLibrary, Role, Stage, DEFAULT_PROMPT_IDS};
use mcqa_core::rng::Xoshiro256StarStar;
use mcqa_core::scoring::{
    aggregate, delta, is_correct, parse_answer, parse_strict, round2, score_cell, CellScore, ItemResult,
    ParseMode, ParsedAnswer,
};
use mcqa_core::twostep::Transform;
use proptest::prelude::*;

fn language() -> impl Strategy<Value = Language> {
    prop_oneof![Just(Language::En), Just(Language::Es)]
}

prop_compose! {
    fn item()(
        texts in prop::collection::btree_set("[a-z]{2,10}( [a-z]{2,8})?", 3..=5),
        gold in 0usize..5,
        lang in language(),
        question in "[A-Za-z ,]{40,80}\\?",
        id in "[a-z0-9:]{1,12}",
    ) -> McqaItem {
        let texts: Vec<String> = texts.into_iter().collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        McqaItem::with_texts(id, "synthetic", Split::Test, lang, question, &refs, gold % refs.len())
    }
}

fn kind() -> impl Strategy<Value = TransformKind> {
    prop::sample::select(TransformKind::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn transformed_items_satisfy_invariants(it in item(), k in kind(), seed in any::<u64>(), run in 0u32..5) {
        let cfg = PerturbConfig::default();
        let t = apply_one_step(k, &it, seed, run, &cfg).unwrap();
        let problems = check_transformed(&it, &t, cfg.noto.text(it.language));
        prop_assert!(problems.is_empty(), "{:?}", problems);
    }

    #[test]
    fn transformations_are_deterministic(it in item(), k in kind(), seed in any::<u64>(), run in 0u32..5) {
        let cfg = PerturbConfig::default();
        let a = serde_json::to_vec(&apply_one_step(k, &it, seed, run, &cfg).unwrap()).unwrap();
        let b = serde_json::to_vec(&apply_one_step(k, &it, seed, run, &cfg).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn inverse_permutation_recovers_order(it in item(), seed in any::<u64>()) {
        let t = shuffle(&it, seed);
        for (old, &new) in t.provenance.permutation.iter().enumerate() {
            prop_assert_eq!(&t.presented_options[new].text, &it.options[old].text);
        }
    }

    #[test]
    fn bounded_draws_stay_in_range(seed in any::<u64>(), n in 1u64..1000) {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        for _ in 0..32 {
            prop_assert!(rng.below(n) < n);
        }
    }

    #[test]
    fn answer_prompts_list_exactly_the_presented_labels(
        it in item(), k in kind(), seed in any::<u64>(), p in 0usize..3,
    ) {
        let lib = PromptLibrary::builtin();
        let cfg = lib.get(DEFAULT_PROMPT_IDS[p], it.language).unwrap();
        let t = apply_one_step(k, &it, seed, 0, &PerturbConfig::default()).unwrap();
        let messages = render(Stage::Answer, &t, cfg, &Extras::default()).unwrap();
        let user = &messages.last().unwrap().content;
        let list = render_label_list(&t.labels());
        prop_assert!(user.contains(&list));
        let parsed: Vec<char> = list.split(", ").map(|s| s.chars().next().unwrap()).collect();
        prop_assert_eq!(parsed, t.labels());
        // rendering is pure
        prop_assert_eq!(&messages, &render(Stage::Answer, &t, cfg, &Extras::default()).unwrap());
    }

    #[test]
    fn templates_never_restate_the_gold_option(it in item(), seed in any::<u64>(), p in 0usize..3) {
        let mut marked = it.clone();
        let sentinel = "ZZSENTINELZZ";
        marked.options[marked.gold_index].text = sentinel.to_string();
        let lib = PromptLibrary::builtin();
        let cfg = lib.get(DEFAULT_PROMPT_IDS[p], it.language).unwrap();
        let t = shuffle(&marked, seed);
        for stage in [Stage::Answer, Stage::CotStep1, Stage::SummStep1, Stage::ParStep1] {
            let messages = render(stage, &t, cfg, &Extras::default()).unwrap();
            for m in &messages {
                let expected = if m.role == Role::User { 1 } else { 0 };
                prop_assert_eq!(m.content.matches(sentinel).count(), expected);
            }
        }
    }

    #[test]
    fn summ_step2_hides_the_question(it in item(), summary in "[0-9 ]{0,60}", p in 0usize..3) {
        let lib = PromptLibrary::builtin();
        let cfg = lib.get(DEFAULT_PROMPT_IDS[p], it.language).unwrap();
        let t = shuffle(&it, 1);
        let extras = Extras { summary: Some(summary), ..Extras::default() };
        let messages = render(Stage::SummStep2, &t, cfg, &extras).unwrap();
        let longest = it.options.iter().map(|o| o.text.len()).max().unwrap();
        let content: String = messages.iter().map(|m| m.content.as_str()).collect();
        let q = it.question.as_bytes();
        for start in 0..q.len().saturating_sub(longest) {
            let window = &it.question[start..start + longest + 1];
            prop_assert!(!content.contains(window), "question fragment {:?} leaked", window);
        }
    }

    #[test]
    fn valid_parses_are_presented_labels(text in "\\PC{0,4}", labels in prop::collection::btree_set(prop::char::range('A', 'Z'), 3..=5)) {
        let labels: Vec<char> = labels.into_iter().collect();
        for mode in [ParseMode::TrimWhitespace, ParseMode::Strict] {
            if let ParsedAnswer::Valid(c) = parse_answer(&text, &labels, mode) {
                prop_assert!(labels.contains(&c));
                prop_assert_eq!(text.trim(), c.to_string());
            }
        }
    }

    #[test]
    fn accuracy_never_exceeds_format_rate(answers in prop::collection::vec("[A-Da-d. ]{0,3}", 1..40)) {
        let labels = ['A', 'B', 'C', 'D'];
        let results: Vec<ItemResult> = answers.iter().enumerate().map(|(i, a)| {
            let parsed = parse_strict(a, &labels);
            ItemResult {
                dataset: "d".into(),
                item_id: i.to_string(),
                transform: Transform::OneStep(TransformKind::Shuffle),
                model_id: "m".into(),
                prompt_id: "p".into(),
                run_index: 0,
                raw_text: a.clone(),
                gold_label: 'B',
                parsed,
                correct: is_correct(parsed, 'B'),
                flags: BTreeSet::new(),
                cache_keys: vec![],
            }
        }).collect();
        let s = score_cell(&results).unwrap();
        prop_assert!(0.0 <= s.accuracy && s.accuracy <= s.format_rate && s.format_rate <= 100.0);
    }

    #[test]
    fn baseline_plus_delta_reconstructs_mean(
        base in prop::collection::vec(0.0f64..=100.0, 1..10),
        other in prop::collection::vec(0.0f64..=100.0, 1..10),
    ) {
        let cells = |v: &[f64]| v.iter().map(|&a| CellScore { accuracy: a, format_rate: 100.0, n: 1 }).collect::<Vec<_>>();
        let b = aggregate(&cells(&base)).unwrap();
        let o = aggregate(&cells(&other)).unwrap();
        let d = delta(&b, &o).unwrap();
        prop_assert!((round2(b.mean_accuracy) + d - o.mean_accuracy).abs() <= 0.005 + 1e-9);
        prop_assert!(b.std_accuracy >= 0.0);
    }

    #[test]
    fn canonical_round_trip(items in prop::collection::vec(item(), 1..8)) {
        let items: Vec<McqaItem> = items.into_iter().enumerate().map(|(i, mut it)| {
            it.id = format!("{}-{i}", it.id);
            it.language = Language::En;
            it
        }).collect();
        let text = canonical_lines(&items);
        let ds = read_canonical(text.as_bytes(), "mem").unwrap();
        prop_assert_eq!(&ds.items, &items);
        prop_assert_eq!(canonical_lines(&ds.items), text);
    }
}

#[test]
fn every_option_reaches_every_position_uniformly() {
    let it = McqaItem::with_texts("pos", "d", Split::Test, Language::En, "Q?", &["a", "b", "c", "d"], 0);
    let mut counts = [[0u32; 4]; 4];
    for seed in 0..10_000u64 {
        let t = shuffle(&it, seed);
        for (old, &new) in t.provenance.permutation.iter().enumerate() {
            counts[old][new] += 1;
        }
    }
    for row in counts {
        for c in row {
            let f = c as f64 / 10_000.0;
            assert!((f - 0.25).abs() <= 0.02, "frequency {f}");
        }
    }
}
