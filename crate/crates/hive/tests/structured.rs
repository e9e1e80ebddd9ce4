use std::collections::BTreeMap;
use std::path::PathBuf;

use hive::core::Label;
use hive::io::read_jsonl;
use hive::verifier::prompt::{base_answer_of, format_pairs, SYSTEM_PROMPT};
use hive::verifier::structured::ParsedFields;
use hive::verifier::target::rationale_for;
use hive::verifier::{eval_structured, parse_first_json, render_prompt, HallucinationType, StructuredPrediction, TargetJson};
use proptest::prelude::*;
use serde::Deserialize;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[derive(Deserialize)]
struct RawPrediction {
    raw_text: String,
}

/// Twenty hand-scored predictions: two are not JSON at all, one pairs
/// decision 1 with a hallucination type.
fn fixture_report() -> hive::verifier::StructuredReport {
    let targets: Vec<serde_json::Value> = read_jsonl(&fixture("structured_targets.jsonl")).unwrap();
    let targets: Vec<TargetJson> = targets.iter().map(|v| TargetJson::from_json(&v.to_string()).unwrap()).collect();
    let preds: Vec<RawPrediction> = read_jsonl(&fixture("structured_preds.jsonl")).unwrap();
    let preds: Vec<StructuredPrediction> = preds.into_iter().map(|p| StructuredPrediction::from_raw(p.raw_text, 0.0, 0.0)).collect();
    eval_structured(&preds, &targets).unwrap()
}

#[test]
fn hand_scored_fixture() {
    let r = fixture_report();
    assert_eq!(r.examples, 20);
    assert_eq!(r.valid_json, 18);
    assert_eq!(r.valid_json_rate, 18.0 / 20.0);
    assert_eq!(r.decision_accuracy, 15.0 / 20.0);
    assert_eq!(r.type_accuracy, 13.0 / 20.0);
    assert_eq!(r.pairs_exact_match, 15.0 / 20.0);
    assert_eq!(r.rationale_exact_match, 15.0 / 20.0);
    assert_eq!(r.full_exact_match, 8.0 / 20.0);
    assert_eq!(r.schema_inconsistent, 1);

    let h = &r.hallucinated_only;
    assert_eq!(h.examples, 11);
    assert_eq!(h.type_accuracy, 7.0 / 11.0);
    let tally: BTreeMap<&str, (usize, usize)> = h.per_type.iter().map(|(t, c)| (t.as_str(), (c.support, c.correct))).collect();
    let expected: BTreeMap<&str, (usize, usize)> = [
        ("factual_error", (3, 2)),
        ("fabrication", (3, 1)),
        ("unsupported", (1, 1)),
        ("incomplete", (1, 0)),
        ("irrelevant", (1, 1)),
        ("reasoning_error", (1, 1)),
        ("other", (1, 1)),
    ]
    .into();
    assert_eq!(tally, expected);
}

#[test]
fn mismatched_lengths_are_rejected() {
    let t = TargetJson::synthetic("a", Label::Correct, "x", vec![(0, 0)]);
    assert!(eval_structured(&[], &[t]).is_err());
}

#[test]
fn empty_evaluation_reports_zero_rates() {
    let r = eval_structured(&[], &[]).unwrap();
    assert_eq!(r.examples, 0);
    assert_eq!(r.valid_json_rate, 0.0);
    assert_eq!(r.hallucinated_only.type_accuracy, 0.0);
}

#[test]
fn first_json_extraction() {
    assert_eq!(parse_first_json("no braces here"), None);
    assert_eq!(parse_first_json("{\"a\": 1"), None);
    assert_eq!(parse_first_json("[1, 2]"), None);
    let obj = parse_first_json("noise {\"a\": \"}{\"} tail {\"b\": 2}").unwrap();
    assert_eq!(obj["a"], "}{");
    let obj = parse_first_json("{bad} {\"b\": {\"c\": 3}} {\"d\": 4}").unwrap();
    assert_eq!(obj["b"]["c"], 3);
    let obj = parse_first_json("{\"s\": \"quote \\\" and brace {\"}").unwrap();
    assert_eq!(obj["s"], "quote \" and brace {");
    assert!(parse_first_json("{}").unwrap().is_empty());
}

#[test]
fn consistency_rule() {
    let obj = |d: u8, t: &str| {
        let text = format!("{{\"decision\": {d}, \"hallucination_type\": \"{t}\", \"evidence\": {{\"pairs\": []}}, \"rationale\": \"r\"}}");
        ParsedFields::from_object(&parse_first_json(&text).unwrap())
    };
    assert!(!obj(1, "none").inconsistent());
    assert!(!obj(0, "fabrication").inconsistent());
    assert!(obj(1, "fabrication").inconsistent());
    assert!(obj(0, "none").inconsistent());
    assert!(obj(0, "other").schema_valid());
    assert!(!obj(0, "Other").schema_valid());
}

#[test]
fn prompt_matches_golden() {
    let messages = render_prompt("Who wrote \"Middlemarch\"?", "Charlotte Bronte", &[(7, 3), (0, 12), (31, 27)], 3).unwrap();
    assert_eq!(messages.len(), 2);
    assert_eq!(messages[0].role, "system");
    assert_eq!(messages[0].content, SYSTEM_PROMPT);
    assert_eq!(messages[1].role, "user");
    let golden = std::fs::read_to_string(fixture("prompt_user.txt")).unwrap();
    assert_eq!(messages[1].content, golden);
    assert_eq!(base_answer_of(&messages[1].content), Some("Charlotte Bronte"));
}

#[test]
fn prompt_rejects_bad_input() {
    assert!(render_prompt("  ", "a", &[(0, 0)], 1).is_err());
    assert!(render_prompt("q", "a", &[(0, 0)], 2).is_err());
    assert_eq!(format_pairs(&[]), "[]");
}

#[test]
fn synthetic_targets_follow_the_label() {
    let c = TargetJson::synthetic("ex-1", Label::Correct, "Rome", vec![(1, 2)]);
    assert_eq!((c.decision, c.hallucination_type), (1, HallucinationType::None));
    assert_eq!(c.rationale, rationale_for(1, "Rome"));
    let h = TargetJson::synthetic("ex-1", Label::Hallucinated, "Rome", vec![(1, 2)]);
    assert_eq!(h.decision, 0);
    assert_ne!(h.hallucination_type, HallucinationType::None);
    assert_eq!(h.hallucination_type, HallucinationType::for_example("ex-1"));
    assert!(h.rationale.contains("'Rome'"));
    h.validate().unwrap();
}

#[test]
fn canonical_target_text() {
    let t = TargetJson::synthetic("x", Label::Correct, "a", vec![(7, 3), (2, 5)]);
    assert_eq!(
        t.to_canonical(),
        "{\"decision\":1,\"hallucination_type\":\"none\",\"evidence\":{\"pairs\":[[7,3],[2,5]]},\
\"rationale\":\"Based on the provided hidden evidence, the base answer is likely correct.\"}"
    );
}

#[test]
fn inconsistent_targets_fail_validation() {
    let mut t = TargetJson::synthetic("x", Label::Correct, "a", vec![(0, 0)]);
    t.hallucination_type = HallucinationType::Fabrication;
    assert!(t.validate().is_err());
    assert!(TargetJson::from_json(&t.to_canonical()).is_err());
}

fn any_target() -> impl Strategy<Value = TargetJson> {
    (any::<bool>(), "[a-zA-Z0-9 '\"{}\\\\]{0,24}", "[a-z]{1,8}", prop::collection::vec((0u32..64, 0u32..64), 0..20)).prop_map(
        |(halluc, answer, id, pairs)| {
            let label = if halluc { Label::Hallucinated } else { Label::Correct };
            TargetJson::synthetic(&id, label, &answer, pairs)
        },
    )
}

proptest! {
    #[test]
    fn target_round_trips(t in any_target()) {
        let text = t.to_canonical();
        let back = TargetJson::from_json(&text).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.to_canonical(), text);
    }

    #[test]
    fn canonical_target_is_found_in_noise(t in any_target(), pre in "[a-z }]{0,16}", post in "[a-z {}]{0,16}") {
        let text = format!("{pre}{}{post}", t.to_canonical());
        let found = parse_first_json(&text);
        prop_assert!(found.is_some());
        let again = serde_json::Value::Object(found.unwrap()).to_string();
        prop_assert_eq!(TargetJson::from_json(&again).unwrap(), t);
    }

    #[test]
    fn extraction_is_idempotent(text in "[a-z{}\":, 0-9]{0,40}") {
        if let Some(obj) = parse_first_json(&text) {
            let s = serde_json::Value::Object(obj.clone()).to_string();
            prop_assert_eq!(parse_first_json(&s), Some(obj));
        }
    }

    #[test]
    fn valid_rate_counts_parsed_outputs(texts in prop::collection::vec("[a-z{}\":, 0-9]{0,30}", 1..30)) {
        let target = TargetJson::synthetic("x", Label::Correct, "a", vec![]);
        let preds: Vec<_> = texts.iter().map(|t| StructuredPrediction::from_raw(t.clone(), 0.0, 0.0)).collect();
        let targets = vec![target; preds.len()];
        let r = eval_structured(&preds, &targets).unwrap();
        let count = texts.iter().filter(|t| parse_first_json(t).is_some()).count();
        prop_assert_eq!(r.valid_json, count);
        prop_assert_eq!(r.valid_json_rate, count as f64 / texts.len() as f64);
    }
}
