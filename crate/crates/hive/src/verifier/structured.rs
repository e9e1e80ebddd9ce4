//! First-JSON extraction and field-level evaluation of verifier outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::target::{HallucinationType, TargetJson};
use crate::error::{bail, Result};

/// First substring of `text` that is balanced in braces (ignoring braces
/// inside JSON strings) and parses as a JSON object.
pub fn parse_first_json(text: &str) -> Option<Map<String, Value>> {
    let bytes = text.as_bytes();
    for (start, _) in text.match_indices('{') {
        let mut depth = 0usize;
        let mut in_string = false;
        let mut escaped = false;
        for (offset, &b) in bytes[start..].iter().enumerate() {
            if in_string {
                match b {
                    _ if escaped => escaped = false,
                    b'\\' => escaped = true,
                    b'"' => in_string = false,
                    _ => {}
                }
                continue;
            }
            match b {
                b'"' => in_string = true,
                b'{' => depth += 1,
                b'}' => {
                    depth -= 1;
                    if depth == 0 {
                        if let Ok(Value::Object(map)) = serde_json::from_str(&text[start..=start + offset]) {
                            return Some(map);
                        }
                        break;
                    }
                }
                _ => {}
            }
        }
    }
    None
}

/// Typed view of a parsed object; fields that are missing or ill-typed are
/// `None`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedFields {
    pub decision: Option<u8>,
    pub hallucination_type: Option<HallucinationType>,
    pub pairs: Option<Vec<(u32, u32)>>,
    pub rationale: Option<String>,
}

fn as_u32(v: &Value) -> Option<u32> {
    v.as_u64().and_then(|x| u32::try_from(x).ok())
}

impl ParsedFields {
    pub fn from_object(obj: &Map<String, Value>) -> Self {
        let pairs = obj.get("evidence").and_then(|e| e.get("pairs")).and_then(Value::as_array).and_then(|items| {
            items
                .iter()
                .map(|p| match p.as_array().map(Vec::as_slice) {
                    Some([t, l]) => Some((as_u32(t)?, as_u32(l)?)),
                    _ => None,
                })
                .collect()
        });
        Self {
            decision: obj.get("decision").and_then(Value::as_u64).filter(|&d| d <= 1).map(|d| d as u8),
            hallucination_type: obj.get("hallucination_type").and_then(Value::as_str).and_then(HallucinationType::parse),
            pairs,
            rationale: obj.get("rationale").and_then(Value::as_str).map(str::to_string),
        }
    }

    /// Every field present and well-typed.
    pub fn schema_valid(&self) -> bool {
        self.decision.is_some() && self.hallucination_type.is_some() && self.pairs.is_some() && self.rationale.is_some()
    }

    /// Decision and type both present but violating `decision = 1 ⇔ none`.
    pub fn inconsistent(&self) -> bool {
        match (self.decision, self.hallucination_type) {
            (Some(d), Some(t)) => (d == 1) != (t == HallucinationType::None),
            _ => false,
        }
    }
}

/// Raw verifier output with its decision logits.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredPrediction {
    pub raw_text: String,
    pub parsed: Option<Map<String, Value>>,
    pub valid_json: bool,
    pub z0: f64,
    pub z1: f64,
}

impl StructuredPrediction {
    pub fn from_raw(raw_text: String, z0: f64, z1: f64) -> Self {
        let parsed = parse_first_json(&raw_text);
        Self { valid_json: parsed.is_some(), raw_text, parsed, z0, z1 }
    }

    pub fn fields(&self) -> ParsedFields {
        self.parsed.as_ref().map(ParsedFields::from_object).unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeTally {
    pub support: usize,
    pub correct: usize,
}

/// Type accuracy restricted to examples whose target is hallucinated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HallucinatedBreakdown {
    pub examples: usize,
    pub type_accuracy: f64,
    pub per_type: BTreeMap<HallucinationType, TypeTally>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredReport {
    pub examples: usize,
    pub valid_json: usize,
    pub valid_json_rate: f64,
    pub decision_accuracy: f64,
    /// Over all examples; invalid outputs count as wrong.
    pub type_accuracy: f64,
    pub pairs_exact_match: f64,
    pub rationale_exact_match: f64,
    pub full_exact_match: f64,
    /// Valid outputs whose decision and type violate the consistency rule.
    pub schema_inconsistent: usize,
    pub hallucinated_only: HallucinatedBreakdown,
}

fn rate(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64
    }
}

/// Field-level comparison of predictions with their targets, position by
/// position.
pub fn eval_structured(preds: &[StructuredPrediction], targets: &[TargetJson]) -> Result<StructuredReport> {
    if preds.len() != targets.len() {
        bail!(Input, "{} predictions for {} targets", preds.len(), targets.len());
    }
    let n = targets.len();
    let (mut valid, mut dec, mut typ, mut pairs, mut rat, mut full, mut flagged) = (0, 0, 0, 0, 0, 0, 0);
    let mut halluc = 0;
    let mut halluc_typ = 0;
    let mut per_type: BTreeMap<HallucinationType, TypeTally> = BTreeMap::new();
    for (p, t) in preds.iter().zip(targets) {
        let f = p.fields();
        valid += usize::from(p.valid_json);
        flagged += usize::from(f.inconsistent());
        let d_ok = f.decision == Some(t.decision);
        let t_ok = f.hallucination_type == Some(t.hallucination_type);
        let p_ok = f.pairs.as_ref() == Some(&t.evidence.pairs);
        let r_ok = f.rationale.as_deref() == Some(t.rationale.as_str());
        dec += usize::from(d_ok);
        typ += usize::from(t_ok);
        pairs += usize::from(p_ok);
        rat += usize::from(r_ok);
        full += usize::from(d_ok && t_ok && p_ok && r_ok);
        if t.decision == 0 {
            halluc += 1;
            halluc_typ += usize::from(t_ok);
            let tally = per_type.entry(t.hallucination_type).or_default();
            tally.support += 1;
            tally.correct += usize::from(t_ok);
        }
    }
    Ok(StructuredReport {
        examples: n,
        valid_json: valid,
        valid_json_rate: rate(valid, n),
        decision_accuracy: rate(dec, n),
        type_accuracy: rate(typ, n),
        pairs_exact_match: rate(pairs, n),
        rationale_exact_match: rate(rat, n),
        full_exact_match: rate(full, n),
        schema_inconsistent: flagged,
        hallucinated_only: HallucinatedBreakdown { examples: halluc, type_accuracy: rate(halluc_typ, halluc), per_type },
    })
}
