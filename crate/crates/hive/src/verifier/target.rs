//! Structured verifier output: decision, hallucination type, evidence pairs
//! and a one-sentence rationale.

use std::fmt;

use hive_core::rng::fnv1a64;
use hive_core::Label;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HallucinationType {
    None,
    FactualError,
    Fabrication,
    Unsupported,
    Incomplete,
    Irrelevant,
    ReasoningError,
    Other,
}

impl HallucinationType {
    pub const ALL: [HallucinationType; 8] = [
        Self::None,
        Self::FactualError,
        Self::Fabrication,
        Self::Unsupported,
        Self::Incomplete,
        Self::Irrelevant,
        Self::ReasoningError,
        Self::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::FactualError => "factual_error",
            Self::Fabrication => "fabrication",
            Self::Unsupported => "unsupported",
            Self::Incomplete => "incomplete",
            Self::Irrelevant => "irrelevant",
            Self::ReasoningError => "reasoning_error",
            Self::Other => "other",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Synthetic error type of a hallucinated example: its id hashed into the
    /// seven non-`none` categories.
    pub fn for_example(example_id: &str) -> Self {
        Self::ALL[1 + (fnv1a64(example_id.as_bytes()) % 7) as usize]
    }
}

impl fmt::Display for HallucinationType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidencePairs {
    pub pairs: Vec<(u32, u32)>,
}

/// Canonical form: keys in schema order, no insignificant whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetJson {
    /// 0 = wrong/hallucinated, 1 = correct/non-hallucinated.
    pub decision: u8,
    pub hallucination_type: HallucinationType,
    pub evidence: EvidencePairs,
    pub rationale: String,
}

pub fn rationale_for(decision: u8, base_answer: &str) -> String {
    if decision == 0 {
        format!("Based on the provided hidden evidence, the base answer is likely hallucinated; the suspected erroneous span is: '{base_answer}'.")
    } else {
        "Based on the provided hidden evidence, the base answer is likely correct.".to_string()
    }
}

impl TargetJson {
    /// Synthetic target of an example with a known label.
    pub fn synthetic(example_id: &str, label: Label, base_answer: &str, pairs: Vec<(u32, u32)>) -> Self {
        let decision = label.as_u8();
        Self {
            decision,
            hallucination_type: if label.is_hallucinated() { HallucinationType::for_example(example_id) } else { HallucinationType::None },
            evidence: EvidencePairs { pairs },
            rationale: rationale_for(decision, base_answer),
        }
    }

    /// Decision in {0, 1} and `decision = 1 ⇔ type = none`.
    pub fn validate(&self) -> Result<()> {
        if self.decision > 1 {
            bail!(Input, "decision must be 0 or 1, got {}", self.decision);
        }
        if (self.decision == 1) != (self.hallucination_type == HallucinationType::None) {
            bail!(Input, "decision {} is inconsistent with hallucination_type {}", self.decision, self.hallucination_type);
        }
        Ok(())
    }

    pub fn to_canonical(&self) -> String {
        serde_json::to_string(self).expect("serializable target")
    }

    /// Parses and validates a target.
    pub fn from_json(text: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(text).map_err(|e| crate::error::Error::Input(format!("target JSON: {e}")))?;
        t.validate()?;
        Ok(t)
    }
}
