//! Chat prompt shown to the verifier.

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

pub const SYSTEM_PROMPT: &str =
    "You are a verifier model. Given a question and a base model answer, decide whether the answer is wrong/hallucinated. \
Hidden evidence from the base model's denoising trajectory has already been injected before this conversation as ACT-prefix embeddings. \
Decision semantics: 0 = wrong/hallucinated, 1 = correct/non-hallucinated. \
You MUST output a single JSON object that follows the given schema, with no other text before or after it.";

const SCHEMA_BLOCK: &str = r#"{
  "decision": 0 or 1,
  "hallucination_type": one of ["none","factual_error","fabrication","unsupported","incomplete","irrelevant","reasoning_error","other"],
  "evidence": {
    "pairs": the provided (step, layer) pairs
  },
  "rationale": a single short sentence
}"#;

pub(crate) const BASE_ANSWER_HEADER: &str = "[Base Answer]\n";
pub(crate) const EVIDENCE_HEADER: &str = "\n\n[Evidence]\n";

/// `[[2, 27], [3, 27]]`
pub fn format_pairs(pairs: &[(u32, u32)]) -> String {
    let items: Vec<String> = pairs.iter().map(|(t, l)| format!("[{t}, {l}]")).collect();
    format!("[{}]", items.join(", "))
}

/// System and user messages for one example. The user message lists the
/// pairs in the order given.
pub fn render_prompt(question: &str, base_answer: &str, pairs: &[(u32, u32)], k: usize) -> Result<Vec<Message>> {
    if question.trim().is_empty() {
        bail!(Input, "question is empty");
    }
    if pairs.len() != k {
        bail!(Input, "{} evidence pairs supplied for K = {k}", pairs.len());
    }
    let user = format!(
        "[Task]\nJudge whether the Base Answer is wrong/hallucinated with respect to the Question.\n\n\
[Question]\n{question}\n\n\
{BASE_ANSWER_HEADER}{base_answer}{EVIDENCE_HEADER}\
You received K={k} ACT token-groups as hidden evidence. The (step, layer) pairs of these ACT token-groups are:\n{}\n\n\
[Output JSON Schema]\n{SCHEMA_BLOCK}\nReturn only the JSON.",
        format_pairs(pairs)
    );
    Ok(vec![Message { role: "system".into(), content: SYSTEM_PROMPT.into() }, Message { role: "user".into(), content: user }])
}

/// Base answer embedded in a rendered user message.
pub fn base_answer_of(user: &str) -> Option<&str> {
    let start = user.find(BASE_ANSWER_HEADER)? + BASE_ANSWER_HEADER.len();
    let len = user[start..].find(EVIDENCE_HEADER)?;
    Some(&user[start..start + len])
}
