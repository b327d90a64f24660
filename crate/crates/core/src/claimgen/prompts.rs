//! Prompt templates. Slots are written `<summary>`, `<documents>` and
//! `<claim>`.

use sha2::{Digest, Sha256};

use crate::labels::Label;

pub const ENTAILMENT: &str = include_str!("../../assets/prompts/entailment.txt");
pub const NEUTRAL: &str = include_str!("../../assets/prompts/neutral.txt");
pub const CONTRADICTION: &str = include_str!("../../assets/prompts/contradiction.txt");
pub const DOUBLE_CHECK: &str = include_str!("../../assets/prompts/double_check.txt");
pub const QUALITY: &str = include_str!("../../assets/prompts/quality.txt");

pub fn claim_template(label: Label) -> &'static str {
    match label {
        Label::Entailment => ENTAILMENT,
        Label::Neutral => NEUTRAL,
        Label::Contradiction => CONTRADICTION,
    }
}

pub fn claim_prompt(label: Label, summary: &str) -> String {
    claim_template(label).replace("<summary>", summary)
}

pub fn double_check_prompt(documents: &[String], claim: &str) -> String {
    DOUBLE_CHECK.replace("<documents>", &documents.join("\n\n")).replace("<claim>", claim)
}

pub fn quality_prompt(summary: &str) -> String {
    QUALITY.replace("<summary>", summary)
}

/// Hex digests of every template, in a fixed order, for run manifests.
pub fn template_hashes() -> Vec<(&'static str, String)> {
    [
        ("entailment", ENTAILMENT),
        ("neutral", NEUTRAL),
        ("contradiction", CONTRADICTION),
        ("double_check", DOUBLE_CHECK),
        ("quality", QUALITY),
    ]
    .into_iter()
    .map(|(n, t)| (n, hex::encode(Sha256::digest(t.as_bytes()))))
    .collect()
}
