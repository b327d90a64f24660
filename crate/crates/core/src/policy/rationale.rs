use crate::encoding::tokenizer::SEP;
use crate::encoding::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::labels::Label;

/// Input for explanation generation:
/// `claim </s> label </s> summary_1 </s> ... </s> summary_k`.
///
/// `label` may use either the entailment or the truthfulness vocabulary; it
/// is always written as the entailment word.
pub fn assemble_rationale_input(vocab: &Vocabulary, claim: &str, label: &str, summaries: &[String]) -> Result<TokenSequence> {
    if claim.trim().is_empty() {
        return Err(Error::Validation("claim is empty".into()));
    }
    let label: Label = label.parse()?;
    let mut ids = vocab.encode(claim).into_ids();
    ids.push(SEP);
    ids.push(vocab.id(label.as_str()).expect("vocabularies always contain the label words"));
    for s in summaries {
        ids.push(SEP);
        ids.extend(vocab.encode(s).into_ids());
    }
    Ok(TokenSequence::new(ids))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["c s t"])
    }

    #[test]
    fn joins_segments_with_the_separator() {
        let v = vocab();
        let ids = assemble_rationale_input(&v, "C", "entailment", &["S".into()]).unwrap();
        assert_eq!(v.decode(ids.ids()), "c </s> entailment </s> s");
        assert_eq!(ids, v.encode("C </s> entailment </s> S"));
    }

    #[test]
    fn no_summaries_leaves_claim_and_label() {
        let v = vocab();
        let ids = assemble_rationale_input(&v, "C", "Supported", &[]).unwrap();
        assert_eq!(v.decode(ids.ids()), "c </s> entailment");
    }

    #[test]
    fn rejects_unknown_label_and_empty_claim() {
        let v = vocab();
        assert!(matches!(assemble_rationale_input(&v, "C", "plausible", &[]), Err(Error::Validation(_))));
        assert!(matches!(assemble_rationale_input(&v, "  ", "neutral", &[]), Err(Error::Validation(_))));
    }
}
