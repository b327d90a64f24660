//! Claim-verification metrics and n-gram overlap scores.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::claimgen::ClaimRecord;
use crate::encoding::tokenizer::tokenize;
use crate::error::{Error, Result};
use crate::labels::Label;
use crate::reward::EntailmentClassifier;

pub const REPORT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: Label,
    /// Truthfulness name of the label (Supported, NEI, Refuted).
    pub truth_name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub format_version: u32,
    pub items: usize,
    pub accuracy: f64,
    pub per_label: Vec<LabelMetrics>,
    pub macro_f: f64,
    pub micro_f: f64,
    pub averaging: Averaging,
    /// `macro_f` or `micro_f`, per `averaging`.
    pub f_score: f64,
    /// Rows are gold labels, columns predictions, both in entailment,
    /// neutral, contradiction order.
    pub confusion: [[usize; 3]; 3],
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

impl VerificationReport {
    pub fn from_confusion(confusion: [[usize; 3]; 3], averaging: Averaging) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..3).map(|i| confusion[i][i]).sum();
        let per_label: Vec<LabelMetrics> = Label::ALL
            .iter()
            .map(|&l| {
                let i = l.index();
                let support: usize = confusion[i].iter().sum();
                let predicted: usize = (0..3).map(|g| confusion[g][i]).sum();
                let precision = ratio(confusion[i][i], predicted);
                let recall = ratio(confusion[i][i], support);
                LabelMetrics {
                    label: l,
                    truth_name: l.truth_name().to_string(),
                    precision,
                    recall,
                    f1: f1(precision, recall),
                    support,
                }
            })
            .collect();
        let macro_f = per_label.iter().map(|m| m.f1).sum::<f64>() / 3.0;
        // single-label multiclass: pooled precision and recall both equal accuracy
        let accuracy = ratio(correct, total);
        let micro_f = accuracy;
        Self {
            format_version: REPORT_FORMAT_VERSION,
            items: total,
            accuracy,
            per_label,
            macro_f,
            micro_f,
            averaging,
            f_score: if averaging == Averaging::Macro { macro_f } else { micro_f },
            confusion,
        }
    }

    pub fn from_predictions(gold: &[Label], predicted: &[Label], averaging: Averaging) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::Validation(format!("{} gold labels but {} predictions", gold.len(), predicted.len())));
        }
        let mut confusion = [[0usize; 3]; 3];
        for (g, p) in gold.iter().zip(predicted) {
            confusion[g.index()][p.index()] += 1;
        }
        Ok(Self::from_confusion(confusion, averaging))
    }

    pub fn label(&self, label: Label) -> &LabelMetrics {
        &self.per_label[label.index()]
    }
}

/// A generated summary for one claim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub claim_id: String,
    pub summary: String,
}

/// Predicts each claim's label from its summary and scores the predictions
/// against the claims' labels.
pub fn verify_claims(
    summaries: &[SummaryRecord],
    claims: &[ClaimRecord],
    classifier: &EntailmentClassifier,
    averaging: Averaging,
) -> Result<VerificationReport> {
    if summaries.len() != claims.len() {
        return Err(Error::Validation(format!("{} summaries for {} claims", summaries.len(), claims.len())));
    }
    if let Some((s, c)) = summaries.iter().zip(claims).find(|(s, c)| s.claim_id != c.id) {
        return Err(Error::Validation(format!("summary for {} is aligned with claim {}", s.claim_id, c.id)));
    }
    let predicted: Vec<Label> =
        summaries.par_iter().zip(claims.par_iter()).map(|(s, c)| classifier.predict(&s.summary, &c.claim)).collect();
    let gold: Vec<Label> = claims.iter().map(|c| c.label).collect();
    VerificationReport::from_predictions(&gold, &predicted, averaging)
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

fn clipped_overlap(cand: &HashMap<&[String], usize>, refs: &HashMap<&[String], usize>) -> usize {
    cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrfScore {
    const ZERO: Self = Self { precision: 0.0, recall: 0.0, f1: 0.0 };

    fn new(precision: f64, recall: f64) -> Self {
        Self { precision, recall, f1: f1(precision, recall) }
    }
}

fn empty_reference(reference: &[String]) -> bool {
    if reference.is_empty() {
        log::warn!("empty reference; overlap score defined as 0");
        return true;
    }
    false
}

pub fn rouge_n_scores(candidate: &str, reference: &str, n: usize) -> Result<PrfScore> {
    if n == 0 {
        return Err(Error::Precondition("ROUGE-N needs n >= 1".into()));
    }
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if empty_reference(&r) {
        return Ok(PrfScore::ZERO);
    }
    let (cg, rg) = (ngrams(&c, n), ngrams(&r, n));
    let overlap = clipped_overlap(&cg, &rg);
    let total = |m: &HashMap<&[String], usize>| m.values().sum::<usize>();
    Ok(PrfScore::new(ratio(overlap, total(&cg)), ratio(overlap, total(&rg))))
}

/// ROUGE-N F1.
pub fn rouge_n(candidate: &str, reference: &str, n: usize) -> Result<f64> {
    Ok(rouge_n_scores(candidate, reference, n)?.f1)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

pub fn rouge_l_scores(candidate: &str, reference: &str) -> PrfScore {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    if empty_reference(&r) {
        return PrfScore::ZERO;
    }
    let l = lcs(&c, &r);
    PrfScore::new(ratio(l, c.len()), ratio(l, r.len()))
}

/// LCS-based ROUGE-L F1.
pub fn rouge_l(candidate: &str, reference: &str) -> f64 {
    rouge_l_scores(candidate, reference).f1
}

/// Sentence BLEU: geometric mean of clipped n-gram precisions for
/// `n = 1..=min(max_n, candidate length)`, times the brevity penalty against
/// the closest reference length.
pub fn bleu(candidate: &str, references: &[&str], max_n: usize) -> Result<f64> {
    if max_n == 0 {
        return Err(Error::Precondition("BLEU needs max_n >= 1".into()));
    }
    let c = tokenize(candidate);
    let refs: Vec<Vec<String>> = references.iter().map(|r| tokenize(r)).filter(|r| !r.is_empty()).collect();
    if refs.is_empty() {
        log::warn!("no non-empty reference; BLEU defined as 0");
        return Ok(0.0);
    }
    if c.is_empty() {
        return Ok(0.0);
    }
    let order = max_n.min(c.len());
    let mut log_sum = 0.0;
    for n in 1..=order {
        let cg = ngrams(&c, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in &refs {
            for (g, k) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(k);
            }
        }
        let p = ratio(clipped_overlap(&cg, &max_ref), c.len() + 1 - n);
        if p == 0.0 {
            return Ok(0.0);
        }
        log_sum += p.ln();
    }
    let closest = refs
        .iter()
        .map(Vec::len)
        .min_by_key(|&l| ((l as i64 - c.len() as i64).abs(), l))
        .expect("non-empty");
    let bp = if c.len() >= closest { 1.0 } else { (1.0 - closest as f64 / c.len() as f64).exp() };
    Ok(bp * (log_sum / order as f64).exp())
}

/// Embedding-similarity score slot; no model is bundled.
pub trait BertScorer: Sync {
    /// `None` means the scorer is unavailable.
    fn score(&self, candidate: &str, reference: &str) -> Option<f64>;
}

pub struct UnavailableBertScore;

impl BertScorer for UnavailableBertScore {
    fn score(&self, _candidate: &str, _reference: &str) -> Option<f64> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub format_version: u32,
    pub items: usize,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
    pub bleu: f64,
    /// `None` when no scorer is plugged in.
    pub bertscore: Option<f64>,
}

/// Mean overlap scores over `(candidate, reference)` pairs.
pub fn overlap_report(pairs: &[(String, String)], bert: &dyn BertScorer) -> Result<OverlapReport> {
    let rows: Vec<[f64; 4]> = pairs
        .par_iter()
        .map(|(c, r)| Ok([rouge_n(c, r, 1)?, rouge_n(c, r, 2)?, rouge_l(c, r), bleu(c, &[r.as_str()], 4)?]))
        .collect::<Result<_>>()?;
    let mean = |k: usize| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len().max(1) as f64;
    let bert: Option<Vec<f64>> = pairs.iter().map(|(c, r)| bert.score(c, r)).collect();
    Ok(OverlapReport {
        format_version: REPORT_FORMAT_VERSION,
        items: pairs.len(),
        rouge_1: mean(0),
        rouge_2: mean(1),
        rouge_l: mean(2),
        bleu: mean(3),
        bertscore: bert.filter(|b| !b.is_empty()).map(|b| b.iter().sum::<f64>() / b.len() as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::{Contradiction as C, Entailment as E, Neutral as N};

    #[test]
    fn perfect_and_degenerate_predictors() {
        let gold = [E, N, C, E, N, C];
        let r = VerificationReport::from_predictions(&gold, &gold, Averaging::Macro).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!(r.per_label.iter().all(|m| m.precision == 1.0 && m.recall == 1.0));
        let r = VerificationReport::from_predictions(&gold, &[E; 6], Averaging::Macro).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.label(E).recall, 1.0);
        assert!((r.label(E).precision - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.label(N).precision, 0.0);
    }

    #[test]
    fn hand_built_confusion_case() {
        // gold E E N N C C, predicted E N N C C E
        let gold = [E, E, N, N, C, C];
        let pred = [E, N, N, C, C, E];
        let r = VerificationReport::from_predictions(&gold, &pred, Averaging::Macro).unwrap();
        assert_eq!(r.confusion, [[1, 1, 0], [0, 1, 1], [1, 0, 1]]);
        assert_eq!(r.accuracy, 0.5);
        for m in &r.per_label {
            assert_eq!((m.precision, m.recall, m.f1, m.support), (0.5, 0.5, 0.5, 2));
        }
        assert_eq!(r.macro_f, 0.5);
        let micro = VerificationReport::from_predictions(&gold, &pred, Averaging::Micro).unwrap();
        assert_eq!(micro.f_score, 0.5);
    }

    #[test]
    fn macro_f_recomputes_from_stored_matrix() {
        let gold = [E, E, E, N, C, C, N, E];
        let pred = [E, N, E, N, E, C, C, E];
        let r = VerificationReport::from_predictions(&gold, &pred, Averaging::Macro).unwrap();
        let back: VerificationReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        let again = VerificationReport::from_confusion(back.confusion, Averaging::Macro);
        assert_eq!(again, r);
        for (i, m) in r.per_label.iter().enumerate() {
            assert_eq!(r.confusion[i].iter().sum::<usize>(), m.support);
        }
    }

    #[test]
    fn rouge_unigram_example() {
        let s = rouge_n_scores("the cat", "the cat sat", 1).unwrap();
        assert_eq!(s.precision, 1.0);
        assert!((s.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn identical_disjoint_and_empty() {
        let x = "the quick brown fox jumps";
        assert_eq!(rouge_n(x, x, 1).unwrap(), 1.0);
        assert_eq!(rouge_n(x, x, 2).unwrap(), 1.0);
        assert_eq!(rouge_l(x, x), 1.0);
        assert_eq!(bleu(x, &[x], 4).unwrap(), 1.0);
        assert_eq!(bleu("the cat", &["the cat"], 4).unwrap(), 1.0);
        assert_eq!(rouge_n("a b c", "d e f", 1).unwrap(), 0.0);
        assert_eq!(rouge_l("a b c", "d e f"), 0.0);
        assert_eq!(bleu("a b c", &["d e f"], 4).unwrap(), 0.0);
        assert_eq!(rouge_n("a b", "", 1).unwrap(), 0.0);
        assert_eq!(bleu("a b", &[""], 4).unwrap(), 0.0);
        assert!(rouge_n("a", "a", 0).is_err());
    }

    #[test]
    fn rouge_l_and_bleu_by_hand() {
        // LCS("a b c d", "a c b d") = 3
        assert!((rouge_l("a b c d", "a c b d") - 0.75).abs() < 1e-15);
        // unigrams 3/3, bigrams 1/2, brevity exp(1 - 4/3)
        let b = bleu("a b d", &["a b c d"], 2).unwrap();
        let expect = (1.0f64 - 4.0 / 3.0).exp() * (0.5f64).sqrt();
        assert!((b - expect).abs() < 1e-15);
        // clipping: "the the the" against "the cat" keeps one match
        let p = rouge_n_scores("the the the", "the cat", 1).unwrap();
        assert!((p.precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn bertscore_is_unavailable_by_default() {
        let r = overlap_report(&[("a b".into(), "a b".into())], &UnavailableBertScore).unwrap();
        assert_eq!(r.bertscore, None);
        assert_eq!((r.rouge_1, r.rouge_l, r.bleu), (1.0, 1.0, 1.0));
    }

    proptest! {
        #[test]
        fn removing_shared_tokens_never_raises_scores(
            cand in proptest::collection::vec(0u8..8, 1..10),
            reference in proptest::collection::vec(0u8..8, 2..10),
        ) {
            let text = |v: &[u8]| v.iter().map(|t| format!("w{t}")).collect::<Vec<_>>().join(" ");
            let (c, r) = (text(&cand), text(&reference));
            let stripped: Vec<u8> = cand.iter().copied().filter(|t| !reference.contains(t)).collect();
            let s = text(&stripped);
            for score in [
                |a: &str, b: &str| rouge_n(a, b, 1).unwrap(),
                |a: &str, b: &str| rouge_n(a, b, 2).unwrap(),
                |a: &str, b: &str| rouge_l(a, b),
                |a: &str, b: &str| bleu(a, &[b], 4).unwrap(),
            ] {
                let full = score(&c, &r);
                prop_assert!((0.0..=1.0).contains(&full));
                prop_assert!(score(&s, &r) <= full);
                prop_assert!((score(&r, &r) - 1.0).abs() < 1e-12);
            }
        }
    }
}
