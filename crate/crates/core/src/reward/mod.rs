//! Episode reward: entailment score of the claim given the summary, a
//! summary quality score and a KL penalty toward the reference policy.

mod classifier;

use std::sync::{Arc, Condvar, Mutex};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::claimgen::client::LlmClient;
use crate::claimgen::prompts;
use crate::encoding::tokenizer::tokenize;
use crate::error::{Error, Result};
use crate::labels::Label;
use crate::policy::SummarySample;

pub use classifier::{
    content_words, coverage, is_function_word, is_negation, separable_corpus, train_entailment_classifier,
    ClassifierConfig, ClassifierReport, EntailmentClassifier, NliPair,
};

pub const DEFAULT_ETA: f64 = 0.2;
pub const DEFAULT_TARGET_LEN: usize = 48;
pub const DEFAULT_CRITIC_CONCURRENCY: usize = 4;

/// Probabilities of the three labels, stored in [`Label::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntailmentDistribution {
    pub p_entailment: f64,
    pub p_neutral: f64,
    pub p_contradiction: f64,
}

impl EntailmentDistribution {
    pub fn uniform() -> Self {
        let third = 1.0 / 3.0;
        Self { p_entailment: third, p_neutral: third, p_contradiction: third }
    }

    /// Accepts probabilities in [0, 1] summing to 1 within 1e-6 and
    /// renormalizes them.
    pub fn from_array(p: [f64; 3]) -> Result<Self> {
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation(format!("probabilities out of range: {p:?}")));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!("probabilities sum to {sum}")));
        }
        let [e, n, c] = if sum == 1.0 { p } else { p.map(|v| v / sum) };
        Ok(Self { p_entailment: e, p_neutral: n, p_contradiction: c })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.p_entailment, self.p_neutral, self.p_contradiction]
    }

    pub fn get(&self, label: Label) -> f64 {
        self.as_array()[label.index()]
    }

    /// Most likely label; ties go to the earlier label.
    pub fn argmax(&self) -> Label {
        let p = self.as_array();
        let mut best = 0;
        for i in 1..3 {
            if p[i] > p[best] {
                best = i;
            }
        }
        Label::from_index(best).expect("three labels")
    }
}

pub fn entail_probs(classifier: &EntailmentClassifier, premise: &str, hypothesis: &str) -> EntailmentDistribution {
    classifier.probs(premise, hypothesis)
}

/// `P(gt) - 0.5 * (mass on the other two labels)`.
pub fn entailment_reward(dist: &EntailmentDistribution, gt: Label) -> f64 {
    let others: f64 = Label::ALL.iter().filter(|l| **l != gt).map(|l| dist.get(*l)).sum();
    dist.get(gt) - 0.5 * others
}

fn score_pattern() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"The quality score is\s+([+-]?(?:\d+(?:\.\d+)?|\.\d+))").expect("valid pattern"))
}

/// First `The quality score is <number>` in `response`, clamped to [0, 1].
pub fn parse_quality_score(response: &str) -> Result<f64> {
    let caps = score_pattern().captures(response).ok_or_else(|| Error::Parse {
        message: "no `The quality score is <number>` in critic response".into(),
        raw: response.to_string(),
    })?;
    let v: f64 = caps[1].parse().map_err(|_| Error::Parse { message: "bad score number".into(), raw: response.to_string() })?;
    Ok(v.clamp(0.0, 1.0))
}

/// Length heuristic: 1 up to `target` tokens, falling linearly to 0 at twice that.
pub fn builtin_quality(summary: &str, target: usize) -> f64 {
    let n = tokenize(summary).len() as f64;
    let l = target.max(1) as f64;
    (1.0 - ((n - l) / l).max(0.0)).clamp(0.0, 1.0)
}

/// Caps the number of concurrent critic calls.
#[derive(Debug)]
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Limiter {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().expect("limiter lock");
            while *free == 0 {
                free = self.cv.wait(free).expect("limiter lock");
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().expect("limiter lock") += 1;
        self.cv.notify_one();
        out
    }
}

#[derive(Debug, Clone)]
pub enum QualityCritic {
    Builtin { target_len: usize },
    External { client: LlmClient, limiter: Arc<LimiterHandle> },
}

/// Shared concurrency limit for an external critic.
#[derive(Debug)]
pub struct LimiterHandle(Limiter);

impl QualityCritic {
    pub fn builtin() -> Self {
        QualityCritic::Builtin { target_len: DEFAULT_TARGET_LEN }
    }

    pub fn external(client: LlmClient, max_in_flight: usize) -> Self {
        QualityCritic::External { client, limiter: Arc::new(LimiterHandle(Limiter::new(max_in_flight))) }
    }
}

pub fn quality_score(summary: &str, critic: &QualityCritic) -> Result<f64> {
    match critic {
        QualityCritic::Builtin { target_len } => Ok(builtin_quality(summary, *target_len)),
        QualityCritic::External { client, limiter } => {
            let response = limiter.0.run(|| client.complete(&prompts::quality_prompt(summary)))?;
            parse_quality_score(&response)
        }
    }
}

/// Single-sample estimate of KL(active ‖ reference) for the sampled sequence.
pub fn kl_estimate(sample: &SummarySample) -> f64 {
    debug_assert_eq!(sample.logprobs.len(), sample.ref_logprobs.len());
    sample.logprobs.iter().zip(&sample.ref_logprobs).map(|(a, r)| a - r).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_entail: f64,
    pub r_quality: f64,
    pub kl_estimate: f64,
    pub r_total: f64,
    pub eta: f64,
}

impl RewardBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.r_entail, self.r_quality, self.kl_estimate, self.r_total].iter().all(|v| v.is_finite())
    }
}

pub fn total_reward(r_entail: f64, r_quality: f64, kl: f64, eta: f64) -> RewardBreakdown {
    assert!(eta >= 0.0, "eta must be non-negative");
    RewardBreakdown { r_entail, r_quality, kl_estimate: kl, r_total: (r_quality + r_entail - eta * kl) / 2.0, eta }
}

/// Everything needed to score one episode.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub classifier: Arc<EntailmentClassifier>,
    pub critic: QualityCritic,
    pub eta: f64,
    /// When false the quality term is dropped from the total.
    pub use_quality: bool,
}

impl RewardModel {
    pub fn new(classifier: Arc<EntailmentClassifier>, critic: QualityCritic, eta: f64) -> Self {
        Self { classifier, critic, eta, use_quality: true }
    }

    /// Scores `sample` as evidence for `claim` with ground truth `gt`.
    pub fn score(&self, claim: &str, gt: Label, sample: &SummarySample) -> Result<RewardBreakdown> {
        let dist = entail_probs(&self.classifier, &sample.text, claim);
        let r_entail = entailment_reward(&dist, gt);
        let r_quality = if self.use_quality { quality_score(&sample.text, &self.critic)? } else { 0.0 };
        let out = total_reward(r_entail, r_quality, kl_estimate(sample), self.eta);
        if !out.is_finite() {
            return Err(Error::Validation(format!("non-finite reward {out:?}")));
        }
        Ok(out)
    }
}
