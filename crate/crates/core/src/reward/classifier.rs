//! Small premise/hypothesis classifier used as the frozen entailment model.
//!
//! Each side is an averaged bag of learned word vectors (`u` for the
//! premise, `v` for the hypothesis). The classifier head sees
//! `[u, v, |u - v|, u * v]` plus four lexical features: hypothesis content
//! coverage by the premise, negation mismatch, their product and whether the
//! hypothesis is negated. A tanh hidden layer feeds three logits.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoding::tokenizer::{tokenize, UNK};
use crate::encoding::Vocabulary;
use crate::error::{Error, Result};
use crate::labels::Label;
use crate::nn::{xavier, Linear, Optimizer, OptimizerKind};
use crate::policy::checkpoint::{self, CheckpointManifest};
use crate::rng::{seeded, Rng};
use crate::tensor::{GradAccumulator, Graph, Matrix, ParamId, ParamStore, Var};

use super::EntailmentDistribution;

const FUNCTION_WORDS: &[&str] = &[
    "a", "an", "the", "of", "in", "on", "at", "to", "for", "by", "with", "and", "or", "is", "was", "are", "were", "be",
    "it", "its", "that", "this", ".", ",", ";", ":", "!", "?", "\"", "'", "</s>",
];
const NEGATIONS: &[&str] = &["not", "never", "no", "nobody", "nothing", "neither", "nor", "cannot", "n't"];
const LEXICAL_FEATURES: usize = 4;

pub fn is_function_word(token: &str) -> bool {
    FUNCTION_WORDS.contains(&token)
}

pub fn is_negation(token: &str) -> bool {
    NEGATIONS.contains(&token)
}

/// Content words of `tokens`: everything except function words and negations.
pub fn content_words(tokens: &[String]) -> Vec<&str> {
    tokens.iter().map(String::as_str).filter(|t| !is_function_word(t) && !is_negation(t)).collect()
}

/// Fraction of hypothesis content words that occur in the premise; 1 when
/// the hypothesis has no content words.
pub fn coverage(premise: &[String], hypothesis: &[String]) -> f64 {
    let words: HashSet<&str> = premise.iter().map(String::as_str).collect();
    let content = content_words(hypothesis);
    if content.is_empty() {
        return 1.0;
    }
    content.iter().filter(|w| words.contains(*w)).count() as f64 / content.len() as f64
}

fn lexical_features(premise: &[String], hypothesis: &[String]) -> [f64; LEXICAL_FEATURES] {
    let cov = coverage(premise, hypothesis);
    let neg_p = premise.iter().any(|t| is_negation(t));
    let neg_h = hypothesis.iter().any(|t| is_negation(t));
    let mismatch = if neg_p != neg_h { 1.0 } else { 0.0 };
    [cov, mismatch, cov * mismatch, if neg_h { 1.0 } else { 0.0 }]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliPair {
    pub premise: String,
    pub hypothesis: String,
    pub label: Label,
}

impl NliPair {
    pub fn new(premise: impl Into<String>, hypothesis: impl Into<String>, label: Label) -> Self {
        Self { premise: premise.into(), hypothesis: hypothesis.into(), label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Share of the corpus held out for the accuracy report.
    pub holdout_fraction: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { embed_dim: 8, hidden: 16, epochs: 6, batch_size: 32, learning_rate: 0.01, holdout_fraction: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub train_size: usize,
    pub holdout_size: usize,
    pub holdout_accuracy: f64,
    pub final_train_loss: f64,
}

#[derive(Debug, Clone)]
pub struct EntailmentClassifier {
    vocab: Vocabulary,
    store: ParamStore,
    embedding: ParamId,
    hidden: Linear,
    output: Linear,
}

const EMBEDDING: &str = "classifier.embedding";
const HIDDEN: &str = "classifier.hidden";
const OUTPUT: &str = "classifier.output";

impl EntailmentClassifier {
    /// Randomly initialized classifier over `vocab`.
    pub fn init(vocab: Vocabulary, config: &ClassifierConfig, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let e = config.embed_dim;
        let embedding = store.insert(EMBEDDING, Matrix::uniform(vocab.len(), e, 0.5, rng));
        let width = 4 * e + LEXICAL_FEATURES;
        let hidden = Linear::init(&mut store, HIDDEN, width, config.hidden, xavier(width, config.hidden), true, rng);
        let output = Linear::init(&mut store, OUTPUT, config.hidden, 3, xavier(config.hidden, 3), true, rng);
        Self { vocab, store, embedding, hidden, output }
    }

    /// Zeroes the output layer, so every input maps to the uniform distribution.
    pub fn zero_output(&mut self) {
        for id in [Some(self.output.weight), self.output.bias].into_iter().flatten() {
            let m = self.store.get_mut(id);
            let (r, c) = m.shape();
            *m = Matrix::zeros(r, c);
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn ids(&self, tokens: &[String]) -> Vec<usize> {
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id(t).unwrap_or(UNK) as usize).collect();
        if ids.is_empty() {
            vec![UNK as usize]
        } else {
            ids
        }
    }

    fn logits(&self, g: &mut Graph, store: &ParamStore, premise: &str, hypothesis: &str) -> Var {
        let p = tokenize(premise);
        let h = tokenize(hypothesis);
        let table = g.param(store, self.embedding);
        let pe = g.gather(table, &self.ids(&p));
        let u = g.mean_rows(pe);
        let he = g.gather(table, &self.ids(&h));
        let v = g.mean_rows(he);
        let diff = g.sub(u, v);
        let adiff = g.abs(diff);
        let prod = g.mul(u, v);
        let lex = g.input(Matrix::from_vec(1, LEXICAL_FEATURES, lexical_features(&p, &h).to_vec()));
        let x = g.concat_cols(&[u, v, adiff, prod, lex]);
        let hid = self.hidden.forward(g, store, x);
        let act = g.tanh(hid);
        self.output.forward(g, store, act)
    }

    /// Label distribution for one pair. Pure; never touches the parameters.
    pub fn probs(&self, premise: &str, hypothesis: &str) -> EntailmentDistribution {
        let mut g = Graph::new();
        let logits = self.logits(&mut g, &self.store, premise, hypothesis);
        let p = g.value(logits).softmax_rows();
        EntailmentDistribution::from_array([p.get(0, 0), p.get(0, 1), p.get(0, 2)])
            .expect("softmax output is a distribution")
    }

    pub fn predict(&self, premise: &str, hypothesis: &str) -> Label {
        self.probs(premise, hypothesis).argmax()
    }

    fn batch_gradients(&self, batch: &[&NliPair]) -> (GradAccumulator, f64) {
        use rayon::prelude::*;
        let parts: Vec<_> = batch
            .par_iter()
            .map(|pair| {
                let mut g = Graph::new();
                let logits = self.logits(&mut g, &self.store, &pair.premise, &pair.hypothesis);
                let lp = g.log_softmax_rows(logits);
                let picked = g.pick_per_row(lp, &[pair.label.index()]);
                let loss = g.scale(picked, -1.0);
                (g.backward(loss), g.scalar(loss))
            })
            .collect();
        let mut acc = GradAccumulator::new();
        let mut total = 0.0;
        for (grads, loss) in parts {
            acc.add(grads);
            total += loss;
        }
        let n = batch.len() as f64;
        acc.scale(1.0 / n);
        (acc, total / n)
    }

    pub fn accuracy(&self, pairs: &[NliPair]) -> f64 {
        if pairs.is_empty() {
            return 0.0;
        }
        let hits = pairs.iter().filter(|p| self.predict(&p.premise, &p.hypothesis) == p.label).count();
        hits as f64 / pairs.len() as f64
    }

    /// Writes parameters and vocabulary into `dir`.
    pub fn save(&self, dir: &Path, seed: u64) -> Result<()> {
        checkpoint::save(dir, &self.store, &CheckpointManifest::new("classifier", 0, seed, ""))?;
        self.vocab.save(&dir.join("vocab.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (store, _) = checkpoint::load(dir)?;
        let vocab = Vocabulary::load(&dir.join("vocab.json"))?;
        for name in [EMBEDDING, &format!("{HIDDEN}.weight"), &format!("{OUTPUT}.weight")] {
            if store.id(name).is_none() {
                return Err(Error::Field {
                    path: dir.join("index.json"),
                    field: name.to_string(),
                    message: "classifier tensor missing".into(),
                });
            }
        }
        let embedding = store.expect_id(EMBEDDING);
        if store.get(embedding).rows() != vocab.len() {
            return Err(Error::Config("classifier embedding rows do not match its vocabulary".into()));
        }
        let hidden = Linear::from_store(&store, HIDDEN);
        let output = Linear::from_store(&store, OUTPUT);
        Ok(Self { vocab, store, embedding, hidden, output })
    }
}

/// Trains a classifier with cross-entropy and reports accuracy on a seeded
/// held-out split.
pub fn train_entailment_classifier(
    pairs: &[NliPair],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<(EntailmentClassifier, ClassifierReport)> {
    if pairs.is_empty() {
        return Err(Error::Validation("entailment corpus is empty".into()));
    }
    let present: HashSet<Label> = pairs.iter().map(|p| p.label).collect();
    if present.len() < 3 {
        return Err(Error::Validation(format!(
            "entailment corpus must contain all three labels, found {}",
            present.len()
        )));
    }
    if config.batch_size == 0 || config.embed_dim == 0 || config.hidden == 0 {
        return Err(Error::Config("classifier sizes must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
    }
    let mut rng = seeded(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    let holdout_size = ((pairs.len() as f64) * config.holdout_fraction).floor() as usize;
    let (held, train) = order.split_at(holdout_size);
    let train: Vec<&NliPair> = train.iter().map(|&i| &pairs[i]).collect();
    let held: Vec<NliPair> = held.iter().map(|&i| pairs[i].clone()).collect();

    let vocab = Vocabulary::build(train.iter().flat_map(|p| [p.premise.as_str(), p.hypothesis.as_str()]));
    let mut clf = EntailmentClassifier::init(vocab, config, &mut rng);
    let mut opt = Optimizer::new(OptimizerKind::default(), config.learning_rate);
    let mut train_order = train.clone();
    let mut last = f64::NAN;
    let mut step = 0u64;
    for _ in 0..config.epochs {
        train_order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0;
        for batch in train_order.chunks(config.batch_size) {
            let (grads, loss) = clf.batch_gradients(batch);
            step += 1;
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::Divergence { step, diagnostics: format!("classifier loss {loss}") });
            }
            opt.apply(&mut clf.store, &grads, |_| true);
            epoch_loss += loss;
            batches += 1;
        }
        last = epoch_loss / batches as f64;
        log::debug!("classifier epoch loss {last:.4}");
    }
    let holdout_accuracy = clf.accuracy(&held);
    let report = ClassifierReport { train_size: train.len(), holdout_size, holdout_accuracy, final_train_loss: last };
    Ok((clf, report))
}

/// Separable NLI corpus: the hypothesis copied into the premise is an
/// entailment, its negated form is a contradiction and an unrelated
/// statement is neutral. Labels cycle so the three classes are balanced.
pub fn separable_corpus(n: usize, seed: u64) -> Vec<NliPair> {
    use rand::Rng as _;
    const SUBJECTS: &[&str] = &[
        "the mayor", "the council", "a senator", "the company", "the union", "the court", "police", "the team",
        "the school", "a farmer", "the bank", "researchers", "the museum", "the airline", "voters", "the army",
    ];
    const VERBS: &[&str] =
        &["approved", "rejected", "announced", "signed", "opened", "closed", "funded", "sold", "built", "won"];
    const OBJECTS: &[&str] = &[
        "the budget", "a new bridge", "the contract", "a hospital", "the election", "a factory", "the treaty",
        "a vaccine", "the merger", "a stadium", "the law", "a pipeline", "the report", "a library",
    ];
    let mut rng = seeded(seed);
    let pick = |rng: &mut Rng| {
        (
            SUBJECTS[rng.gen_range(0..SUBJECTS.len())],
            VERBS[rng.gen_range(0..VERBS.len())],
            OBJECTS[rng.gen_range(0..OBJECTS.len())],
        )
    };
    (0..n)
        .map(|i| {
            let (s, v, o) = pick(&mut rng);
            let (fs, fv, fo) = pick(&mut rng);
            let fact = format!("{s} {v} {o} .");
            let filler = format!("{fs} {fv} {fo} .");
            let premise = if rng.gen_bool(0.5) { format!("{fact} {filler}") } else { format!("{filler} {fact}") };
            match Label::ALL[i % 3] {
                Label::Entailment => NliPair::new(premise, format!("{s} {v} {o}"), Label::Entailment),
                Label::Contradiction => NliPair::new(premise, format!("{s} never {v} {o}"), Label::Contradiction),
                Label::Neutral => {
                    // a fact about a subject the premise never mentions
                    let mut other = pick(&mut rng);
                    while premise.contains(other.0) {
                        other = pick(&mut rng);
                    }
                    NliPair::new(premise, format!("{} {} {}", other.0, other.1, other.2), Label::Neutral)
                }
            }
        })
        .collect()
}
