//! The work behind each CLI subcommand. Every command reads a validated
//! [`RunConfig`] and writes its artifacts under one output directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::claimgen::corpus::{load_clusters, load_corpus, save_corpus, Corpus, CorpusManifest};
use crate::claimgen::{build_claims, script_for_world, synth_world, world_nli_pairs, LlmClient, IMAGE_FEATURE_DIM};
use crate::encoding::Vocabulary;
use crate::error::{Error, Result};
use crate::labels::Label;
use crate::model::{ModelConfig, ModelInput, MspModel};
use crate::policy::checkpoint;
use crate::policy::{generate, SummarySample};
use crate::ppo::{
    train_schedule, EpisodeScorer, RlItem, ScheduleConfig, Stage, TrainContext, TrainData, TrainState,
};
use crate::reward::{train_entailment_classifier, EntailmentClassifier, RewardBreakdown, RewardModel};
use crate::rng::{seeded, stream};
use crate::tensor::ParamStore;

use super::config::{DatasetMode, RunConfig};
use super::metrics::{overlap_report, verify_claims, OverlapReport, SummaryRecord, UnavailableBertScore, VerificationReport, REPORT_FORMAT_VERSION};
use super::pipeline::{corpus_nli_pairs, corpus_vocab, training_items};
use super::report::{find_manifests, merge_manifests, write_series, RewardSeries};
use crate::ppo::RunManifest;

pub const MODEL_FILE: &str = "model.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const CLASSIFIER_DIR: &str = "classifier";
pub const SUMMARIES_FILE: &str = "summaries.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    image_features: usize,
    model: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummariesFile {
    pub format_version: u32,
    pub summaries: Vec<SummaryRecord>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::Validation(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Builds the corpus (synthetic world or clusters from disk) and writes it
/// to `out`.
pub fn dataset_gen(cfg: &RunConfig, seed: u64, out: &Path) -> Result<CorpusManifest> {
    let plugin = cfg.checkworthiness_plugin()?;
    let (clusters, client, mode) = match cfg.dataset.mode {
        DatasetMode::Synth => {
            let world = synth_world(seed, cfg.dataset.clusters);
            let client = if cfg.plugins.llm_endpoint.is_some() || cfg.dataset.script.is_some() {
                cfg.llm_client()?
            } else {
                LlmClient::scripted(script_for_world(&world))
            };
            (world.clusters, client, "synth")
        }
        DatasetMode::Llm => {
            let dir = cfg.dataset.clusters_dir.as_ref().expect("validated");
            (load_clusters(dir)?, cfg.llm_client()?, "llm")
        }
    };
    if clusters.is_empty() {
        return Err(Error::Validation("no document clusters to generate claims for".into()));
    }
    let claims = build_claims(&clusters, &client, &plugin, cfg.dataset.verify_labels, cfg.dataset.drop_inconsistent)?;
    let corpus = Corpus { clusters, claims };
    let manifest = save_corpus(out, &corpus, seed, mode)?;
    log::info!("wrote {} claims over {} clusters to {}", manifest.claims, manifest.clusters, out.display());
    Ok(manifest)
}

fn corpus_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.dataset
        .corpus
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs dataset.corpus (a dataset-gen output directory)".into()))
}

/// SFT never scores episodes.
struct NoScorer;

impl EpisodeScorer for NoScorer {
    fn score(&self, _claim: &str, _gt: Label, _sample: &SummarySample) -> Result<RewardBreakdown> {
        Err(Error::Precondition("no reward model in a supervised-only run".into()))
    }
}

fn vocab_for(out: &Path, corpus: &Corpus) -> Result<Vocabulary> {
    let path = out.join(VOCAB_FILE);
    if path.is_file() {
        return Vocabulary::load(&path);
    }
    let vocab = corpus_vocab(corpus);
    std::fs::create_dir_all(out)?;
    vocab.save(&path)?;
    Ok(vocab)
}

fn save_model_file(out: &Path, model: &ModelConfig) -> Result<()> {
    write_json(
        &out.join(MODEL_FILE),
        &ModelFile { format_version: REPORT_FORMAT_VERSION, image_features: IMAGE_FEATURE_DIM, model: model.clone() },
    )
}

fn load_model_file(out: &Path) -> Result<ModelFile> {
    let f: ModelFile = read_json(&out.join(MODEL_FILE))?;
    if f.format_version != REPORT_FORMAT_VERSION {
        return Err(Error::Migration { path: out.join(MODEL_FILE), found: f.format_version, expected: REPORT_FORMAT_VERSION });
    }
    Ok(f)
}

fn run_stages(
    cfg: &RunConfig,
    schedule: &ScheduleConfig,
    seed: u64,
    out: &Path,
    scorer: &dyn EpisodeScorer,
) -> Result<TrainState> {
    let (corpus, _) = load_corpus(corpus_dir(cfg)?)?;
    let vocab = vocab_for(out, &corpus)?;
    let (mut store, model, mut reference, mut state) = if schedule.stages.contains(&Stage::Sft) {
        let mut store = ParamStore::new();
        let model = MspModel::init(&mut store, cfg.model.clone(), vocab.len(), IMAGE_FEATURE_DIM, &mut seeded(seed))?;
        (store, model, None, TrainState::new(seed))
    } else {
        let dir = out.join("sft").join("checkpoint");
        let (store, manifest) = checkpoint::load(&dir)
            .map_err(|e| Error::Validation(format!("RL stages need the supervised checkpoint at {}: {e}", dir.display())))?;
        let model = MspModel::from_store(&store, load_model_file(out)?.model)?;
        let mut state = TrainState::new(seed);
        state.step = manifest.step;
        state.stage = Some(Stage::Sft);
        let reference = Some(store.clone());
        (store, model, reference, state)
    };
    save_model_file(out, &model.config)?;
    let model = Arc::new(model);
    let (sft, rl) = training_items(&model, &corpus, &vocab)?;
    let hash = cfg.hash();
    let mut ctx = TrainContext {
        policy: &model.policy,
        store: &mut store,
        reference: &mut reference,
        scorer,
        out_dir: Some(out),
        config_hash: &hash,
    };
    state = train_schedule(state, schedule, &TrainData { sft: &sft, rl: &rl, vocab: Some(&vocab) }, &mut ctx)?;
    Ok(state)
}

/// Supervised warm-up only; writes `out/sft/`.
pub fn sft(cfg: &RunConfig, seed: u64, out: &Path) -> Result<TrainState> {
    let schedule = ScheduleConfig { stages: vec![Stage::Sft], ..cfg.schedule.clone() };
    run_stages(cfg, &schedule, seed, out, &NoScorer)
}

/// The trained entailment classifier under `out`, trained and saved first
/// when missing.
pub fn classifier_for(cfg: &RunConfig, seed: u64, out: &Path) -> Result<EntailmentClassifier> {
    let dir = out.join(CLASSIFIER_DIR);
    if dir.is_dir() {
        return EntailmentClassifier::load(&dir);
    }
    let (corpus, manifest) = load_corpus(corpus_dir(cfg)?)?;
    let n = cfg.dataset.classifier_pairs;
    let pairs = if manifest.mode == "synth" {
        world_nli_pairs(&synth_world(manifest.seed, manifest.clusters), n, seed ^ 0xc1a5)
    } else {
        corpus_nli_pairs(&corpus, n, seed ^ 0xc1a5)?
    };
    let (clf, report) = train_entailment_classifier(&pairs, &cfg.classifier, seed)?;
    log::info!("entailment classifier held-out accuracy {:.3}", report.holdout_accuracy);
    clf.save(&dir, seed)?;
    write_json(&dir.join("report.json"), &report)?;
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlSummary {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub episodes: usize,
    pub window: usize,
    pub first_window_r_entail: f64,
    pub last_window_r_entail: f64,
}

/// The configured stages; without an SFT stage the supervised checkpoint
/// from a previous `sft` run in `out` is the starting point and reference.
pub fn rl_train(cfg: &RunConfig, seed: u64, out: &Path) -> Result<RlSummary> {
    let clf = classifier_for(cfg, seed, out)?;
    let mut scorer = RewardModel::new(Arc::new(clf), cfg.quality_critic()?, cfg.schedule.ppo.eta);
    scorer.use_quality = cfg.reward.use_quality;
    let state = run_stages(cfg, &cfg.schedule, seed, out, &scorer)?;
    let eps = &state.episodes;
    let w = cfg.evaluation.window.min(eps.len());
    let mean = |xs: &[crate::ppo::EpisodeRecord]| xs.iter().map(|e| e.r_entail).sum::<f64>() / xs.len().max(1) as f64;
    let summary = RlSummary {
        format_version: REPORT_FORMAT_VERSION,
        seed,
        config_hash: cfg.hash(),
        episodes: eps.len(),
        window: w,
        first_window_r_entail: mean(&eps[..w]),
        last_window_r_entail: mean(&eps[eps.len() - w..]),
    };
    write_json(&out.join("rl_summary.json"), &summary)?;
    Ok(summary)
}

/// Checkpoint of the latest stage present under `out`.
pub fn latest_checkpoint(out: &Path) -> Result<PathBuf> {
    [Stage::RlEndToEnd, Stage::RlPerceiverOnly, Stage::Sft]
        .iter()
        .map(|s| out.join(s.as_str().to_lowercase()).join("checkpoint"))
        .find(|p| p.is_dir())
        .ok_or_else(|| Error::Validation(format!("no trained checkpoint under {}", out.display())))
}

/// Greedy summaries for every claim (or one) with the latest checkpoint.
pub fn summarize(cfg: &RunConfig, seed: u64, out: &Path, claim_id: Option<&str>) -> Result<Vec<SummaryRecord>> {
    let (mut corpus, _) = load_corpus(corpus_dir(cfg)?)?;
    if let Some(id) = claim_id {
        corpus.claims.retain(|c| c.id == id);
        if corpus.claims.is_empty() {
            return Err(Error::Validation(format!("no claim with id {id}")));
        }
    }
    let vocab = Vocabulary::load(&out.join(VOCAB_FILE))?;
    let (store, _) = checkpoint::load(&latest_checkpoint(out)?)?;
    let model = Arc::new(MspModel::from_store(&store, load_model_file(out)?.model)?);
    let (_, items) = training_items(&model, &corpus, &vocab)?;
    use rayon::prelude::*;
    let summaries = items
        .par_iter()
        .enumerate()
        .map(|(i, it): (usize, &RlItem<ModelInput>)| {
            let s = generate(&it.input, &model.policy, &store, &store, Some(&vocab), 0.0, &mut stream(seed, i as u64))?;
            Ok(SummaryRecord { claim_id: it.claim_id.clone(), summary: s.text })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(
        &out.join(SUMMARIES_FILE),
        &SummariesFile { format_version: REPORT_FORMAT_VERSION, summaries: summaries.clone() },
    )?;
    Ok(summaries)
}

/// Verification and overlap reports. Summaries come from `summarize` when
/// present, otherwise each claim's reference summary is evaluated.
pub fn evaluate(cfg: &RunConfig, seed: u64, out: &Path) -> Result<(VerificationReport, OverlapReport)> {
    let (corpus, _) = load_corpus(corpus_dir(cfg)?)?;
    let path = out.join(SUMMARIES_FILE);
    let summaries: Vec<SummaryRecord> = if path.is_file() {
        let f: SummariesFile = read_json(&path)?;
        f.summaries
    } else {
        log::info!("no {} in {}; evaluating reference summaries", SUMMARIES_FILE, out.display());
        corpus
            .claims
            .iter()
            .map(|c| {
                let cluster = corpus.cluster(&c.cluster_id).expect("loaded corpora are consistent");
                SummaryRecord { claim_id: c.id.clone(), summary: cluster.summary.clone() }
            })
            .collect()
    };
    let claims: Vec<_> = summaries
        .iter()
        .map(|s| {
            corpus
                .claims
                .iter()
                .find(|c| c.id == s.claim_id)
                .cloned()
                .ok_or_else(|| Error::Validation(format!("summary for unknown claim {}", s.claim_id)))
        })
        .collect::<Result<_>>()?;
    let clf = classifier_for(cfg, seed, out)?;
    let verification = verify_claims(&summaries, &claims, &clf, cfg.evaluation.averaging)?;
    let pairs: Vec<(String, String)> = summaries
        .iter()
        .zip(&claims)
        .map(|(s, c)| (s.summary.clone(), corpus.cluster(&c.cluster_id).expect("checked").summary.clone()))
        .collect();
    let overlap = overlap_report(&pairs, &UnavailableBertScore)?;
    write_json(&out.join("verification_report.json"), &verification)?;
    write_json(&out.join("overlap_report.json"), &overlap)?;
    Ok((verification, overlap))
}

/// Merges run manifests (the given files, or every stage directory under
/// `out`) into `out/report/`.
pub fn report(cfg: &RunConfig, out: &Path, manifests: &[PathBuf]) -> Result<RewardSeries> {
    let loaded = if manifests.is_empty() {
        find_manifests(out)?
    } else {
        manifests.iter().map(|p| RunManifest::load(p)).collect::<Result<Vec<_>>>()?
    };
    let series = merge_manifests(&loaded, cfg.evaluation.window)?;
    write_series(&out.join("report"), &series)?;
    Ok(series)
}
