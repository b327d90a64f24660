//! Glue from a corpus to training data, and the seeded synthetic RL run.

use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::claimgen::corpus::Corpus;
use crate::claimgen::{synth_world, world_nli_pairs, IMAGE_FEATURE_DIM};
use crate::encoding::Vocabulary;
use crate::error::{Error, Result};
use crate::labels::Label;
use crate::model::{Evidence, ModelConfig, ModelInput, MspModel};
use crate::nn::OptimizerKind;
use crate::ppo::{
    train_schedule, PpoConfig, RlItem, ScheduleConfig, SftConfig, SftItem, Stage, TrainContext, TrainData, TrainState,
};
use crate::reward::{
    train_entailment_classifier, ClassifierConfig, ClassifierReport, NliPair, QualityCritic, RewardModel,
};
use crate::rng::seeded;
use crate::tensor::ParamStore;

/// Vocabulary over documents, summaries and claims.
pub fn corpus_vocab(corpus: &Corpus) -> Vocabulary {
    let docs = corpus.clusters.iter().flat_map(|c| c.documents.iter().chain(std::iter::once(&c.summary)));
    Vocabulary::build(docs.chain(corpus.claims.iter().map(|c| &c.claim)).map(String::as_str))
}

/// Summary tokens cut after every `.`; each piece is one sentence.
pub fn summary_segments(vocab: &Vocabulary, summary: &str) -> Vec<Vec<u32>> {
    let mut out = vec![];
    let mut cur = vec![];
    for id in vocab.encode(summary).ids() {
        cur.push(*id);
        if vocab.token(*id) == Some(".") {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// One supervised and one RL item per claim, sharing the same evidence.
pub fn training_items(
    model: &Arc<MspModel>,
    corpus: &Corpus,
    vocab: &Vocabulary,
) -> Result<(Vec<SftItem<ModelInput>>, Vec<RlItem<ModelInput>>)> {
    let mut sft = Vec::with_capacity(corpus.claims.len());
    let mut rl = Vec::with_capacity(corpus.claims.len());
    for c in &corpus.claims {
        let cluster = corpus
            .cluster(&c.cluster_id)
            .ok_or_else(|| Error::Validation(format!("claim {} references missing cluster {}", c.id, c.cluster_id)))?;
        let input = ModelInput::new(model.clone(), Evidence::new(vocab, &c.claim, cluster, model.config.chunk_size)?);
        sft.push(SftItem { input: input.clone(), segments: summary_segments(vocab, &cluster.summary) });
        rl.push(RlItem { claim_id: c.id.clone(), claim: c.claim.clone(), label: c.label, input });
    }
    Ok((sft, rl))
}

/// Classifier pairs for a corpus without known facts: the claim against its
/// own cluster summary keeps its label, against another cluster's summary
/// it is neutral.
pub fn corpus_nli_pairs(corpus: &Corpus, n: usize, seed: u64) -> Result<Vec<NliPair>> {
    if corpus.claims.is_empty() {
        return Err(Error::Validation("corpus has no claims".into()));
    }
    let mut rng = seeded(seed);
    (0..n)
        .map(|_| {
            let c = &corpus.claims[rng.gen_range(0..corpus.claims.len())];
            let own = corpus
                .cluster(&c.cluster_id)
                .ok_or_else(|| Error::Validation(format!("claim {} references missing cluster", c.id)))?;
            let other = corpus.clusters.len() > 1 && rng.gen_bool(0.5);
            Ok(if other {
                let mut k = rng.gen_range(0..corpus.clusters.len() - 1);
                if corpus.clusters[k].id == own.id {
                    k = corpus.clusters.len() - 1;
                }
                NliPair::new(corpus.clusters[k].summary.clone(), c.claim.clone(), Label::Neutral)
            } else {
                NliPair::new(own.summary.clone(), c.claim.clone(), c.label)
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthRunConfig {
    pub clusters: usize,
    pub classifier_pairs: usize,
    pub classifier: ClassifierConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    /// Episodes averaged at each end of the RL run.
    pub window: usize,
}

impl SynthRunConfig {
    /// Small CPU-sized run: eight clusters, 16-wide single-layer model, 600
    /// supervised steps, then 100 perceiver-only and 300 end-to-end PPO steps
    /// of 64 episodes.
    pub fn desk() -> Self {
        let mut ppo = PpoConfig::new(0.003, 64);
        ppo.entropy_coef = 0.01;
        Self {
            clusters: 8,
            classifier_pairs: 6000,
            classifier: ClassifierConfig { epochs: 10, ..Default::default() },
            model: ModelConfig {
                dim: 16,
                ffn_hidden: 32,
                latents: 8,
                chunk_size: 64,
                encoder_layers: 1,
                decoder_layers: 1,
                max_len: 4,
                fusion_init_scale: 0.3,
                ..Default::default()
            },
            schedule: ScheduleConfig {
                stages: vec![Stage::Sft, Stage::RlPerceiverOnly, Stage::RlEndToEnd],
                sft: SftConfig {
                    steps: 600,
                    batch_size: 16,
                    learning_rate: 0.03,
                    optimizer: OptimizerKind::Sgd { momentum: 0.9 },
                    shuffle_segments: true,
                },
                ppo,
                rl_perceiver_steps: 100,
                rl_end_to_end_steps: 300,
            },
            window: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthRunOutcome {
    pub classifier: ClassifierReport,
    pub first_mean: f64,
    pub last_mean: f64,
    pub state: TrainState,
    pub store: ParamStore,
    pub reference: Option<ParamStore>,
    pub wall_time_secs: f64,
}

impl SynthRunOutcome {
    pub fn gain(&self) -> f64 {
        self.last_mean - self.first_mean
    }
}

/// Generates the seeded world, trains the entailment classifier on it and
/// runs the staged schedule. Reports the mean entailment reward of the
/// first and last `window` RL episodes.
pub fn synth_rl_run(seed: u64, cfg: &SynthRunConfig) -> Result<SynthRunOutcome> {
    let started = Instant::now();
    let world = synth_world(seed, cfg.clusters);
    let pairs = world_nli_pairs(&world, cfg.classifier_pairs, seed ^ 0xc1a5);
    let (classifier, report) = train_entailment_classifier(&pairs, &cfg.classifier, seed)?;
    log::info!("classifier held-out accuracy {:.3}", report.holdout_accuracy);
    let corpus = Corpus { clusters: world.clusters, claims: world.claims };
    let vocab = corpus_vocab(&corpus);
    let mut store = ParamStore::new();
    let model = Arc::new(MspModel::init(&mut store, cfg.model.clone(), vocab.len(), IMAGE_FEATURE_DIM, &mut seeded(seed))?);
    let (sft, rl) = training_items(&model, &corpus, &vocab)?;
    let scorer = RewardModel::new(Arc::new(classifier), QualityCritic::builtin(), cfg.schedule.ppo.eta);
    let mut reference = None;
    let state = {
        let mut ctx = TrainContext {
            policy: &model.policy,
            store: &mut store,
            reference: &mut reference,
            scorer: &scorer,
            out_dir: None,
            config_hash: "",
        };
        let data = TrainData { sft: &sft, rl: &rl, vocab: Some(&vocab) };
        train_schedule(TrainState::new(seed), &cfg.schedule, &data, &mut ctx)?
    };
    let eps = &state.episodes;
    let w = cfg.window.min(eps.len());
    let mean = |xs: &[crate::ppo::EpisodeRecord]| xs.iter().map(|e| e.r_entail).sum::<f64>() / xs.len().max(1) as f64;
    Ok(SynthRunOutcome {
        classifier: report,
        first_mean: mean(&eps[..w]),
        last_mean: mean(&eps[eps.len() - w..]),
        state,
        store,
        reference,
        wall_time_secs: started.elapsed().as_secs_f64(),
    })
}
