//! PPO fine-tuning of the summarizer and the staged training schedule:
//! supervised warm-up, RL on the encoders and fusion only, then RL on
//! everything.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::tokenizer::EOS;
use crate::encoding::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::labels::Label;
use crate::model::is_perceiver_side;
use crate::nn::{Optimizer, OptimizerKind};
use crate::policy::checkpoint::{self, CheckpointManifest};
use crate::policy::{generate, sft_step, PolicyInput, SummaryPolicy, SummarySample, VALUE_PREFIX};
use crate::reward::{RewardBreakdown, RewardModel};
use crate::rng::stream;
use crate::tensor::{GradAccumulator, Graph, Matrix, ParamStore};

pub const RUN_MANIFEST_FORMAT_VERSION: u32 = 1;
/// Largest share of failed episodes a rollout batch tolerates.
pub const MAX_FAILED_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "RL_PERCEIVER_ONLY")]
    RlPerceiverOnly,
    #[serde(rename = "RL_END_TO_END")]
    RlEndToEnd,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Sft => "SFT",
            Stage::RlPerceiverOnly => "RL_PERCEIVER_ONLY",
            Stage::RlEndToEnd => "RL_END_TO_END",
        }
    }

    /// Whether the parameter called `name` moves in this stage.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Stage::Sft => !name.starts_with(VALUE_PREFIX),
            Stage::RlPerceiverOnly => is_perceiver_side(name) || name.starts_with(VALUE_PREFIX),
            Stage::RlEndToEnd => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    #[serde(default = "d_clip")]
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    #[serde(default = "d_eta")]
    pub eta: f64,
    pub rollout_batch: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_value_coef")]
    pub value_coef: f64,
    #[serde(default)]
    pub entropy_coef: f64,
    #[serde(default = "d_one")]
    pub gamma: f64,
    #[serde(default = "d_lambda")]
    pub lambda: f64,
    #[serde(default = "d_true")]
    pub normalize_advantages: bool,
    /// Sampling temperature during rollouts.
    #[serde(default = "d_one")]
    pub temperature: f64,
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimizerKind,
}

fn d_clip() -> f64 {
    0.2
}
fn d_eta() -> f64 {
    crate::reward::DEFAULT_ETA
}
fn d_epochs() -> usize {
    4
}
fn d_value_coef() -> f64 {
    0.5
}
fn d_one() -> f64 {
    1.0
}
fn d_lambda() -> f64 {
    0.95
}
fn d_true() -> bool {
    true
}

impl PpoConfig {
    pub fn new(learning_rate: f64, rollout_batch: usize) -> Self {
        Self {
            clip_epsilon: d_clip(),
            learning_rate,
            eta: d_eta(),
            rollout_batch,
            epochs: d_epochs(),
            value_coef: d_value_coef(),
            entropy_coef: 0.0,
            gamma: 1.0,
            lambda: d_lambda(),
            normalize_advantages: true,
            temperature: 1.0,
            max_grad_norm: None,
            optimizer: OptimizerKind::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("ppo learning_rate must be positive".into()));
        }
        if !(self.clip_epsilon > 0.0) {
            return Err(Error::Config("clip_epsilon must be positive".into()));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::Config("eta must be non-negative".into()));
        }
        if self.rollout_batch == 0 || self.epochs == 0 {
            return Err(Error::Config("rollout_batch and epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config("gamma and lambda must lie in [0, 1]".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(Error::Config("temperature must be non-negative".into()));
        }
        Ok(())
    }
}

/// Scores a sampled summary for a claim.
pub trait EpisodeScorer: Sync {
    fn score(&self, claim: &str, gt: Label, sample: &SummarySample) -> Result<RewardBreakdown>;
}

impl EpisodeScorer for RewardModel {
    fn score(&self, claim: &str, gt: Label, sample: &SummarySample) -> Result<RewardBreakdown> {
        RewardModel::score(self, claim, gt, sample)
    }
}

/// A claim with its evidence, as used for rollouts.
#[derive(Debug, Clone)]
pub struct RlItem<I> {
    pub claim_id: String,
    pub claim: String,
    pub label: Label,
    pub input: I,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// Global episode index; the sampling stream is `(seed, index)`.
    pub index: u64,
    /// Position of the claim in the rollout item list.
    pub item: usize,
    pub claim_id: String,
    pub sample: SummarySample,
    pub reward: RewardBreakdown,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub episodes: Vec<Episode>,
    pub failed: usize,
}

/// Per-token log-probabilities and value estimates of `tokens`.
pub fn evaluate_tokens(
    policy: &SummaryPolicy,
    store: &ParamStore,
    input: &dyn PolicyInput,
    tokens: &[u32],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let fused = input.build(&mut g, store)?;
    let memory = policy.encode(&mut g, store, fused)?;
    let (picked, hidden) = policy.token_log_probs(&mut g, store, memory, tokens);
    let values = policy.values(&mut g, store, hidden);
    Ok((g.value(picked).data().to_vec(), g.value(values).data().to_vec()))
}

/// Samples and scores `n` episodes. Episode `first_index + i` draws its
/// claim and its tokens from stream `(seed, first_index + i)`, so results do
/// not depend on the worker count. Episodes whose scoring fails are dropped
/// and counted; more than 20% failures abort the batch.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts<I: PolicyInput>(
    policy: &SummaryPolicy,
    store: &ParamStore,
    reference: &ParamStore,
    items: &[RlItem<I>],
    scorer: &dyn EpisodeScorer,
    vocab: Option<&Vocabulary>,
    n: usize,
    seed: u64,
    first_index: u64,
    temperature: f64,
) -> Result<RolloutBatch> {
    if n == 0 || items.is_empty() {
        return Err(Error::Precondition("rollouts need n >= 1 and a non-empty item list".into()));
    }
    let results: Vec<Result<Episode>> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let index = first_index + i;
            let mut rng = stream(seed, index);
            let item = rng.gen_range(0..items.len());
            let it = &items[item];
            let sample = generate(&it.input, policy, store, reference, vocab, temperature, &mut rng)?;
            let (_, values) = evaluate_tokens(policy, store, &it.input, &sample.tokens)?;
            let reward = scorer.score(&it.claim, it.label, &sample)?;
            if !reward.is_finite() {
                return Err(Error::Validation(format!("non-finite reward for {}", it.claim_id)));
            }
            Ok(Episode {
                index,
                item,
                claim_id: it.claim_id.clone(),
                sample,
                reward,
                values,
                advantages: vec![],
                returns: vec![],
            })
        })
        .collect();
    let mut episodes = Vec::with_capacity(n);
    let mut failed = 0;
    for r in results {
        match r {
            Ok(e) => episodes.push(e),
            Err(e) => {
                log::warn!("episode failed: {e}");
                failed += 1;
            }
        }
    }
    if failed as f64 > MAX_FAILED_FRACTION * n as f64 {
        return Err(Error::Aborted(format!("{failed} of {n} episodes failed")));
    }
    Ok(RolloutBatch { episodes, failed })
}

/// Per-token rewards: each token carries `-(eta/2) * (logp - ref_logp)` and
/// the last token additionally carries the rest of `r_total`, so the
/// rewards sum to `r_total`.
pub fn shaped_rewards(episode: &Episode) -> Vec<f64> {
    let eta = episode.reward.eta;
    let s = &episode.sample;
    let mut r: Vec<f64> = s.logprobs.iter().zip(&s.ref_logprobs).map(|(a, b)| -0.5 * eta * (a - b)).collect();
    if let Some(last) = r.len().checked_sub(1) {
        let kl_part: f64 = r.iter().sum();
        r[last] += episode.reward.r_total - kl_part;
    }
    r
}

/// Generalized advantage estimation with a zero value after the last token.
/// Returns `(advantages, returns)`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(rewards.len(), values.len(), "rewards and values must align");
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        next_adv = delta + gamma * lambda * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

pub fn compute_advantages(episode: &mut Episode, config: &PpoConfig) {
    let (adv, ret) = gae(&shaped_rewards(episode), &episode.values, config.gamma, config.lambda);
    episode.advantages = adv;
    episode.returns = ret;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Weighted total of all loss terms.
    pub loss: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_norm: f64,
}

/// Loss of one episode; `policy`, `value` and `entropy` are unweighted.
pub struct EpisodeLoss {
    pub loss: f64,
    pub grads: crate::tensor::Gradients,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clipped: usize,
}

/// Clipped surrogate, value and entropy terms of one episode, each averaged
/// over its tokens, scaled by `weight`, with parameter gradients.
pub fn episode_loss<I: PolicyInput>(
    policy: &SummaryPolicy,
    store: &ParamStore,
    input: &I,
    ep: &Episode,
    advantages: &[f64],
    config: &PpoConfig,
    weight: f64,
) -> Result<EpisodeLoss> {
    let t = ep.sample.tokens.len();
    let col = |v: &[f64]| Matrix::from_vec(v.len(), 1, v.to_vec());
    let mut g = Graph::new();
    let fused = input.build(&mut g, store)?;
    let memory = policy.encode(&mut g, store, fused)?;
    let (lp, hidden) = policy.teacher_forced(&mut g, store, memory, &ep.sample.tokens);
    let idx: Vec<usize> = ep.sample.tokens.iter().map(|&x| x as usize).collect();
    let new_lp = g.pick_per_row(lp, &idx);
    let old_lp = g.input(col(&ep.sample.logprobs));
    let log_ratio = g.sub(new_lp, old_lp);
    let ratio = g.exp(log_ratio);
    let adv = g.input(col(advantages));
    let unclipped = g.mul(ratio, adv);
    let eps = config.clip_epsilon;
    let clipped_ratio = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let clipped = g.mul(clipped_ratio, adv);
    let surrogate = g.minimum(unclipped, clipped);
    let surr_mean = g.mean(surrogate);
    let policy_loss = g.scale(surr_mean, -1.0);

    let values = policy.values(&mut g, store, hidden);
    let targets = g.input(col(&ep.returns));
    let err = g.sub(values, targets);
    let sq = g.mul(err, err);
    let value_loss = g.mean(sq);

    let probs = g.exp(lp);
    let plogp = g.mul(probs, lp);
    let total = g.sum(plogp);
    let entropy = g.scale(total, -1.0 / t as f64);

    let v_term = g.scale(value_loss, config.value_coef);
    let e_term = g.scale(entropy, -config.entropy_coef);
    let sum = g.add(policy_loss, v_term);
    let loss = g.add(sum, e_term);
    let loss = g.scale(loss, weight);

    let ratios = g.value(ratio).data();
    let clipped_count = ratios.iter().filter(|r| (**r - 1.0).abs() > eps).count();
    let approx_kl = g.value(log_ratio).data().iter().map(|x| -x).sum::<f64>() / t as f64;
    Ok(EpisodeLoss {
        loss: g.scalar(loss),
        grads: g.backward(loss),
        policy: g.scalar(policy_loss),
        value: g.scalar(value_loss),
        entropy: g.scalar(entropy),
        approx_kl,
        clipped: clipped_count,
    })
}

/// One token's clipped surrogate `min(r A, clip(r, 1 - eps, 1 + eps) A)`.
pub fn surrogate_term(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Advantages rescaled to zero mean and unit variance over all tokens of the
/// batch (or copied unchanged when normalization is off).
fn batch_advantages(episodes: &[Episode], normalize: bool) -> Vec<Vec<f64>> {
    let all: Vec<f64> = episodes.iter().flat_map(|e| e.advantages.iter().copied()).collect();
    if !normalize || all.len() < 2 {
        return episodes.iter().map(|e| e.advantages.clone()).collect();
    }
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64;
    let std = var.sqrt();
    episodes.iter().map(|e| e.advantages.iter().map(|a| (a - mean) / (std + 1e-8)).collect()).collect()
}

/// `config.epochs` full-batch gradient steps on the clipped surrogate plus
/// value and entropy terms. Only parameters trained by `stage` move.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update<I: PolicyInput>(
    episodes: &[Episode],
    items: &[RlItem<I>],
    policy: &SummaryPolicy,
    store: &mut ParamStore,
    optimizer: &mut Optimizer,
    config: &PpoConfig,
    stage: Stage,
    step: u64,
) -> Result<UpdateStats> {
    if episodes.is_empty() {
        return Err(Error::Precondition("ppo_update needs at least one episode".into()));
    }
    if stage == Stage::Sft {
        return Err(Error::Precondition("ppo_update runs only in RL stages".into()));
    }
    if let Some(e) = episodes.iter().find(|e| e.advantages.len() != e.sample.tokens.len()) {
        return Err(Error::Precondition(format!("episode {} has no advantages", e.index)));
    }
    let advantages = batch_advantages(episodes, config.normalize_advantages);
    let trainable: std::collections::HashSet<_> =
        store.iter().filter(|(_, name, _)| stage.trains(name)).map(|(id, _, _)| id).collect();
    let weight = 1.0 / episodes.len() as f64;
    let mut stats = UpdateStats::default();
    for epoch in 0..config.epochs {
        let parts: Vec<Result<EpisodeLoss>> = episodes
            .par_iter()
            .zip(advantages.par_iter())
            .map(|(ep, adv)| episode_loss(policy, store, &items[ep.item].input, ep, adv, config, weight))
            .collect();
        let mut acc = GradAccumulator::new();
        let mut s = UpdateStats::default();
        let mut clipped = 0;
        let mut tokens = 0;
        for p in parts {
            let p = p?;
            acc.add(p.grads);
            s.loss += p.loss;
            s.policy_loss += p.policy * weight;
            s.value_loss += p.value * weight;
            s.entropy += p.entropy * weight;
            s.approx_kl += p.approx_kl * weight;
            clipped += p.clipped;
        }
        for e in episodes {
            tokens += e.sample.tokens.len();
        }
        s.clip_fraction = clipped as f64 / tokens.max(1) as f64;
        s.grad_norm = acc.global_norm();
        if !acc.all_finite() || !s.loss.is_finite() {
            return Err(Error::Divergence {
                step,
                diagnostics: format!(
                    "epoch {epoch}: policy loss {}, value loss {}, gradient norm {}, lr {}",
                    s.policy_loss,
                    s.value_loss,
                    s.grad_norm,
                    optimizer.lr()
                ),
            });
        }
        if let Some(max) = config.max_grad_norm {
            acc.clip_global_norm(max);
        }
        optimizer.apply(store, &acc, |id| trainable.contains(&id));
        if epoch == 0 {
            stats = s;
        }
    }
    Ok(stats)
}

/// Supervised example whose target is the concatenation of `segments`
/// (optionally in a fresh random order each time) followed by the end token.
#[derive(Debug, Clone)]
pub struct SftItem<I> {
    pub input: I,
    pub segments: Vec<Vec<u32>>,
}

impl<I> SftItem<I> {
    pub fn target(&self, shuffle: Option<&mut crate::rng::Rng>) -> TokenSequence {
        let mut order: Vec<usize> = (0..self.segments.len()).collect();
        if let Some(rng) = shuffle {
            order.shuffle(rng);
        }
        let mut ids: Vec<u32> = order.iter().flat_map(|&i| self.segments[i].iter().copied()).collect();
        ids.push(EOS);
        TokenSequence::new(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default = "d_sgd")]
    pub optimizer: OptimizerKind,
    /// Shuffle target segments per example and step.
    #[serde(default)]
    pub shuffle_segments: bool,
}

fn d_sgd() -> OptimizerKind {
    OptimizerKind::Sgd { momentum: 0.9 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Stages to run, in order.
    pub stages: Vec<Stage>,
    pub sft: SftConfig,
    pub ppo: PpoConfig,
    pub rl_perceiver_steps: u64,
    pub rl_end_to_end_steps: u64,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stages.windows(2).any(|w| w[0] >= w[1]) {
            let names: Vec<_> = self.stages.iter().map(|s| s.as_str()).collect();
            return Err(Error::Validation(format!(
                "stages must follow SFT -> RL_PERCEIVER_ONLY -> RL_END_TO_END, got {}",
                names.join(" -> ")
            )));
        }
        if self.sft.batch_size == 0 || !(self.sft.learning_rate > 0.0) {
            return Err(Error::Config("sft batch_size and learning_rate must be positive".into()));
        }
        self.ppo.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub episodes: usize,
    pub failed_episodes: usize,
    pub mean_reward: f64,
    pub mean_r_entail: f64,
    pub mean_r_quality: f64,
    pub mean_kl: f64,
    pub sft_loss: Option<f64>,
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub step: u64,
    pub stage: Stage,
    pub claim_id: String,
    pub summary: String,
    pub r_entail: f64,
    pub r_quality: f64,
    pub kl: f64,
    pub r_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    /// Last stage entered; `None` before training.
    pub stage: Option<Stage>,
    pub seed: u64,
    pub episodes_seen: u64,
    /// Mean total reward of the latest rollout batch.
    pub expected_return: f64,
    pub mean_kl: f64,
    pub history: Vec<StepRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

impl TrainState {
    pub fn new(seed: u64) -> Self {
        Self {
            step: 0,
            stage: None,
            seed,
            episodes_seen: 0,
            expected_return: 0.0,
            mean_kl: 0.0,
            history: vec![],
            episodes: vec![],
        }
    }

    fn enter(&mut self, stage: Stage) -> Result<()> {
        if self.stage.is_some_and(|s| s > stage) {
            return Err(Error::Validation(format!(
                "cannot enter {} after {}",
                stage.as_str(),
                self.stage.map(Stage::as_str).unwrap_or("")
            )));
        }
        self.stage = Some(stage);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub wall_time_secs: f64,
    pub reference_hash: Option<String>,
    pub steps: Vec<StepRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&raw).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        match value.get("format_version").and_then(|v| v.as_u64()) {
            None => {
                return Err(Error::Field {
                    path: path.to_path_buf(),
                    field: "format_version".into(),
                    message: "missing or not an integer".into(),
                })
            }
            Some(v) if v != RUN_MANIFEST_FORMAT_VERSION as u64 => {
                return Err(Error::Migration {
                    path: path.to_path_buf(),
                    found: v as u32,
                    expected: RUN_MANIFEST_FORMAT_VERSION,
                })
            }
            _ => {}
        }
        serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

/// Training data for the schedule.
pub struct TrainData<'a, I> {
    pub sft: &'a [SftItem<I>],
    pub rl: &'a [RlItem<I>],
    pub vocab: Option<&'a Vocabulary>,
}

/// Everything the schedule reads or writes besides the data.
pub struct TrainContext<'a> {
    pub policy: &'a SummaryPolicy,
    pub store: &'a mut ParamStore,
    /// Frozen reference policy; filled in after SFT when `None`.
    pub reference: &'a mut Option<ParamStore>,
    pub scorer: &'a dyn EpisodeScorer,
    pub out_dir: Option<&'a Path>,
    pub config_hash: &'a str,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn write_stage(ctx: &TrainContext, stage: Stage, state: &TrainState, from_step: usize, from_ep: usize, started: Instant) -> Result<()> {
    let Some(dir) = ctx.out_dir else { return Ok(()) };
    let sdir = dir.join(stage.as_str().to_lowercase());
    std::fs::create_dir_all(&sdir)?;
    let manifest = RunManifest {
        format_version: RUN_MANIFEST_FORMAT_VERSION,
        stage,
        seed: state.seed,
        config_hash: ctx.config_hash.to_string(),
        wall_time_secs: started.elapsed().as_secs_f64(),
        reference_hash: ctx.reference.as_ref().map(ParamStore::fingerprint),
        steps: state.history[from_step..].to_vec(),
        episodes: state.episodes[from_ep..].to_vec(),
    };
    manifest.save(&sdir.join("run_manifest.json"))?;
    checkpoint::save(
        &sdir.join("checkpoint"),
        ctx.store,
        &CheckpointManifest::new(stage.as_str(), state.step, state.seed, ctx.config_hash),
    )
}

/// Runs the configured stages in order. SFT ends by snapshotting the
/// reference policy; RL stages need that reference.
pub fn train_schedule<I: PolicyInput>(
    mut state: TrainState,
    config: &ScheduleConfig,
    data: &TrainData<I>,
    ctx: &mut TrainContext,
) -> Result<TrainState> {
    config.validate()?;
    for &stage in &config.stages {
        state.enter(stage)?;
        let started = Instant::now();
        let (from_step, from_ep) = (state.history.len(), state.episodes.len());
        match stage {
            Stage::Sft => run_sft(&mut state, &config.sft, data, ctx)?,
            Stage::RlPerceiverOnly | Stage::RlEndToEnd => {
                if ctx.reference.is_none() {
                    return Err(Error::Validation(format!(
                        "{} needs a supervised checkpoint as reference policy",
                        stage.as_str()
                    )));
                }
                let steps =
                    if stage == Stage::RlPerceiverOnly { config.rl_perceiver_steps } else { config.rl_end_to_end_steps };
                run_rl(&mut state, stage, steps, &config.ppo, data, ctx)?;
            }
        }
        write_stage(ctx, stage, &state, from_step, from_ep, started)?;
    }
    Ok(state)
}

fn run_sft<I: PolicyInput>(state: &mut TrainState, cfg: &SftConfig, data: &TrainData<I>, ctx: &mut TrainContext) -> Result<()> {
    if cfg.steps > 0 && data.sft.is_empty() {
        return Err(Error::Validation("SFT stage has no examples".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let trainable: std::collections::HashSet<_> =
        ctx.store.iter().filter(|(_, n, _)| Stage::Sft.trains(n)).map(|(id, _, _)| id).collect();
    for _ in 0..cfg.steps {
        let mut rng = stream(state.seed ^ 0x5f70_0000, state.step);
        let batch: Vec<(&I, TokenSequence)> = (0..cfg.batch_size)
            .map(|_| {
                let item = &data.sft[rng.gen_range(0..data.sft.len())];
                (&item.input, item.target(cfg.shuffle_segments.then_some(&mut rng)))
            })
            .collect();
        let batch: Vec<(RefInput<I>, TokenSequence)> = batch.into_iter().map(|(i, t)| (RefInput(i), t)).collect();
        let loss = sft_step(&batch, ctx.policy, ctx.store, &mut opt, |id| trainable.contains(&id), state.step)?;
        state.step += 1;
        state.history.push(StepRecord {
            step: state.step,
            stage: Stage::Sft,
            episodes: 0,
            failed_episodes: 0,
            mean_reward: 0.0,
            mean_r_entail: 0.0,
            mean_r_quality: 0.0,
            mean_kl: 0.0,
            sft_loss: Some(loss),
            policy_loss: None,
            value_loss: None,
            entropy: None,
        });
    }
    *ctx.reference = Some(ctx.store.clone());
    Ok(())
}

/// Borrowed input, so SFT batches can reuse item inputs without cloning.
struct RefInput<'a, I>(&'a I);

impl<I: PolicyInput> PolicyInput for RefInput<'_, I> {
    fn build(&self, g: &mut Graph, store: &ParamStore) -> Result<crate::tensor::Var> {
        self.0.build(g, store)
    }
}

fn run_rl<I: PolicyInput>(
    state: &mut TrainState,
    stage: Stage,
    steps: u64,
    cfg: &PpoConfig,
    data: &TrainData<I>,
    ctx: &mut TrainContext,
) -> Result<()> {
    if steps > 0 && data.rl.is_empty() {
        return Err(Error::Validation("RL stage has no claims".into()));
    }
    let reference = ctx.reference.as_ref().expect("checked by caller").clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    for _ in 0..steps {
        let batch = collect_rollouts(
            ctx.policy,
            ctx.store,
            &reference,
            data.rl,
            ctx.scorer,
            data.vocab,
            cfg.rollout_batch,
            state.seed,
            state.episodes_seen,
            cfg.temperature,
        )?;
        state.episodes_seen += cfg.rollout_batch as u64;
        let mut episodes = batch.episodes;
        for e in episodes.iter_mut() {
            compute_advantages(e, cfg);
        }
        let stats = ppo_update(&episodes, data.rl, ctx.policy, ctx.store, &mut opt, cfg, stage, state.step)?;
        state.step += 1;
        let rec = StepRecord {
            step: state.step,
            stage,
            episodes: episodes.len(),
            failed_episodes: batch.failed,
            mean_reward: mean(episodes.iter().map(|e| e.reward.r_total)),
            mean_r_entail: mean(episodes.iter().map(|e| e.reward.r_entail)),
            mean_r_quality: mean(episodes.iter().map(|e| e.reward.r_quality)),
            mean_kl: mean(episodes.iter().map(|e| e.reward.kl_estimate)),
            sft_loss: None,
            policy_loss: Some(stats.policy_loss),
            value_loss: Some(stats.value_loss),
            entropy: Some(stats.entropy),
        };
        log::info!(
            "{} step {}: r_total {:.3} r_entail {:.3} kl {:.3}",
            stage.as_str(),
            rec.step,
            rec.mean_reward,
            rec.mean_r_entail,
            rec.mean_kl
        );
        state.expected_return = rec.mean_reward;
        state.mean_kl = rec.mean_kl;
        state.history.push(rec);
        for e in &episodes {
            state.episodes.push(EpisodeRecord {
                episode: e.index,
                step: state.step,
                stage,
                claim_id: e.claim_id.clone(),
                summary: e.sample.text.clone(),
                r_entail: e.reward.r_entail,
                r_quality: e.reward.r_quality,
                kl: e.reward.kl_estimate,
                r_total: e.reward.r_total,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
