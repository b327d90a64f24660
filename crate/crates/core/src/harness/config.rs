//! Run configuration: a TOML file with a fixed set of tables, validated
//! before any work starts and hashed in canonical form.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::claimgen::{CheckworthinessPlugin, LlmClient, Script, DEFAULT_TRIVIAL_LEXICON};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ppo::ScheduleConfig;
use crate::reward::{ClassifierConfig, QualityCritic, DEFAULT_CRITIC_CONCURRENCY, DEFAULT_TARGET_LEN};
use crate::transport::{Endpoint, Transport, DEFAULT_TIMEOUT_SECS};

use super::metrics::Averaging;

pub const ENV_LLM_ENDPOINT: &str = "FACTSUM_LLM_ENDPOINT";
pub const ENV_TIMEOUT_SECS: &str = "FACTSUM_TIMEOUT_SECS";

/// Tables and keys accepted in a run configuration, printed when the file
/// is missing or malformed.
pub const SCHEMA: &str = "\
seed = <int>                      # optional, default 0; --seed overrides
seeds = [<int>, ...]              # optional sweep seeds
[dataset]  mode = \"synth\"|\"llm\", clusters, corpus, clusters_dir, script,
           verify_labels, drop_inconsistent, trivial_lexicon, classifier_pairs
[model]    dim, heads, ffn_hidden, latents, image_latents, chunk_size,
           encoder_layers, decoder_layers, max_len, fusion_init_scale
[classifier] embed_dim, hidden, epochs, batch_size, learning_rate, holdout_fraction
[schedule] stages, rl_perceiver_steps, rl_end_to_end_steps
[schedule.sft] steps, batch_size, learning_rate, optimizer, shuffle_segments
[schedule.ppo] learning_rate, rollout_batch, clip_epsilon, eta, epochs, value_coef,
           entropy_coef, gamma, lambda, normalize_advantages, temperature,
           max_grad_norm, optimizer
[reward]   use_quality, target_len, critic_concurrency
[plugins]  llm_endpoint, critic_endpoint, checkworthiness_endpoint, timeout_secs, max_retries
[sweep]    learning_rates, batch_sizes
[evaluation] averaging = \"macro\"|\"micro\", window";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    /// Clusters and claims from the seeded synthetic world, replayed through
    /// a scripted LLM client.
    #[default]
    Synth,
    /// Clusters read from `clusters_dir`, claims from the LLM endpoint or a
    /// recorded script.
    Llm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub mode: DatasetMode,
    #[serde(default = "d_clusters")]
    pub clusters: usize,
    /// Corpus directory read by training and evaluation commands.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Cluster sidecar directory for `llm` mode.
    #[serde(default)]
    pub clusters_dir: Option<PathBuf>,
    /// Recorded prompt/response file used instead of a live endpoint.
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default = "d_true")]
    pub verify_labels: bool,
    #[serde(default)]
    pub drop_inconsistent: bool,
    #[serde(default)]
    pub trivial_lexicon: Option<Vec<String>>,
    /// Size of the generated entailment-classifier training set.
    #[serde(default = "d_pairs")]
    pub classifier_pairs: usize,
}

fn d_clusters() -> usize {
    8
}
fn d_true() -> bool {
    true
}
fn d_pairs() -> usize {
    6000
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            mode: DatasetMode::Synth,
            clusters: d_clusters(),
            corpus: None,
            clusters_dir: None,
            script: None,
            verify_labels: true,
            drop_inconsistent: false,
            trivial_lexicon: None,
            classifier_pairs: d_pairs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardConfig {
    #[serde(default = "d_true")]
    pub use_quality: bool,
    #[serde(default = "d_target_len")]
    pub target_len: usize,
    #[serde(default = "d_concurrency")]
    pub critic_concurrency: usize,
}

fn d_target_len() -> usize {
    DEFAULT_TARGET_LEN
}
fn d_concurrency() -> usize {
    DEFAULT_CRITIC_CONCURRENCY
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { use_quality: true, target_len: d_target_len(), critic_concurrency: d_concurrency() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginConfig {
    /// Claim generation and double-checking (`http(s)://...` or `process:cmd args`).
    #[serde(default)]
    pub llm_endpoint: Option<String>,
    /// Summary quality critic; the built-in length critic when unset.
    #[serde(default)]
    pub critic_endpoint: Option<String>,
    #[serde(default)]
    pub checkworthiness_endpoint: Option<String>,
    #[serde(default = "d_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "d_retries")]
    pub max_retries: u32,
}

fn d_timeout() -> u64 {
    DEFAULT_TIMEOUT_SECS
}
fn d_retries() -> u32 {
    3
}

impl Default for PluginConfig {
    fn default() -> Self {
        Self {
            llm_endpoint: None,
            critic_endpoint: None,
            checkworthiness_endpoint: None,
            timeout_secs: d_timeout(),
            max_retries: d_retries(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "d_learning_rates")]
    pub learning_rates: Vec<f64>,
    #[serde(default)]
    pub batch_sizes: Vec<usize>,
}

fn d_learning_rates() -> Vec<f64> {
    vec![1e-4, 1e-5, 1e-6]
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { learning_rates: d_learning_rates(), batch_sizes: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default)]
    pub averaging: Averaging,
    /// Episodes averaged at each end of an RL run in reports.
    #[serde(default = "d_window")]
    pub window: usize,
}

fn d_window() -> usize {
    50
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self { averaging: Averaging::Macro, window: d_window() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub classifier: ClassifierConfig,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub reward: RewardConfig,
    #[serde(default)]
    pub plugins: PluginConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(format!("{e}\nexpected layout:\n{SCHEMA}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates `path`, then applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}\nexpected layout:\n{SCHEMA}", path.display()))
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_env(|k| std::env::var(k).ok())?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(e) = var(ENV_LLM_ENDPOINT).filter(|e| !e.trim().is_empty()) {
            Endpoint::parse(&e)?;
            self.plugins.llm_endpoint = Some(e);
        }
        if let Some(t) = var(ENV_TIMEOUT_SECS) {
            self.plugins.timeout_secs =
                t.trim().parse().map_err(|_| Error::Config(format!("{ENV_TIMEOUT_SECS} is not an integer: {t}")))?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        if self.dataset.clusters == 0 {
            return Err(Error::Config("dataset.clusters must be at least 1".into()));
        }
        if self.dataset.mode == DatasetMode::Llm && self.dataset.clusters_dir.is_none() {
            return Err(Error::Config("dataset.mode = \"llm\" needs dataset.clusters_dir".into()));
        }
        if self.plugins.timeout_secs == 0 {
            return Err(Error::Config("plugins.timeout_secs must be positive".into()));
        }
        if self.reward.critic_concurrency == 0 || self.reward.target_len == 0 {
            return Err(Error::Config("reward.critic_concurrency and reward.target_len must be positive".into()));
        }
        for e in [&self.plugins.llm_endpoint, &self.plugins.critic_endpoint, &self.plugins.checkworthiness_endpoint]
            .into_iter()
            .flatten()
        {
            Endpoint::parse(e)?;
        }
        if self.sweep.learning_rates.iter().any(|lr| !(*lr > 0.0)) || self.sweep.batch_sizes.contains(&0) {
            return Err(Error::Config("sweep grids must hold positive values".into()));
        }
        Ok(())
    }

    /// SHA-256 of the configuration as canonical JSON (sorted keys), so the
    /// order of keys in the source file does not matter.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// Seeds to run: `seeds` when given, else the single `seed`.
    pub fn run_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    fn transport(&self, descriptor: &str) -> Result<Arc<Transport>> {
        Ok(Arc::new(Transport::new(Endpoint::parse(descriptor)?, Duration::from_secs(self.plugins.timeout_secs))))
    }

    /// Live client when an endpoint is set, else the recorded script.
    pub fn llm_client(&self) -> Result<LlmClient> {
        if let Some(e) = &self.plugins.llm_endpoint {
            return Ok(LlmClient::live(self.transport(e)?, self.plugins.max_retries));
        }
        match &self.dataset.script {
            Some(p) => Ok(LlmClient::scripted(Script::load(p)?)),
            None => Err(Error::Config("claim generation needs plugins.llm_endpoint or dataset.script".into())),
        }
    }

    pub fn checkworthiness_plugin(&self) -> Result<CheckworthinessPlugin> {
        if let Some(e) = &self.plugins.checkworthiness_endpoint {
            return Ok(CheckworthinessPlugin::External(self.transport(e)?));
        }
        let trivial = self
            .dataset
            .trivial_lexicon
            .clone()
            .unwrap_or_else(|| DEFAULT_TRIVIAL_LEXICON.iter().map(|s| s.to_string()).collect());
        Ok(CheckworthinessPlugin::Builtin { trivial })
    }

    pub fn quality_critic(&self) -> Result<QualityCritic> {
        match &self.plugins.critic_endpoint {
            Some(e) => Ok(QualityCritic::external(
                LlmClient::live(self.transport(e)?, self.plugins.max_retries),
                self.reward.critic_concurrency,
            )),
            None => Ok(QualityCritic::Builtin { target_len: self.reward.target_len }),
        }
    }
}
