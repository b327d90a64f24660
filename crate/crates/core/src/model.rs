//! The full summarizer: encoders, document resampler, fusion and policy,
//! all addressed through one [`ParamStore`].
//!
//! Parameter name prefixes: `encoding.` (text and image encoders and
//! resamplers), `fusion.`, `policy.` and `value.`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::claimgen::DocumentCluster;
use crate::encoding::Perceiver;
use crate::encoding::tokenizer::SEP;
use crate::encoding::{chunk_tokens, EncoderPlugin, ImageEncoder, ImageRecord, TextEncoder, TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::{FusionParams, DEFAULT_INIT_SCALE};
use crate::policy::{PolicyConfig, PolicyInput, SummaryPolicy};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn")]
    pub ffn_hidden: usize,
    /// Latent count of the document resampler.
    #[serde(default = "default_latents")]
    pub latents: usize,
    /// Latent count of a separate image resampler; raw image rows when unset.
    #[serde(default)]
    pub image_latents: Option<usize>,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default = "default_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_layers")]
    pub decoder_layers: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default = "default_fusion_scale")]
    pub fusion_init_scale: f64,
}

fn default_dim() -> usize {
    64
}
fn default_heads() -> usize {
    1
}
fn default_ffn() -> usize {
    128
}
fn default_latents() -> usize {
    64
}
fn default_chunk() -> usize {
    1024
}
fn default_layers() -> usize {
    2
}
fn default_max_len() -> usize {
    64
}
fn default_fusion_scale() -> f64 {
    DEFAULT_INIT_SCALE
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: default_dim(),
            heads: default_heads(),
            ffn_hidden: default_ffn(),
            latents: default_latents(),
            image_latents: None,
            chunk_size: default_chunk(),
            encoder_layers: default_layers(),
            decoder_layers: default_layers(),
            max_len: default_max_len(),
            fusion_init_scale: default_fusion_scale(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latents == 0 || self.image_latents == Some(0) {
            return Err(Error::Config("latent counts must be positive".into()));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be at least 1".into()));
        }
        if !(self.fusion_init_scale.is_finite() && self.fusion_init_scale >= 0.0) {
            return Err(Error::Config("fusion_init_scale must be a non-negative number".into()));
        }
        self.policy_config(2).validate()
    }

    pub fn policy_config(&self, vocab_size: usize) -> PolicyConfig {
        PolicyConfig {
            vocab_size,
            dim: self.dim,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            max_len: self.max_len,
        }
    }
}

/// Parameter handles of the whole summarizer.
#[derive(Debug, Clone)]
pub struct MspModel {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    pub documents: Perceiver,
    pub images: Option<Perceiver>,
    pub fusion: FusionParams,
    pub policy: SummaryPolicy,
}

/// Parameters that move during perceiver-only RL.
pub fn is_perceiver_side(name: &str) -> bool {
    name.starts_with("encoding.") || name.starts_with("fusion.")
}

impl MspModel {
    pub fn init(store: &mut ParamStore, config: ModelConfig, vocab_size: usize, image_features: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let text = TextEncoder::init(store, "encoding.text", vocab_size, d, rng);
        let image = ImageEncoder::init(store, "encoding.image", image_features, d, rng);
        let documents = Perceiver::init(store, "encoding.documents", config.latents, d, config.heads, rng);
        let images = config.image_latents.map(|l| Perceiver::init(store, "encoding.images", l, d, config.heads, rng));
        let fusion = FusionParams::init(store, "fusion", d, config.heads, config.fusion_init_scale, rng);
        let policy = SummaryPolicy::init(store, config.policy_config(vocab_size), rng)?;
        Ok(Self { config, text, image, documents, images, fusion, policy })
    }

    pub fn from_store(store: &ParamStore, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let required = ["encoding.text.embedding", "encoding.image.projection.weight", "encoding.documents.latents"];
        if let Some(missing) = required.iter().find(|n| store.id(n).is_none()) {
            return Err(Error::Config(format!("checkpoint lacks tensor {missing}")));
        }
        let text = TextEncoder::from_store(store, "encoding.text");
        let vocab_size = text.vocab_size(store);
        Ok(Self {
            text,
            image: ImageEncoder::from_store(store, "encoding.image"),
            documents: Perceiver::from_store(store, "encoding.documents"),
            images: config.image_latents.map(|_| Perceiver::from_store(store, "encoding.images")),
            fusion: FusionParams::from_store(store, "fusion"),
            policy: SummaryPolicy::from_store(store, config.policy_config(vocab_size))?,
            config,
        })
    }

    pub fn with_plugins(mut self, text: EncoderPlugin, image: EncoderPlugin) -> Self {
        self.text = self.text.with_plugin(text);
        self.image = self.image.with_plugin(image);
        self
    }
}

/// Tokenized evidence for one claim.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub claim: TokenSequence,
    pub document_chunks: Vec<TokenSequence>,
    pub images: Vec<ImageRecord>,
}

impl Evidence {
    /// Documents are joined with the separator token and cut into chunks.
    pub fn new(vocab: &Vocabulary, claim: &str, cluster: &DocumentCluster, chunk_size: usize) -> Result<Self> {
        let claim = vocab.encode(claim);
        if claim.is_empty() {
            return Err(Error::Validation("claim has no tokens".into()));
        }
        let mut ids = Vec::new();
        for (i, d) in cluster.documents.iter().enumerate() {
            if i > 0 {
                ids.push(SEP);
            }
            ids.extend_from_slice(vocab.encode(d).ids());
        }
        let document_chunks = chunk_tokens(&TokenSequence::new(ids), chunk_size);
        if document_chunks.is_empty() {
            return Err(Error::Validation(format!("cluster {} has no document tokens", cluster.id)));
        }
        Ok(Self { claim, document_chunks, images: cluster.images.clone() })
    }
}

/// Evidence bound to the model that encodes it.
#[derive(Debug, Clone)]
pub struct ModelInput {
    pub model: Arc<MspModel>,
    pub evidence: Evidence,
}

impl ModelInput {
    pub fn new(model: Arc<MspModel>, evidence: Evidence) -> Self {
        Self { model, evidence }
    }
}

impl PolicyInput for ModelInput {
    fn build(&self, g: &mut Graph, store: &ParamStore) -> Result<Var> {
        let m = &self.model;
        let claim = m.text.encode_var(g, store, &self.evidence.claim)?;
        let chunks = self
            .evidence
            .document_chunks
            .iter()
            .map(|c| m.text.encode_var(g, store, c))
            .collect::<Result<Vec<_>>>()?;
        let docs = m.documents.forward(g, store, &chunks)?.out;
        let images = if self.evidence.images.is_empty() {
            None
        } else {
            let rows =
                self.evidence.images.iter().map(|i| m.image.encode_var(g, store, i)).collect::<Result<Vec<_>>>()?;
            let stacked = g.concat_rows(&rows);
            Some(match &m.images {
                Some(p) => p.forward(g, store, &[stacked])?.out,
                None => stacked,
            })
        };
        let x_ic = m.fusion.cross_attend(g, store, claim, images)?.out;
        m.fusion.project_concat(g, store, x_ic, docs)
    }
}
