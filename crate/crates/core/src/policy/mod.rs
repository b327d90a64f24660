//! The summarization policy: a pre-norm transformer encoder/decoder over a
//! fused input, trained with teacher-forced cross-entropy and sampled
//! autoregressively for rollouts.

pub mod checkpoint;
mod rationale;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::encoding::tokenizer::{BOS, EOS, PAD};
use crate::encoding::{TokenSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::fusion::FusedInput;
use crate::nn::{causal_mask, sinusoidal_positions, xavier, Attention, FeedForward, LayerNorm, Linear, Optimizer, MASK_NEG};
use crate::rng::Rng;
use crate::tensor::{GradAccumulator, Graph, Matrix, ParamId, ParamStore, Var};

pub use rationale::assemble_rationale_input;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub dim: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    pub ffn_hidden: usize,
    #[serde(default = "default_layers")]
    pub encoder_layers: usize,
    #[serde(default = "default_layers")]
    pub decoder_layers: usize,
    /// Longest summary, in tokens, including the end marker.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_heads() -> usize {
    1
}

fn default_layers() -> usize {
    2
}

fn default_max_len() -> usize {
    64
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config("policy vocabulary needs at least 2 tokens".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!("width {} must be a positive multiple of heads {}", self.dim, self.heads)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    norm_attn: LayerNorm,
    attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    norm_self: LayerNorm,
    self_attn: Attention,
    norm_cross: LayerNorm,
    cross_attn: Attention,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Parameter handles of the policy; values live in a [`ParamStore`] so the
/// same handles address the active policy and its frozen reference copy.
#[derive(Debug, Clone)]
pub struct SummaryPolicy {
    pub config: PolicyConfig,
    encoder: Vec<EncoderLayer>,
    encoder_norm: LayerNorm,
    embedding: ParamId,
    decoder: Vec<DecoderLayer>,
    decoder_norm: LayerNorm,
    output: Linear,
    value_head: Linear,
}

/// Prefix of every policy parameter name except the value head.
pub const POLICY_PREFIX: &str = "policy.";
pub const VALUE_PREFIX: &str = "value.";

impl SummaryPolicy {
    pub fn init(store: &mut ParamStore, config: PolicyConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.dim, config.heads);
        let attn_scale = xavier(d, d / h);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("policy.encoder.{i}");
                EncoderLayer {
                    norm_attn: LayerNorm::init(store, &format!("{n}.norm_attn"), d),
                    attn: Attention::init(store, &format!("{n}.attn"), d, h, attn_scale, rng),
                    norm_ffn: LayerNorm::init(store, &format!("{n}.norm_ffn"), d),
                    ffn: FeedForward::init(store, &format!("{n}.ffn"), d, config.ffn_hidden, rng),
                }
            })
            .collect();
        let encoder_norm = LayerNorm::init(store, "policy.encoder.norm", d);
        let embedding = store.insert("policy.embedding", Matrix::uniform(config.vocab_size, d, 1.0, rng));
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("policy.decoder.{i}");
                DecoderLayer {
                    norm_self: LayerNorm::init(store, &format!("{n}.norm_self"), d),
                    self_attn: Attention::init(store, &format!("{n}.self_attn"), d, h, attn_scale, rng),
                    norm_cross: LayerNorm::init(store, &format!("{n}.norm_cross"), d),
                    cross_attn: Attention::init(store, &format!("{n}.cross_attn"), d, h, attn_scale, rng),
                    norm_ffn: LayerNorm::init(store, &format!("{n}.norm_ffn"), d),
                    ffn: FeedForward::init(store, &format!("{n}.ffn"), d, config.ffn_hidden, rng),
                }
            })
            .collect();
        let decoder_norm = LayerNorm::init(store, "policy.decoder.norm", d);
        let output = Linear::init(store, "policy.output", d, config.vocab_size, xavier(d, config.vocab_size), true, rng);
        let value_head = Linear::init(store, "value.head", d, 1, 0.01, true, rng);
        Ok(Self { config, encoder, encoder_norm, embedding, decoder, decoder_norm, output, value_head })
    }

    /// Rebuilds handles for a store written by [`SummaryPolicy::init`].
    pub fn from_store(store: &ParamStore, config: PolicyConfig) -> Result<Self> {
        config.validate()?;
        let need = |name: &str| {
            store.id(name).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))
        };
        need("policy.embedding")?;
        need("value.head.weight")?;
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("policy.encoder.{i}");
                need(&format!("{n}.norm_attn.gain"))?;
                Ok(EncoderLayer {
                    norm_attn: LayerNorm::from_store(store, &format!("{n}.norm_attn")),
                    attn: Attention::from_store(store, &format!("{n}.attn")),
                    norm_ffn: LayerNorm::from_store(store, &format!("{n}.norm_ffn")),
                    ffn: FeedForward::from_store(store, &format!("{n}.ffn")),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("policy.decoder.{i}");
                need(&format!("{n}.norm_self.gain"))?;
                Ok(DecoderLayer {
                    norm_self: LayerNorm::from_store(store, &format!("{n}.norm_self")),
                    self_attn: Attention::from_store(store, &format!("{n}.self_attn")),
                    norm_cross: LayerNorm::from_store(store, &format!("{n}.norm_cross")),
                    cross_attn: Attention::from_store(store, &format!("{n}.cross_attn")),
                    norm_ffn: LayerNorm::from_store(store, &format!("{n}.norm_ffn")),
                    ffn: FeedForward::from_store(store, &format!("{n}.ffn")),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let embedding = store.expect_id("policy.embedding");
        if store.get(embedding).shape() != (config.vocab_size, config.dim) {
            return Err(Error::Config("checkpoint embedding shape does not match the policy config".into()));
        }
        Ok(Self {
            encoder,
            encoder_norm: LayerNorm::from_store(store, "policy.encoder.norm"),
            embedding,
            decoder,
            decoder_norm: LayerNorm::from_store(store, "policy.decoder.norm"),
            output: Linear::from_store(store, "policy.output"),
            value_head: Linear::from_store(store, "value.head"),
            config,
        })
    }

    /// Encoder memory for a fused input (`rows × D`).
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, fused: Var) -> Result<Var> {
        let (rows, dim) = g.shape(fused);
        if dim != self.config.dim {
            return Err(Error::Config(format!("fused input width {dim} does not match policy width {}", self.config.dim)));
        }
        if rows == 0 {
            return Err(Error::Precondition("fused input has no rows".into()));
        }
        let mut x = g.add_const(fused, &sinusoidal_positions(rows, dim, 0));
        for layer in &self.encoder {
            let n = layer.norm_attn.forward(g, store, x);
            let a = layer.attn.forward(g, store, n, n, None).out;
            x = g.add(x, a);
            let n = layer.norm_ffn.forward(g, store, x);
            let f = layer.ffn.forward(g, store, n);
            x = g.add(x, f);
        }
        Ok(self.encoder_norm.forward(g, store, x))
    }

    /// Decoder hidden states for `inputs` (starting with BOS), `T × D`.
    fn decode(&self, g: &mut Graph, store: &ParamStore, memory: Var, inputs: &[u32]) -> Var {
        let table = g.param(store, self.embedding);
        let ids: Vec<usize> = inputs.iter().map(|&i| i as usize).collect();
        let emb = g.gather(table, &ids);
        let t = inputs.len();
        let mut x = g.add_const(emb, &sinusoidal_positions(t, self.config.dim, 0));
        let mask = causal_mask(t);
        for layer in &self.decoder {
            let n = layer.norm_self.forward(g, store, x);
            let a = layer.self_attn.forward(g, store, n, n, Some(&mask)).out;
            x = g.add(x, a);
            let n = layer.norm_cross.forward(g, store, x);
            let c = layer.cross_attn.forward(g, store, n, memory, None).out;
            x = g.add(x, c);
            let n = layer.norm_ffn.forward(g, store, x);
            let f = layer.ffn.forward(g, store, n);
            x = g.add(x, f);
        }
        self.decoder_norm.forward(g, store, x)
    }

    /// Row-wise log-distribution over the vocabulary. Padding and the start
    /// marker are never emitted.
    fn log_probs(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Var {
        let logits = self.output.forward(g, store, hidden);
        let (t, n) = g.shape(logits);
        let mut mask = Matrix::zeros(t, n);
        for r in 0..t {
            mask.set(r, PAD as usize, MASK_NEG);
            mask.set(r, BOS as usize, MASK_NEG);
        }
        let masked = g.add_const(logits, &mask);
        g.log_softmax_rows(masked)
    }

    /// Teacher-forced pass over `targets`: returns the `T × N` log-probability
    /// matrix and the decoder states that produced it.
    pub fn teacher_forced(&self, g: &mut Graph, store: &ParamStore, memory: Var, targets: &[u32]) -> (Var, Var) {
        let mut inputs = Vec::with_capacity(targets.len());
        inputs.push(BOS);
        inputs.extend_from_slice(&targets[..targets.len().saturating_sub(1)]);
        let hidden = self.decode(g, store, memory, &inputs);
        (self.log_probs(g, store, hidden), hidden)
    }

    /// Per-token log-probabilities of `targets` (`T × 1`) plus decoder states.
    pub fn token_log_probs(&self, g: &mut Graph, store: &ParamStore, memory: Var, targets: &[u32]) -> (Var, Var) {
        let (lp, hidden) = self.teacher_forced(g, store, memory, targets);
        let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
        (g.pick_per_row(lp, &idx), hidden)
    }

    /// Value estimates (`T × 1`) from decoder states; the states are detached
    /// so the value loss only trains the probe.
    pub fn values(&self, g: &mut Graph, store: &ParamStore, hidden: Var) -> Var {
        let h = g.detach(hidden);
        self.value_head.forward(g, store, h)
    }

    /// Mean token cross-entropy of `target` given `fused`.
    pub fn sequence_loss(&self, g: &mut Graph, store: &ParamStore, fused: Var, target: &TokenSequence) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::Validation("SFT target is empty".into()));
        }
        target.validate(self.config.vocab_size)?;
        let memory = self.encode(g, store, fused)?;
        let (picked, _) = self.token_log_probs(g, store, memory, target.ids());
        let mean = g.mean(picked);
        Ok(g.scale(mean, -1.0))
    }

    /// Next-token distribution after `prefix` (values, not a graph).
    pub fn next_token_distribution(&self, store: &ParamStore, memory: &Matrix, prefix: &[u32]) -> Vec<f64> {
        let mut g = Graph::new();
        let mem = g.input(memory.clone());
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(prefix);
        let hidden = self.decode(&mut g, store, mem, &inputs);
        let last = g.slice_rows(hidden, inputs.len() - 1, inputs.len());
        let lp = self.log_probs(&mut g, store, last);
        g.value(lp).data().iter().map(|v| v.exp()).collect()
    }

    pub fn memory(&self, store: &ParamStore, input: &dyn PolicyInput) -> Result<Matrix> {
        let mut g = Graph::new();
        let fused = input.build(&mut g, store)?;
        let m = self.encode(&mut g, store, fused)?;
        Ok(g.value(m).clone())
    }
}

/// Anything that can be turned into a fused input inside a graph. Raw
/// claim/document/image inputs implement this through the encoders so
/// gradients reach them; a precomputed [`FusedInput`] is a constant.
pub trait PolicyInput: Sync {
    fn build(&self, g: &mut Graph, store: &ParamStore) -> Result<Var>;
}

impl PolicyInput for FusedInput {
    fn build(&self, g: &mut Graph, _store: &ParamStore) -> Result<Var> {
        Ok(g.input(self.values.clone()))
    }
}

/// One supervised example.
pub type SftExample<I> = (I, TokenSequence);

/// One teacher-forced gradient step on the mean per-example loss. Only
/// parameters accepted by `trainable` move. Returns the pre-update loss.
pub fn sft_step<I: PolicyInput>(
    batch: &[SftExample<I>],
    policy: &SummaryPolicy,
    store: &mut ParamStore,
    optimizer: &mut Optimizer,
    trainable: impl Fn(ParamId) -> bool,
    step: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Precondition("SFT batch is empty".into()));
    }
    let (grads, loss) = sft_gradients(batch, policy, store)?;
    if !loss.is_finite() || !grads.all_finite() {
        return Err(Error::Divergence {
            step,
            diagnostics: format!("sft loss {loss}, gradient norm {}, lr {}", grads.global_norm(), optimizer.lr()),
        });
    }
    optimizer.apply(store, &grads, trainable);
    Ok(loss)
}

/// Mean loss over `batch` and its gradient.
pub fn sft_gradients<I: PolicyInput>(
    batch: &[SftExample<I>],
    policy: &SummaryPolicy,
    store: &ParamStore,
) -> Result<(GradAccumulator, f64)> {
    use rayon::prelude::*;
    let per_example: Vec<Result<(crate::tensor::Gradients, f64)>> = batch
        .par_iter()
        .map(|(input, target)| {
            let mut g = Graph::new();
            let fused = input.build(&mut g, store)?;
            let loss = policy.sequence_loss(&mut g, store, fused, target)?;
            Ok((g.backward(loss), g.scalar(loss)))
        })
        .collect();
    let mut acc = GradAccumulator::new();
    let mut total = 0.0;
    for r in per_example {
        let (grads, loss) = r?;
        acc.add(grads);
        total += loss;
    }
    let n = batch.len() as f64;
    acc.scale(1.0 / n);
    Ok((acc, total / n))
}

/// A sampled summary with its log-probabilities under both policies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarySample {
    /// Generated ids; ends with the end marker unless the length cap hit.
    pub tokens: Vec<u32>,
    pub logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub text: String,
}

impl SummarySample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Draws a token from `probs` at `temperature`; zero means argmax with the
/// lowest id winning ties.
pub fn pick_token(probs: &[f64], temperature: f64, rng: &mut Rng) -> u32 {
    if temperature <= 0.0 {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        return best as u32;
    }
    let weights: Vec<f64> = if temperature == 1.0 {
        probs.to_vec()
    } else {
        let logw: Vec<f64> = probs.iter().map(|p| if *p > 0.0 { p.ln() / temperature } else { f64::NEG_INFINITY }).collect();
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logw.iter().map(|l| (l - max).exp()).collect()
    };
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if u < *w {
                return i as u32;
            }
            u -= w;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0) as u32
}

/// Samples a summary autoregressively from the active policy and scores the
/// sampled tokens under both the active (`store`) and reference
/// (`ref_store`) parameters. Recorded log-probabilities are those of the
/// untempered model distribution.
pub fn generate(
    input: &dyn PolicyInput,
    policy: &SummaryPolicy,
    store: &ParamStore,
    ref_store: &ParamStore,
    vocab: Option<&Vocabulary>,
    temperature: f64,
    rng: &mut Rng,
) -> Result<SummarySample> {
    let memory = policy.memory(store, input)?;
    let mut tokens = Vec::new();
    while tokens.len() < policy.config.max_len {
        let probs = policy.next_token_distribution(store, &memory, &tokens);
        let tok = pick_token(&probs, temperature, rng);
        tokens.push(tok);
        if tok == EOS {
            break;
        }
    }
    let logprobs = score_tokens(policy, store, input, &tokens)?;
    let ref_logprobs = if std::ptr::eq(store, ref_store) {
        logprobs.clone()
    } else {
        score_tokens(policy, ref_store, input, &tokens)?
    };
    let text = vocab.map(|v| v.decode(&tokens)).unwrap_or_default();
    Ok(SummarySample { tokens, logprobs, ref_logprobs, text })
}

/// Per-token log-probabilities of `tokens` under the parameters in `store`.
pub fn score_tokens(policy: &SummaryPolicy, store: &ParamStore, input: &dyn PolicyInput, tokens: &[u32]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let fused = input.build(&mut g, store)?;
    let memory = policy.encode(&mut g, store, fused)?;
    let (picked, _) = policy.token_log_probs(&mut g, store, memory, tokens);
    Ok(g.value(picked).data().to_vec())
}
