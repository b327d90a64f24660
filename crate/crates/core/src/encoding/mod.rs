//! Turning token and image inputs into `rows × D` embedding matrices:
//! chunking, text/image encoders behind a plugin interface, and the
//! latent-array resampler that merges any number of chunks into a fixed
//! `L × D` matrix.

mod perceiver;
pub mod tokenizer;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::Rng;
use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::transport::Transport;

pub use perceiver::{merge_chunks, LatentArray, Perceiver, PerceiverOutput};
pub use tokenizer::Vocabulary;

/// Token ids drawn from a [`Vocabulary`].
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_ids(self) -> Vec<u32> {
        self.0
    }

    /// Checks every id against the vocabulary size.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        match self.0.iter().find(|&&id| id as usize >= vocab_size) {
            Some(id) => Err(Error::Validation(format!("token id {id} outside vocabulary of {vocab_size}"))),
            None => Ok(()),
        }
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

/// Splits `tokens` into consecutive chunks of `chunk_size` (the last may be
/// shorter). Empty input gives no chunks.
pub fn chunk_tokens(tokens: &TokenSequence, chunk_size: usize) -> Vec<TokenSequence> {
    assert!(chunk_size >= 1, "chunk_size must be positive");
    tokens.0.chunks(chunk_size).map(|c| TokenSequence(c.to_vec())).collect()
}

/// A `rows × D` block of embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix(Matrix);

impl EmbeddingMatrix {
    pub fn new(values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::Format("embedding contains non-finite values".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros(rows: usize, dim: usize) -> Self {
        Self(Matrix::zeros(rows, dim))
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Where embeddings come from.
#[derive(Debug, Clone, Default)]
pub enum EncoderPlugin {
    /// Parameters held in the model's [`ParamStore`].
    #[default]
    Builtin,
    /// A remote service speaking the JSON line protocol.
    External(ExternalEncoder),
}

/// Client for an out-of-process encoder.
///
/// Request: `{"modality": "text"|"image", "payload": ...}`; text payloads are
/// token id lists, image payloads are [`ImageRecord`]s. Reply:
/// `{"rows": r, "dim": d, "values": [r*d floats, row-major]}`.
#[derive(Debug, Clone)]
pub struct ExternalEncoder {
    transport: Arc<Transport>,
}

impl ExternalEncoder {
    pub fn new(transport: Arc<Transport>) -> Self {
        Self { transport }
    }

    fn call(&self, modality: &str, payload: serde_json::Value, expect_rows: usize, dim: usize) -> Result<Matrix> {
        let reply = self.transport.request(&json!({ "modality": modality, "payload": payload }))?;
        #[derive(Deserialize)]
        struct Reply {
            rows: usize,
            dim: usize,
            values: Vec<f64>,
        }
        let r: Reply = serde_json::from_value(reply)
            .map_err(|e| Error::Transport(format!("malformed encoder reply: {e}")))?;
        if r.dim != dim {
            return Err(Error::Config(format!("external {modality} encoder returned width {} but model width is {dim}", r.dim)));
        }
        if r.rows != expect_rows || r.values.len() != r.rows * r.dim {
            return Err(Error::Transport(format!(
                "external {modality} encoder returned {} rows / {} values for {expect_rows} inputs",
                r.rows,
                r.values.len()
            )));
        }
        let m = Matrix::from_vec(r.rows, r.dim, r.values);
        if !m.is_finite() {
            return Err(Error::Transport(format!("external {modality} encoder returned non-finite values")));
        }
        Ok(m)
    }
}

/// Token-embedding lookup (builtin) or an external text encoder.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub plugin: EncoderPlugin,
    pub embedding: ParamId,
    pub dim: usize,
}

impl TextEncoder {
    pub fn init(store: &mut ParamStore, name: &str, vocab_size: usize, dim: usize, rng: &mut Rng) -> Self {
        let embedding = store.insert(format!("{name}.embedding"), Matrix::uniform(vocab_size, dim, 1.0, rng));
        Self { plugin: EncoderPlugin::Builtin, embedding, dim }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Self {
        let embedding = store.expect_id(&format!("{name}.embedding"));
        Self { plugin: EncoderPlugin::Builtin, embedding, dim: store.get(embedding).cols() }
    }

    pub fn with_plugin(mut self, plugin: EncoderPlugin) -> Self {
        self.plugin = plugin;
        self
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.get(self.embedding).rows()
    }

    pub fn encode_var(&self, g: &mut Graph, store: &ParamStore, tokens: &TokenSequence) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Precondition("cannot encode an empty token sequence".into()));
        }
        match &self.plugin {
            EncoderPlugin::Builtin => {
                tokens.validate(self.vocab_size(store))?;
                let table = g.param(store, self.embedding);
                let ids: Vec<usize> = tokens.ids().iter().map(|&i| i as usize).collect();
                Ok(g.gather(table, &ids))
            }
            EncoderPlugin::External(ext) => {
                let m = ext.call("text", json!(tokens.ids()), tokens.len(), self.dim)?;
                Ok(g.input(m))
            }
        }
    }

    pub fn encode(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<EmbeddingMatrix> {
        let mut g = Graph::new();
        let v = self.encode_var(&mut g, store, tokens)?;
        EmbeddingMatrix::new(g.value(v).clone())
    }
}

pub const IMAGE_FORMAT_VERSION: u32 = 1;

/// Stored per-patch feature vectors standing in for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub format_version: u32,
    pub patches: Vec<Vec<f64>>,
}

impl ImageRecord {
    pub fn new(patches: Vec<Vec<f64>>) -> Self {
        Self { format_version: IMAGE_FORMAT_VERSION, patches }
    }

    pub fn parse(raw: &str) -> Result<Self> {
        let rec: ImageRecord =
            serde_json::from_str(raw).map_err(|e| Error::Format(format!("unparseable image record: {e}")))?;
        if rec.format_version != IMAGE_FORMAT_VERSION {
            return Err(Error::Format(format!("image record version {} (expected {IMAGE_FORMAT_VERSION})", rec.format_version)));
        }
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        let width = self.patches.first().map(Vec::len).unwrap_or(0);
        if width == 0 {
            return Err(Error::Format("image record has no patch features".into()));
        }
        if self.patches.iter().any(|p| p.len() != width) {
            return Err(Error::Format("image record has ragged patch vectors".into()));
        }
        if self.patches.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Format("image record has non-finite features".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.patches.first().map_or(0, Vec::len)
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.patches)
    }
}

/// Linear patch projection (builtin) or an external image encoder.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub plugin: EncoderPlugin,
    pub projection: Linear,
    pub feature_dim: usize,
    pub dim: usize,
}

impl ImageEncoder {
    pub fn init(store: &mut ParamStore, name: &str, feature_dim: usize, dim: usize, rng: &mut Rng) -> Self {
        let scale = (3.0 / feature_dim as f64).sqrt();
        let projection = Linear::init(store, &format!("{name}.projection"), feature_dim, dim, scale, true, rng);
        Self { plugin: EncoderPlugin::Builtin, projection, feature_dim, dim }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Self {
        let projection = Linear::from_store(store, &format!("{name}.projection"));
        let (feature_dim, dim) = store.get(projection.weight).shape();
        Self { plugin: EncoderPlugin::Builtin, projection, feature_dim, dim }
    }

    pub fn with_plugin(mut self, plugin: EncoderPlugin) -> Self {
        self.plugin = plugin;
        self
    }

    pub fn encode_var(&self, g: &mut Graph, store: &ParamStore, image: &ImageRecord) -> Result<Var> {
        image.validate()?;
        match &self.plugin {
            EncoderPlugin::Builtin => {
                if image.feature_dim() != self.feature_dim {
                    return Err(Error::Config(format!(
                        "image features have width {} but the encoder expects {}",
                        image.feature_dim(),
                        self.feature_dim
                    )));
                }
                let x = g.input(image.to_matrix());
                Ok(self.projection.forward(g, store, x))
            }
            EncoderPlugin::External(ext) => {
                let m = ext.call("image", serde_json::to_value(image)?, image.patches.len(), self.dim)?;
                Ok(g.input(m))
            }
        }
    }

    pub fn encode(&self, store: &ParamStore, image: &ImageRecord) -> Result<EmbeddingMatrix> {
        let mut g = Graph::new();
        let v = self.encode_var(&mut g, store, image)?;
        EmbeddingMatrix::new(g.value(v).clone())
    }

    /// Parses a stored record and encodes it.
    pub fn encode_raw(&self, store: &ParamStore, raw: &str) -> Result<EmbeddingMatrix> {
        self.encode(store, &ImageRecord::parse(raw)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::transport::Endpoint;
    use proptest::prelude::*;
    use std::time::Duration;

    #[test]
    fn chunk_examples() {
        let seq = TokenSequence::new((0..2500).collect());
        let sizes: Vec<usize> = chunk_tokens(&seq, 1024).iter().map(TokenSequence::len).collect();
        assert_eq!(sizes, vec![1024, 1024, 452]);
        assert!(chunk_tokens(&TokenSequence::default(), 1024).is_empty());
        let exact = TokenSequence::new((0..1024).collect());
        assert_eq!(chunk_tokens(&exact, 1024), vec![exact.clone()]);
    }

    proptest! {
        #[test]
        fn chunking_is_a_partition(ids in prop::collection::vec(0u32..50, 0..300), size in 1usize..64) {
            let seq = TokenSequence::new(ids.clone());
            let chunks = chunk_tokens(&seq, size);
            let flat: Vec<u32> = chunks.iter().flat_map(|c| c.ids().to_vec()).collect();
            prop_assert_eq!(flat, ids);
            if let Some((last, rest)) = chunks.split_last() {
                prop_assert!(rest.iter().all(|c| c.len() == size));
                prop_assert!(!last.is_empty() && last.len() <= size);
            }
        }
    }

    fn text_encoder(dim: usize) -> (ParamStore, TextEncoder) {
        let mut store = ParamStore::new();
        let enc = TextEncoder::init(&mut store, "text", 20, dim, &mut seeded(1));
        (store, enc)
    }

    #[test]
    fn text_encoding_shape_and_determinism() {
        let (store, enc) = text_encoder(16);
        let toks = TokenSequence::new(vec![5, 6, 7, 8, 9, 10, 11]);
        let a = enc.encode(&store, &toks).unwrap();
        assert_eq!((a.rows(), a.dim()), (7, 16));
        assert_eq!(a, enc.encode(&store, &toks).unwrap());
    }

    #[test]
    fn zero_table_gives_zero_embeddings() {
        let (mut store, enc) = text_encoder(8);
        *store.get_mut(enc.embedding) = Matrix::zeros(20, 8);
        let m = enc.encode(&store, &TokenSequence::new(vec![1, 2, 3])).unwrap();
        assert!(m.matrix().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn text_encoding_rejects_empty_and_out_of_range() {
        let (store, enc) = text_encoder(8);
        assert!(matches!(enc.encode(&store, &TokenSequence::default()), Err(Error::Precondition(_))));
        assert!(matches!(enc.encode(&store, &TokenSequence::new(vec![99])), Err(Error::Validation(_))));
    }

    fn image_encoder() -> (ParamStore, ImageEncoder) {
        let mut store = ParamStore::new();
        let enc = ImageEncoder::init(&mut store, "image", 6, 12, &mut seeded(2));
        (store, enc)
    }

    #[test]
    fn image_encoding_shape_errors_and_determinism() {
        let (store, enc) = image_encoder();
        let rec = ImageRecord::new((0..4).map(|i| vec![i as f64 * 0.1; 6]).collect());
        let raw = serde_json::to_string(&rec).unwrap();
        let a = enc.encode_raw(&store, &raw).unwrap();
        assert_eq!((a.rows(), a.dim()), (4, 12));
        assert_eq!(a, enc.encode_raw(&store, &raw).unwrap());
        assert!(matches!(enc.encode_raw(&store, "{\"format_version\": 1, \"patches\": [[1.0], [2.0, 3.0]]}"), Err(Error::Format(_))));
        assert!(matches!(enc.encode_raw(&store, "not json"), Err(Error::Format(_))));
        let narrow = ImageRecord::new(vec![vec![0.0; 3]]);
        assert!(matches!(enc.encode(&store, &narrow), Err(Error::Config(_))));
    }

    fn python_encoder(dim_reply: usize) -> ExternalEncoder {
        let script = format!(
            "import sys, json\n\
             for line in sys.stdin:\n\
             \x20   req = json.loads(line)\n\
             \x20   p = req['payload']\n\
             \x20   n = len(p) if req['modality'] == 'text' else len(p['patches'])\n\
             \x20   print(json.dumps({{'rows': n, 'dim': {dim_reply}, 'values': [0.5] * (n * {dim_reply})}}), flush=True)\n"
        );
        let transport = Transport::new(
            Endpoint::Process { program: "python3".into(), args: vec!["-c".into(), script] },
            Duration::from_secs(20),
        );
        ExternalEncoder::new(Arc::new(transport))
    }

    #[test]
    fn external_encoder_round_trip() {
        let (store, enc) = text_encoder(4);
        let enc = enc.with_plugin(EncoderPlugin::External(python_encoder(4)));
        let m = enc.encode(&store, &TokenSequence::new(vec![1, 2, 3])).unwrap();
        assert_eq!((m.rows(), m.dim()), (3, 4));
        assert!(m.matrix().data().iter().all(|&v| v == 0.5));

        let (istore, ienc) = image_encoder();
        let ienc = ienc.with_plugin(EncoderPlugin::External(python_encoder(12)));
        let rec = ImageRecord::new(vec![vec![0.0; 6]; 2]);
        assert_eq!(ienc.encode(&istore, &rec).unwrap().rows(), 2);
    }

    #[test]
    fn external_width_mismatch_is_a_configuration_error() {
        let (store, enc) = text_encoder(4);
        let enc = enc.with_plugin(EncoderPlugin::External(python_encoder(5)));
        assert!(matches!(enc.encode(&store, &TokenSequence::new(vec![1])), Err(Error::Config(_))));
    }

    #[test]
    fn unreachable_external_encoder_is_a_transport_error() {
        let (store, enc) = text_encoder(4);
        let t = Transport::new(Endpoint::parse("process:/no/such/encoder").unwrap(), Duration::from_secs(1));
        let enc = enc.with_plugin(EncoderPlugin::External(ExternalEncoder::new(Arc::new(t))));
        assert!(matches!(enc.encode(&store, &TokenSequence::new(vec![1])), Err(Error::Transport(_))));
    }
}
