use crate::error::{Error, Result};
use crate::nn::{xavier, Attention};
use crate::rng::Rng;
use crate::tensor::{Graph, Matrix, ParamId, ParamStore, Var};

use super::EmbeddingMatrix;

/// Learned latent queries, `count × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentArray {
    pub values: Matrix,
}

impl LatentArray {
    pub fn count(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }
}

/// Resampler: `L` latent queries cross-attend over every row of every
/// chunk, then one residual latent self-attention layer mixes the latents.
///
/// The cross-attention has no residual path, so each latent is a convex
/// combination of projected input rows. The block sees the concatenated
/// rows as a set; order information has to be carried by the rows.
#[derive(Debug, Clone)]
pub struct Perceiver {
    pub latents: ParamId,
    pub cross: Attention,
    pub latent_self: Attention,
}

#[derive(Debug, Clone)]
pub struct PerceiverOutput {
    /// Final `L × D` representation.
    pub out: Var,
    /// Output of the cross-attention layer alone.
    pub cross_out: Var,
    pub cross_weights: Vec<Var>,
    pub self_weights: Vec<Var>,
}

impl Perceiver {
    pub fn init(store: &mut ParamStore, name: &str, latent_count: usize, dim: usize, heads: usize, rng: &mut Rng) -> Self {
        let latents = store.insert(format!("{name}.latents"), Matrix::uniform(latent_count, dim, 1.0, rng));
        let scale = xavier(dim, dim / heads);
        let cross = Attention::init(store, &format!("{name}.cross"), dim, heads, scale, rng);
        let latent_self = Attention::init(store, &format!("{name}.self"), dim, heads, scale, rng);
        Self { latents, cross, latent_self }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Self {
        Self {
            latents: store.expect_id(&format!("{name}.latents")),
            cross: Attention::from_store(store, &format!("{name}.cross")),
            latent_self: Attention::from_store(store, &format!("{name}.self")),
        }
    }

    pub fn latent_array(&self, store: &ParamStore) -> LatentArray {
        LatentArray { values: store.get(self.latents).clone() }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, chunks: &[Var]) -> Result<PerceiverOutput> {
        if chunks.is_empty() {
            return Err(Error::Precondition("merge_chunks needs at least one chunk".into()));
        }
        let dim = store.get(self.latents).cols();
        if let Some(bad) = chunks.iter().find(|c| g.shape(**c).1 != dim) {
            return Err(Error::Config(format!("chunk width {} does not match latent width {dim}", g.shape(*bad).1)));
        }
        let input = if chunks.len() == 1 { chunks[0] } else { g.concat_rows(chunks) };
        let latents = g.param(store, self.latents);
        let cross = self.cross.forward(g, store, latents, input, None);
        let mixed = self.latent_self.forward(g, store, cross.out, cross.out, None);
        let out = g.add(cross.out, mixed.out);
        Ok(PerceiverOutput { out, cross_out: cross.out, cross_weights: cross.weights, self_weights: mixed.weights })
    }
}

/// Merges chunk embeddings into one `L × D` matrix.
pub fn merge_chunks(chunks: &[EmbeddingMatrix], perceiver: &Perceiver, store: &ParamStore) -> Result<EmbeddingMatrix> {
    let mut g = Graph::new();
    let vars: Vec<Var> = chunks.iter().map(|c| g.input(c.matrix().clone())).collect();
    let out = perceiver.forward(&mut g, store, &vars)?;
    EmbeddingMatrix::new(g.value(out.out).clone())
}
