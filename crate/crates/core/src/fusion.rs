//! Claim-conditioned visual selection and the fused policy input.
//!
//! Claim rows query the image rows through one attention block, the result
//! is mapped row-wise through a linear projection and stacked on top of the
//! document representation: `[proj(attend(claim, images)); documents]`.

use crate::encoding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::nn::{Attention, Linear};
use crate::rng::Rng;
use crate::tensor::{Graph, Matrix, ParamStore, Var};

/// Default init half-width for fusion weights.
pub const DEFAULT_INIT_SCALE: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub attention: Attention,
    /// Row-wise projection of the attended claim rows (weight plus bias).
    pub projection: Linear,
    pub dim: usize,
}

#[derive(Debug, Clone)]
pub struct CrossAttendOutput {
    pub out: Var,
    /// Per-head `claim rows × image rows` weights; empty for text-only input.
    pub weights: Vec<Var>,
}

impl FusionParams {
    /// Weights uniform in `±init_scale`, projection bias zero.
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, heads: usize, init_scale: f64, rng: &mut Rng) -> Self {
        let attention = Attention::init(store, &format!("{name}.attention"), dim, heads, init_scale, rng);
        let projection = Linear::init(store, &format!("{name}.projection"), dim, dim, init_scale, true, rng);
        Self { attention, projection, dim }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Self {
        let projection = Linear::from_store(store, &format!("{name}.projection"));
        let dim = store.get(projection.weight).cols();
        Self { attention: Attention::from_store(store, &format!("{name}.attention")), projection, dim }
    }

    /// Claim rows attend over image rows. With no image rows the result is a
    /// zero matrix with the claim's row count.
    pub fn cross_attend(&self, g: &mut Graph, store: &ParamStore, claim: Var, images: Option<Var>) -> Result<CrossAttendOutput> {
        let (rows, cdim) = g.shape(claim);
        if cdim != self.dim {
            return Err(Error::Config(format!("claim width {cdim} does not match fusion width {}", self.dim)));
        }
        let images = match images {
            Some(v) if g.shape(v).0 > 0 => v,
            _ => {
                let out = g.input(Matrix::zeros(rows, self.dim));
                return Ok(CrossAttendOutput { out, weights: Vec::new() });
            }
        };
        if g.shape(images).1 != self.dim {
            return Err(Error::Config(format!("image width {} does not match fusion width {}", g.shape(images).1, self.dim)));
        }
        let a = self.attention.forward(g, store, claim, images, None);
        Ok(CrossAttendOutput { out: a.out, weights: a.weights })
    }

    /// `[x_ic θ + b; x_d]`, projected rows first.
    pub fn project_concat(&self, g: &mut Graph, store: &ParamStore, x_ic: Var, x_d: Var) -> Result<Var> {
        let out_dim = store.get(self.projection.weight).cols();
        if g.shape(x_d).1 != out_dim {
            return Err(Error::Config(format!("document width {} does not match projection output {out_dim}", g.shape(x_d).1)));
        }
        if g.shape(x_ic).1 != store.get(self.projection.weight).rows() {
            return Err(Error::Config("attended claim width does not match projection input".into()));
        }
        let projected = self.projection.forward(g, store, x_ic);
        Ok(g.concat_rows(&[projected, x_d]))
    }
}

/// The stacked policy input: projected claim/image rows, then document rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedInput {
    pub values: Matrix,
    pub claim_rows: usize,
}

impl FusedInput {
    pub fn rows(&self) -> usize {
        self.values.rows()
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    pub fn projected_part(&self) -> Matrix {
        self.values.slice_rows(0, self.claim_rows)
    }

    pub fn document_part(&self) -> Matrix {
        self.values.slice_rows(self.claim_rows, self.values.rows())
    }
}

/// Value-level cross-attention.
pub fn cross_attend(claim: &EmbeddingMatrix, images: &EmbeddingMatrix, params: &FusionParams, store: &ParamStore) -> Result<EmbeddingMatrix> {
    let mut g = Graph::new();
    let c = g.input(claim.matrix().clone());
    let i = (images.rows() > 0).then(|| g.input(images.matrix().clone()));
    let out = params.cross_attend(&mut g, store, c, i)?;
    EmbeddingMatrix::new(g.value(out.out).clone())
}

/// Value-level projection and concatenation.
pub fn project_concat(x_ic: &EmbeddingMatrix, x_d: &EmbeddingMatrix, params: &FusionParams, store: &ParamStore) -> Result<FusedInput> {
    let mut g = Graph::new();
    let a = g.input(x_ic.matrix().clone());
    let d = g.input(x_d.matrix().clone());
    let out = params.project_concat(&mut g, store, a, d)?;
    Ok(FusedInput { values: g.value(out).clone(), claim_rows: x_ic.rows() })
}
