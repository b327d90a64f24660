//! Layers and optimizers shared by the encoders, the fusion block, the
//! summarization policy and the entailment classifier.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{GradAccumulator, Graph, Matrix, ParamId, ParamStore, Var};

/// Additive mask value for disallowed attention positions.
pub const MASK_NEG: f64 = -1e9;

/// Affine map `x W + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        scale: f64,
        bias: bool,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.insert(format!("{name}.weight"), Matrix::uniform(input, output, scale, rng));
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Matrix::zeros(1, output)));
        Self { weight, bias }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Self {
        Self {
            weight: store.expect_id(&format!("{name}.weight")),
            bias: store.id(&format!("{name}.bias")),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Uniform init scale that keeps activations O(1) for a fan-in.
pub fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Layer norm with learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Matrix::filled(1, dim, 1.0)),
            bias: store.insert(format!("{name}.bias"), Matrix::zeros(1, dim)),
        }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Self {
        Self { gain: store.expect_id(&format!("{name}.gain")), bias: store.expect_id(&format!("{name}.bias")) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let n = g.layer_norm(x);
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        let scaled = g.mul_row(n, gain);
        g.add_row(scaled, bias)
    }
}

/// Scaled dot-product attention with per-head projections and an output
/// projection. Heads have their own `D × D/h` query/key/value matrices.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: Vec<ParamId>,
    pub key: Vec<ParamId>,
    pub value: Vec<ParamId>,
    pub output: ParamId,
}

/// Attention result plus the per-head weight matrices (rows sum to 1).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub out: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, heads: usize, scale: f64, rng: &mut Rng) -> Self {
        assert!(heads >= 1 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        let head_dim = dim / heads;
        let mut make = |kind: &str, rng: &mut Rng| {
            (0..heads)
                .map(|h| store.insert(format!("{name}.{kind}.{h}"), Matrix::uniform(dim, head_dim, scale, rng)))
                .collect::<Vec<_>>()
        };
        let query = make("query", rng);
        let key = make("key", rng);
        let value = make("value", rng);
        let output = store.insert(format!("{name}.output"), Matrix::uniform(dim, dim, scale, rng));
        Self { query, key, value, output }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Self {
        let collect = |kind: &str| {
            (0..)
                .map_while(|h| store.id(&format!("{name}.{kind}.{h}")))
                .collect::<Vec<_>>()
        };
        Self {
            query: collect("query"),
            key: collect("key"),
            value: collect("value"),
            output: store.expect_id(&format!("{name}.output")),
        }
    }

    pub fn heads(&self) -> usize {
        self.query.len()
    }

    /// `queries` attend over `keys_values`; `mask` (queries × keys) is added
    /// to the scores before the softmax.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: Var,
        keys_values: Var,
        mask: Option<&Matrix>,
    ) -> AttentionOutput {
        let mut heads = Vec::with_capacity(self.heads());
        let mut weights = Vec::with_capacity(self.heads());
        for h in 0..self.heads() {
            let wq = g.param(store, self.query[h]);
            let wk = g.param(store, self.key[h]);
            let wv = g.param(store, self.value[h]);
            let q = g.matmul(queries, wq);
            let k = g.matmul(keys_values, wk);
            let v = g.matmul(keys_values, wv);
            let head_dim = g.shape(q).1 as f64;
            let raw = g.matmul_t(q, k);
            let mut scores = g.scale(raw, 1.0 / head_dim.sqrt());
            if let Some(m) = mask {
                scores = g.add_const(scores, m);
            }
            let w = g.softmax_rows(scores);
            heads.push(g.matmul(w, v));
            weights.push(w);
        }
        let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) };
        let wo = g.param(store, self.output);
        AttentionOutput { out: g.matmul(joined, wo), weights }
    }
}

/// Position-wise two-layer GELU network.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            up: Linear::init(store, &format!("{name}.up"), dim, hidden, xavier(dim, hidden), true, rng),
            down: Linear::init(store, &format!("{name}.down"), hidden, dim, xavier(hidden, dim), true, rng),
        }
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Self {
        Self { up: Linear::from_store(store, &format!("{name}.up")), down: Linear::from_store(store, &format!("{name}.down")) }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Fixed sinusoidal position table (rows × dim).
pub fn sinusoidal_positions(rows: usize, dim: usize, offset: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, dim);
    for r in 0..rows {
        let pos = (r + offset) as f64;
        for c in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
            let v = if c % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
            m.set(r, c, v);
        }
    }
    m
}

/// Mask that hides future positions (upper triangle).
pub fn causal_mask(n: usize) -> Matrix {
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, MASK_NEG);
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// First-order optimizer over a subset of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: HashMap<ParamId, Matrix>,
    second: HashMap<ParamId, Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr, step: 0, first: HashMap::new(), second: HashMap::new() }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Descends along `grads` for every parameter accepted by `trainable`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &GradAccumulator, trainable: impl Fn(ParamId) -> bool) {
        self.step += 1;
        let mut ids: Vec<_> = grads.iter().map(|(id, _)| id).filter(|id| trainable(*id)).collect();
        ids.sort();
        for id in ids {
            let g = grads.get(id).expect("listed gradient");
            let (rows, cols) = g.shape();
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    let v = self.first.entry(id).or_insert_with(|| Matrix::zeros(rows, cols));
                    let p = store.get_mut(id);
                    for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                        *vv = momentum * *vv + gv;
                        *pv -= self.lr * *vv;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, epsilon } => {
                    let t = self.step as i32;
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    let m = self.first.entry(id).or_insert_with(|| Matrix::zeros(rows, cols));
                    let v = self.second.entry(id).or_insert_with(|| Matrix::zeros(rows, cols));
                    let p = store.get_mut(id);
                    for (((pv, mv), vv), gv) in
                        p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
                    {
                        *mv = beta1 * *mv + (1.0 - beta1) * gv;
                        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                        *pv -= self.lr * (*mv / c1) / ((*vv / c2).sqrt() + epsilon);
                    }
                }
            }
        }
    }
}
