//! Parameterized building blocks shared by the encoders, fusion module and heads.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{BatchStats, Graph, ParamId, ParamStore, Var};
use crate::Float;

pub const BN_EPS: Float = 1e-5;
pub const BN_MOMENTUM: Float = 0.1;
pub const LN_EPS: Float = 1e-5;

/// Running-statistics update recorded by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats<Float>,
}

/// A forward pass in progress: the graph plus read-only access to the weights.
pub struct Forward<'a> {
    pub graph: Graph<Float>,
    pub store: &'a ParamStore<Float>,
    pub train: bool,
    pub bn_updates: Vec<BnUpdate>,
}

impl<'a> Forward<'a> {
    pub fn new(store: &'a ParamStore<Float>, train: bool) -> Self {
        Self {
            graph: Graph::new(),
            store,
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.graph.param(self.store, id)
    }
}

/// Folds recorded batch statistics into the running buffers:
/// `r ← (1 − m)·r + m·batch`, with the unbiased batch variance.
pub fn apply_bn_updates(store: &mut ParamStore<Float>, updates: &[BnUpdate]) {
    for u in updates {
        let n = u.stats.count as Float;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let rm = store.value_mut(u.running_mean).data_mut();
        for (r, &b) in rm.iter_mut().zip(&u.stats.mean) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let rv = store.value_mut(u.running_var).data_mut();
        for (r, &b) in rv.iter_mut().zip(&u.stats.var) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore<Float>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.w"), &[d_in, d_out], d_in, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.b"), &[d_out]));
        Self { w, b }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let w = f.p(self.w);
        let y = f.graph.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = f.p(b);
                f.graph.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore<Float>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add_ones(format!("{name}.gamma"), &[width]),
            beta: store.add_zeros(format!("{name}.beta"), &[width]),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let g = f.p(self.gamma);
        let b = f.p(self.beta);
        f.graph.layer_norm(x, g, b, LN_EPS)
    }
}

/// Batch norm over every axis but the channel (last) axis.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore<Float>, name: &str, width: usize) -> Self {
        let gamma = store.add_ones(format!("{name}.gamma"), &[width]);
        let beta = store.add_zeros(format!("{name}.beta"), &[width]);
        let running_mean = store.add(
            format!("{name}.running_mean"),
            crate::tensor::Tensor::zeros(&[width]),
            false,
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            crate::tensor::Tensor::full(&[width], 1.0),
            false,
        );
        Self {
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let g = f.p(self.gamma);
        let b = f.p(self.beta);
        if f.train {
            let (y, stats) = f.graph.batch_norm_train(x, g, b, BN_EPS)?;
            f.bn_updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            let mean = f.store.value(self.running_mean).data().to_vec();
            let var = f.store.value(self.running_var).data().to_vec();
            f.graph.batch_norm_eval(x, g, b, &mean, &var, BN_EPS)
        }
    }
}

/// `softmax(q kᵀ / √d) v` over `[B, L, d]` operands. Returns the output and
/// the attention weights `[B, L_q, L_k]`.
pub fn scaled_dot_attention(g: &mut Graph<Float>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let d = *g.shape(q).last().unwrap() as Float;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, 1.0 / d.sqrt());
    let weights = g.softmax(scores);
    let out = g.bmm(weights, v, false)?;
    Ok((out, weights))
}

/// Single-head attention with its own query/key/value projections.
#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

impl Attention {
    pub fn new<R: Rng>(
        store: &mut ParamStore<Float>,
        name: &str,
        d_q_in: usize,
        d_kv_in: usize,
        d_k: usize,
        d_v: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_q_in, d_k, false, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv_in, d_k, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv_in, d_v, false, rng),
        }
    }

    /// Queries from `x_q: [B, L_q, ·]`, keys and values from `x_kv: [B, L_k, ·]`.
    pub fn forward(&self, f: &mut Forward, x_q: Var, x_kv: Var) -> Result<(Var, Var)> {
        let q = self.q.forward(f, x_q)?;
        let k = self.k.forward(f, x_kv)?;
        let v = self.v.forward(f, x_kv)?;
        scaled_dot_attention(&mut f.graph, q, k, v)
    }
}

/// Multi-head self-attention with an output projection.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub heads: Vec<Attention>,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(store: &mut ParamStore<Float>, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        let dh = width / heads;
        let heads = (0..heads)
            .map(|h| Attention::new(store, &format!("{name}.head{h}"), width, width, dh, dh, rng))
            .collect();
        Self {
            heads,
            out: Linear::new(store, &format!("{name}.out"), width, width, true, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let outs = self
            .heads
            .iter()
            .map(|h| h.forward(f, x, x).map(|(o, _)| o))
            .collect::<Result<Vec<_>>>()?;
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            f.graph.concat(&outs, 2)?
        };
        self.out.forward(f, cat)
    }
}

/// Pre-norm transformer encoder block: `x + MHA(LN(x))`, then `x + FFN(LN(x))`
/// with a GELU feed-forward of width `4·D`.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl TransformerBlock {
    pub fn new<R: Rng>(store: &mut ParamStore<Float>, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            ff1: Linear::new(store, &format!("{name}.ff1"), width, 4 * width, true, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), 4 * width, width, true, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.ln1.forward(f, x)?;
        let h = self.attn.forward(f, h)?;
        let x = f.graph.add(x, h)?;
        let h = self.ln2.forward(f, x)?;
        let h = self.ff1.forward(f, h)?;
        let h = f.graph.gelu(h);
        let h = self.ff2.forward(f, h)?;
        f.graph.add(x, h)
    }
}
