//! Cross-attention fusion of the global tokens with each local stream.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{scaled_dot_attention, Attention, Forward, Linear};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Var};
use crate::Float;

/// Output of one fusion pass.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// `[B, d_v]`.
    pub fused: Var,
    /// Per scale, `[B, M, d_v]`.
    pub cross: Vec<Var>,
    /// Per scale, `[B, M, l_emb]`; rows sum to one.
    pub cross_weights: Vec<Var>,
    /// `[B, N·M, N·M]`.
    pub self_weights: Var,
}

/// Queries come from the global tokens; keys and values from each local
/// stream through projections shared by every scale. The concatenated
/// cross-attention outputs pass through one position-free self-attention
/// block (with residual) and are summed over positions.
#[derive(Debug, Clone)]
pub struct FusionModule {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub self_attn: Attention,
}

impl FusionModule {
    pub fn new<R: Rng>(store: &mut ParamStore<Float>, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            query: Linear::new(store, "fusion.q", cfg.d_model, cfg.d_k, false, rng),
            key: Linear::new(store, "fusion.k", cfg.d_emb, cfg.d_k, false, rng),
            value: Linear::new(store, "fusion.v", cfg.d_emb, cfg.d_v, false, rng),
            self_attn: Attention::new(store, "fusion.self", cfg.d_v, cfg.d_v, cfg.d_v, cfg.d_v, rng),
        }
    }

    /// `softmax(Q Kᵀ/√d_k) V` for one local stream; returns output and weights.
    pub fn cross_attend(&self, f: &mut Forward, q: Var, local: Var) -> Result<(Var, Var)> {
        let k = self.key.forward(f, local)?;
        let v = self.value.forward(f, local)?;
        scaled_dot_attention(&mut f.graph, q, k, v)
    }

    pub fn forward(&self, f: &mut Forward, global: Var, locals: &[Var]) -> Result<FusionOutput> {
        if locals.is_empty() {
            return Err(Error::shape("fusion needs at least one local representation"));
        }
        let q = self.query.forward(f, global)?;
        let mut cross = Vec::with_capacity(locals.len());
        let mut cross_weights = Vec::with_capacity(locals.len());
        for &l in locals {
            let (o, w) = self.cross_attend(f, q, l)?;
            cross.push(o);
            cross_weights.push(w);
        }
        let cat = if cross.len() == 1 {
            cross[0]
        } else {
            f.graph.concat(&cross, 1)?
        };
        let (attn, self_weights) = self.self_attn.forward(f, cat, cat)?;
        let h = f.graph.add(cat, attn)?;
        let fused = f.graph.sum_axis(h, 1)?;
        Ok(FusionOutput {
            fused,
            cross,
            cross_weights,
            self_weights,
        })
    }
}
