//! Global (patching transformer) and multi-scale local (convolutional) encoders.

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Attention, BatchNorm, Forward, LayerNorm, Linear, TransformerBlock};
use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Var};
use crate::Float;

/// Patch projection, within-patch self-attention, learnable positional
/// encoding and a stack of pre-norm transformer blocks.
#[derive(Debug, Clone)]
pub struct GlobalEncoder {
    pub proj: Linear,
    pub patch_attn: Attention,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub final_norm: LayerNorm,
    num_patches: usize,
    patch_len: usize,
    channels: usize,
    d_model: usize,
}

impl GlobalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore<Float>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let m = cfg.num_patches();
        let proj = Linear::new(store, "global.proj", cfg.channels, d, true, rng);
        let patch_attn = Attention::new(store, "global.patch_attn", d, d, d, d, rng);
        let pos = store.add_uniform("global.pos", &[m, d], d, rng);
        let blocks = (0..cfg.transformer_layers)
            .map(|i| TransformerBlock::new(store, &format!("global.block{i}"), d, cfg.transformer_heads, rng))
            .collect();
        let final_norm = LayerNorm::new(store, "global.norm", d);
        Self {
            proj,
            patch_attn,
            pos,
            blocks,
            final_norm,
            num_patches: m,
            patch_len: cfg.patch_len,
            channels: cfg.channels,
            d_model: d,
        }
    }

    /// `patches: [B, M, P, d]` → global representation `[B, M, D]`.
    pub fn forward(&self, f: &mut Forward, patches: Var) -> Result<Var> {
        let shape = f.graph.shape(patches).to_vec();
        if shape.len() != 4 || shape[1..] != [self.num_patches, self.patch_len, self.channels] {
            return Err(Error::shape(format!(
                "global encoder expects [B, {}, {}, {}], got {shape:?}",
                self.num_patches, self.patch_len, self.channels
            )));
        }
        let b = shape[0];
        let x = f
            .graph
            .reshape(patches, &[b * self.num_patches, self.patch_len, self.channels])?;
        let o = self.proj.forward(f, x)?;
        let (attn, _) = self.patch_attn.forward(f, o, o)?;
        let o = f.graph.add(o, attn)?;
        let o = f.graph.mean_axis(o, 1)?;
        let o = f.graph.reshape(o, &[b, self.num_patches, self.d_model])?;
        let pos = f.p(self.pos);
        let mut h = f.graph.add(o, pos)?;
        for block in &self.blocks {
            h = block.forward(f, h)?;
        }
        self.final_norm.forward(f, h)
    }
}

/// One convolution stack: `K` stages of valid stride-1 conv, batch norm, ReLU.
#[derive(Debug, Clone)]
pub struct ConvStack {
    pub kernel: usize,
    pub convs: Vec<ParamId>,
    pub norms: Vec<BatchNorm>,
}

impl ConvStack {
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let mut h = x;
        for (stage, (&w, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            let len = f.graph.shape(h)[1];
            if self.kernel > len {
                return Err(Error::BadConfig(format!(
                    "kernel {} exceeds length {len} at stage {}",
                    self.kernel,
                    stage + 1
                )));
            }
            let w = f.p(w);
            h = f.graph.conv1d(h, w, 1)?;
            h = bn.forward(f, h)?;
            h = f.graph.relu(h);
        }
        Ok(h)
    }
}

/// `N` convolution stacks with increasing kernel sizes.
#[derive(Debug, Clone)]
pub struct LocalEncoder {
    pub stacks: Vec<ConvStack>,
}

impl LocalEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore<Float>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let widths = cfg.stage_widths();
        let stacks = cfg
            .kernel_sizes
            .iter()
            .map(|&k| {
                let mut c_in = cfg.channels;
                let mut convs = Vec::new();
                let mut norms = Vec::new();
                for (s, &c_out) in widths.iter().enumerate() {
                    let name = format!("local.k{k}.stage{s}");
                    convs.push(store.add_uniform(format!("{name}.conv"), &[k, c_in, c_out], k * c_in, rng));
                    norms.push(BatchNorm::new(store, &format!("{name}.bn"), c_out));
                    c_in = c_out;
                }
                ConvStack {
                    kernel: k,
                    convs,
                    norms,
                }
            })
            .collect();
        Self { stacks }
    }

    /// `x: [B, T, d]` → one `[B, T − K·(kernel−1), d_emb]` tensor per kernel size.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Vec<Var>> {
        self.stacks.iter().map(|s| s.forward(f, x)).collect()
    }
}
