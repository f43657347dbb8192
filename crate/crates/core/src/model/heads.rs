use rand::Rng;

use super::config::ModelConfig;
use super::layers::{Forward, Linear};
use crate::error::Result;
use crate::tensor::{ParamStore, Var};
use crate::Float;

/// Linear classifier `d_v → C`.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub linear: Linear,
}

impl Classifier {
    pub fn new<R: Rng>(store: &mut ParamStore<Float>, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            linear: Linear::new(store, "classifier", cfg.d_v, cfg.num_classes, true, rng),
        }
    }

    pub fn forward(&self, f: &mut Forward, fused: Var) -> Result<Var> {
        self.linear.forward(f, fused)
    }
}

/// Two-layer perceptron `d_v → hidden → 1` with a sigmoid output: the
/// probability that a fused feature came from the source domain.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub hidden: Linear,
    pub out: Linear,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore<Float>, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            hidden: Linear::new(store, "discriminator.hidden", cfg.d_v, cfg.disc_hidden, true, rng),
            out: Linear::new(store, "discriminator.out", cfg.disc_hidden, 1, true, rng),
        }
    }

    /// `fused: [B, d_v]` → probabilities `[B]`.
    pub fn forward(&self, f: &mut Forward, fused: Var) -> Result<Var> {
        let b = f.graph.shape(fused)[0];
        let h = self.hidden.forward(f, fused)?;
        let h = f.graph.relu(h);
        let logit = self.out.forward(f, h)?;
        let p = f.graph.sigmoid(logit);
        f.graph.reshape(p, &[b])
    }
}
