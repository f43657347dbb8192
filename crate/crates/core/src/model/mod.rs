//! The two-branch encoder `F`, fusion module `G`, classifier `C` and domain
//! discriminator `D`, with their weights in one [`ParamStore`].

pub mod config;
pub mod encoders;
pub mod fusion;
pub mod heads;
pub mod layers;
pub mod patch;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use config::ModelConfig;
pub use encoders::{ConvStack, GlobalEncoder, LocalEncoder};
pub use fusion::{FusionModule, FusionOutput};
pub use heads::{Classifier, Discriminator};
pub use layers::{apply_bn_updates, BnUpdate, Forward};
pub use patch::{num_patches, patchify, PatchSequence};

use crate::error::{Error, Result};
use crate::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ParamId, ParamStore, Tensor, Var};
use crate::Float;

/// A mini-batch of series prepared for both encoder branches.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, T, d]`.
    pub series: Tensor<Float>,
    /// `[B, M, P, d]`.
    pub patches: Tensor<Float>,
}

impl Batch {
    /// Each series is `T × d` row-major.
    pub fn new(cfg: &ModelConfig, series: &[&[Float]]) -> Result<Self> {
        if series.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let (t, d) = (cfg.seq_len, cfg.channels);
        let m = cfg.num_patches();
        let mut flat = Vec::with_capacity(series.len() * t * d);
        let mut patches = Vec::with_capacity(series.len() * m * cfg.patch_len * d);
        for s in series {
            if s.len() != t * d {
                return Err(Error::MetaMismatch(format!(
                    "series has {} values, model expects {t}×{d}",
                    s.len()
                )));
            }
            flat.extend_from_slice(s);
            patches.extend(patchify(s, t, d, cfg.patch_len, cfg.stride)?.patches);
        }
        let b = series.len();
        Ok(Self {
            series: Tensor::new(vec![b, t, d], flat)?,
            patches: Tensor::new(vec![b, m, cfg.patch_len, d], patches)?,
        })
    }

    pub fn len(&self) -> usize {
        self.series.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Graph handles produced by one forward pass of `F`, `G` and `C`.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[B, M, D]`.
    pub global: Var,
    /// Per kernel size, `[B, l_emb, d_emb]`.
    pub locals: Vec<Var>,
    pub fusion: FusionOutput,
    /// `[B, C]`.
    pub logits: Var,
}

/// Global representation of one series, `M × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalRep(pub Tensor<Float>);

/// Local representations of one series, one `l_emb × d_emb` matrix per kernel size.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalRepSet {
    pub reps: Vec<Tensor<Float>>,
    pub kernel_sizes: Vec<usize>,
}

/// Fused classification feature of one series, length `d_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRep(pub Vec<Float>);

/// Inference-mode outputs for one series.
#[derive(Debug, Clone)]
pub struct Inference {
    pub global: GlobalRep,
    pub local: LocalRepSet,
    pub fused: FusedRep,
    /// Per kernel size, `M × l_emb` cross-attention weights.
    pub cross_attention: Vec<Tensor<Float>>,
    pub logits: Vec<Float>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore<Float>,
    pub global: GlobalEncoder,
    pub local: LocalEncoder,
    pub fusion: FusionModule,
    pub classifier: Classifier,
    pub discriminator: Discriminator,
    disc_params: Vec<ParamId>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let global = GlobalEncoder::new(&mut store, &config, &mut rng);
        let local = LocalEncoder::new(&mut store, &config, &mut rng);
        let fusion = FusionModule::new(&mut store, &config, &mut rng);
        let classifier = Classifier::new(&mut store, &config, &mut rng);
        let before = store.len();
        let discriminator = Discriminator::new(&mut store, &config, &mut rng);
        let disc_params = (before..store.len()).map(ParamId).collect();
        Ok(Self {
            config,
            store,
            global,
            local,
            fusion,
            classifier,
            discriminator,
            disc_params,
        })
    }

    /// Trainable parameters of the domain discriminator.
    pub fn discriminator_params(&self) -> Vec<ParamId> {
        self.disc_params.clone()
    }

    /// Trainable parameters of the encoders, fusion module and classifier.
    pub fn feature_params(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(id, p)| p.trainable && !self.disc_params.contains(id))
            .map(|(id, _)| id)
            .collect()
    }

    /// Runs `F`, `G` and `C` on a batch inside `f`'s graph.
    pub fn forward(&self, f: &mut Forward, batch: &Batch) -> Result<ForwardOutput> {
        let patches = f.graph.constant(batch.patches.clone());
        let series = f.graph.constant(batch.series.clone());
        let global = self.global.forward(f, patches)?;
        let locals = self.local.forward(f, series)?;
        let fusion = self.fusion.forward(f, global, &locals)?;
        let logits = self.classifier.forward(f, fusion.fused)?;
        Ok(ForwardOutput {
            global,
            locals,
            fusion,
            logits,
        })
    }

    /// Source-domain probabilities `[B]` for fused features `[B, d_v]`.
    pub fn discriminate(&self, f: &mut Forward, fused: Var) -> Result<Var> {
        self.discriminator.forward(f, fused)
    }

    /// Inference-mode logits `[B, C]` for a set of series.
    pub fn logits(&self, series: &[&[Float]]) -> Result<Tensor<Float>> {
        let batch = Batch::new(&self.config, series)?;
        let mut f = Forward::new(&self.store, false);
        let out = self.forward(&mut f, &batch)?;
        Ok(f.graph.value(out.logits).clone())
    }

    /// Arg-max class of each series (first maximum on ties).
    pub fn predict(&self, series: &[&[Float]]) -> Result<Vec<usize>> {
        let logits = self.logits(series)?;
        let c = self.config.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0, Float::NEG_INFINITY),
                        |best, (i, &v)| if v > best.1 { (i, v) } else { best },
                    )
                    .0
            })
            .collect())
    }

    /// Every intermediate representation of one series, in inference mode.
    pub fn infer(&self, series: &[Float]) -> Result<Inference> {
        let batch = Batch::new(&self.config, &[series])?;
        let mut f = Forward::new(&self.store, false);
        let out = self.forward(&mut f, &batch)?;
        let g = &f.graph;
        let drop_batch = |v: Var| -> Result<Tensor<Float>> {
            let t = g.value(v).clone();
            let shape = t.shape()[1..].to_vec();
            t.reshape(&shape)
        };
        Ok(Inference {
            global: GlobalRep(drop_batch(out.global)?),
            local: LocalRepSet {
                reps: out.locals.iter().map(|&v| drop_batch(v)).collect::<Result<_>>()?,
                kernel_sizes: self.config.kernel_sizes.clone(),
            },
            fused: FusedRep(g.value(out.fusion.fused).data().to_vec()),
            cross_attention: out
                .fusion
                .cross_weights
                .iter()
                .map(|&v| drop_batch(v))
                .collect::<Result<_>>()?,
            logits: g.value(out.logits).data().to_vec(),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint<Float> {
        let meta = serde_json::to_string(&CheckpointMeta {
            model: self.config.clone(),
        })
        .expect("config serializes");
        Checkpoint {
            meta,
            tensors: self.store.named_values(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<Float>) -> Result<Self> {
        let meta: CheckpointMeta =
            serde_json::from_str(&ckpt.meta).map_err(|e| Error::FormatError(format!("checkpoint metadata: {e}")))?;
        let mut model = Self::new(meta.model, 0)?;
        model.store.load_named(&ckpt.tensors)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&read_checkpoint(path)?)
    }
}
