//! Alternating adversarial training, prototype maintenance and evaluation.
//!
//! Each step pairs one source batch with one target batch. The discriminator
//! is updated first on detached fused features; then the encoders, fusion
//! module and classifier are updated on the weighted objective, in which the
//! domain term (evaluated with the freshly updated discriminator) enters with
//! a negative sign. Finally the class prototypes absorb the source batch.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::losses::{
    center_loss, classification_loss, domain_loss, dtw_triplet_loss, margin_triplet_loss, mine_triplets, total_loss,
    LossParts, LossWeights, PrototypeBank, Triplets,
};
use crate::model::{apply_bn_updates, Batch, BnUpdate, Forward, ForwardOutput, Model, ModelConfig};
use crate::tensor::{Adam, AdamConfig, Var};
use crate::Float;
use crate::{Graph, ParamStore};

/// Weight the previous prototype keeps on every update.
pub const PROTOTYPE_MOMENTUM: Float = 0.9;

/// Inference batch size used by [`evaluate`].
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: Float,
    pub seed: u64,
    pub weights: LossWeights,
    pub model: ModelConfig,
    /// The center loss is switched on from this (zero-based) epoch onwards,
    /// once the prototypes have seen a full pass over the source set.
    pub center_warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            model: ModelConfig::default(),
            center_warmup_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::BadConfig("epochs must be ≥ 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::BadConfig("batch_size must be ≥ 2".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::BadConfig(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// Means over one epoch's batches, plus accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss_cls: Float,
    pub loss_domain: Float,
    pub loss_margin: Float,
    pub loss_dtw: Float,
    pub loss_center: Float,
    /// Discriminator loss of the adversarial step.
    pub loss_disc: Float,
    /// Accuracy of the training-mode predictions on the source batches.
    pub source_accuracy: Float,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<Float>,
}

/// Everything that evolves during training besides the weights.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub opt_disc: Adam<Float>,
    pub opt_feat: Adam<Float>,
    pub bank: PrototypeBank<Float>,
    pub rng: ChaCha8Rng,
    pub history: Vec<EpochMetrics>,
}

impl TrainState {
    pub fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let adam = AdamConfig {
            lr: cfg.learning_rate,
            ..AdamConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Self {
            epoch: 0,
            opt_disc: Adam::new(&model.store, model.discriminator_params(), adam),
            opt_feat: Adam::new(&model.store, model.feature_params(), adam),
            bank: PrototypeBank::new(model.config.num_classes, model.config.d_v, PROTOTYPE_MOMENTUM),
            rng,
            history: Vec::new(),
        }
    }
}

/// A mini-batch together with its labels (absent for target data).
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub batch: Batch,
    pub labels: Option<Vec<usize>>,
}

impl LabeledBatch {
    pub fn from_indices(cfg: &ModelConfig, ds: &Dataset, idx: &[usize]) -> Result<Self> {
        let series: Vec<&[Float]> = idx.iter().map(|&i| ds.samples[i].values.as_slice()).collect();
        let labels = idx.iter().map(|&i| ds.samples[i].label).collect::<Option<Vec<_>>>();
        Ok(Self {
            batch: Batch::new(cfg, &series)?,
            labels,
        })
    }
}

/// The training-mode forward pass of both domains, kept alive across the
/// discriminator update so the feature step can reuse it.
pub struct DomainPass {
    pub graph: Graph,
    pub bn_updates: Vec<BnUpdate>,
    pub source: ForwardOutput,
    pub target: Option<ForwardOutput>,
    pub labels: Vec<usize>,
}

/// Runs `F`, `G`, `C` on the source batch and, when given, the target batch.
pub fn forward_domains(model: &Model, source: &LabeledBatch, target: Option<&LabeledBatch>) -> Result<DomainPass> {
    let labels = source.labels.clone().ok_or(Error::MissingLabels)?;
    let mut f = Forward::new(&model.store, true);
    let src = model.forward(&mut f, &source.batch)?;
    let tgt = target.map(|t| model.forward(&mut f, &t.batch)).transpose()?;
    Ok(DomainPass {
        graph: f.graph,
        bn_updates: f.bn_updates,
        source: src,
        target: tgt,
        labels,
    })
}

/// Updates the discriminator alone on detached fused features. Returns its
/// loss, or `None` when there is no target batch.
pub fn discriminator_step(model: &mut Model, state: &mut TrainState, pass: &DomainPass) -> Result<Option<Float>> {
    let Some(target) = &pass.target else {
        return Ok(None);
    };
    model.store.zero_grads();
    let mut f = Forward::new(&model.store, true);
    let zs = f.graph.constant(pass.graph.value(pass.source.fusion.fused).clone());
    let zt = f.graph.constant(pass.graph.value(target.fusion.fused).clone());
    let ds = model.discriminate(&mut f, zs)?;
    let dt = model.discriminate(&mut f, zt)?;
    let loss = domain_loss(&mut f.graph, Some(ds), Some(dt))?;
    f.graph.backward(loss)?;
    let value = f.graph.value(loss).data()[0];
    let graph = f.graph;
    graph.accumulate_param_grads(&mut model.store);
    state.opt_disc.step(&mut model.store)?;
    Ok(Some(value))
}

fn scalar(g: &Graph, v: Var) -> Float {
    g.value(v).data()[0]
}

/// Every loss term plus the weighted total, built on an existing forward.
pub struct Objective {
    pub parts: LossParts<Var>,
    pub total: Var,
}

/// Adds the loss terms to `f` for one source pass and optional target pass.
/// Terms with zero weight, or without the data they need, are the constant 0.
#[allow(clippy::too_many_arguments)]
pub fn build_objective(
    model: &Model,
    f: &mut Forward,
    source: &ForwardOutput,
    target: Option<&ForwardOutput>,
    labels: &[usize],
    triplets: &Triplets,
    bank: &PrototypeBank<Float>,
    weights: &LossWeights,
    center_active: bool,
) -> Result<Objective> {
    let zero = f.graph.constant(crate::Tensor::scalar(0.0));
    let mut parts = LossParts {
        cls: classification_loss(&mut f.graph, source.logits, labels)?,
        domain: zero,
        margin: zero,
        dtw: zero,
        center: zero,
    };
    if let Some(t) = target {
        if weights.lambda_domain > 0.0 {
            let ds = model.discriminate(f, source.fusion.fused)?;
            let dt = model.discriminate(f, t.fusion.fused)?;
            parts.domain = domain_loss(&mut f.graph, Some(ds), Some(dt))?;
        }
        if weights.lambda_center > 0.0 && center_active && bank.num_initialized() > 0 {
            parts.center = center_loss(&mut f.graph, t.fusion.fused, bank)?;
        }
    }
    if weights.lambda_margin > 0.0 {
        parts.margin = margin_triplet_loss(&mut f.graph, source.fusion.fused, labels, triplets, weights.beta)?;
    }
    if weights.lambda_dtw > 0.0 {
        parts.dtw = dtw_triplet_loss(&mut f.graph, source.global, labels, triplets, weights.alpha)?;
    }
    let total = total_loss(&mut f.graph, &parts, weights)?;
    Ok(Objective { parts, total })
}

/// Builds the weighted objective on the pass, updates the feature path and
/// returns the value of every term.
pub fn feature_step(
    model: &mut Model,
    state: &mut TrainState,
    pass: DomainPass,
    weights: &LossWeights,
    center_active: bool,
) -> Result<LossParts<Float>> {
    let DomainPass {
        graph,
        bn_updates,
        source,
        target,
        labels,
    } = pass;
    let triplets = mine_triplets(&labels, &mut state.rng);
    let mut f = Forward {
        graph,
        store: &model.store,
        train: true,
        bn_updates,
    };
    let Objective { parts, total } = build_objective(
        model,
        &mut f,
        &source,
        target.as_ref(),
        &labels,
        &triplets,
        &state.bank,
        weights,
        center_active,
    )?;
    f.graph.backward(total)?;

    let g = &f.graph;
    let values = LossParts {
        cls: scalar(g, parts.cls),
        domain: scalar(g, parts.domain),
        margin: scalar(g, parts.margin),
        dtw: scalar(g, parts.dtw),
        center: scalar(g, parts.center),
    };
    let fused_source = g.value(source.fusion.fused).data().to_vec();
    let Forward { graph, bn_updates, .. } = f;

    model.store.zero_grads();
    graph.accumulate_param_grads(&mut model.store);
    state.opt_feat.step(&mut model.store)?;
    model.store.zero_grads();
    apply_bn_updates(&mut model.store, &bn_updates);
    update_prototypes(&mut state.bank, &fused_source, &labels)?;
    Ok(values)
}

/// EMA update of the class prototypes from source fused features `[B, d_v]`.
pub fn update_prototypes(bank: &mut PrototypeBank<Float>, fused_source: &[Float], labels: &[usize]) -> Result<()> {
    bank.update(fused_source, labels)
}

/// Result of one paired step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub losses: LossParts<Float>,
    pub disc_loss: Option<Float>,
    pub correct: usize,
    pub count: usize,
}

fn argmax(row: &[Float]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, Float::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// One discriminator update followed by one feature update.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    source: &LabeledBatch,
    target: Option<&LabeledBatch>,
    cfg: &TrainConfig,
) -> Result<StepReport> {
    let target = target.filter(|_| cfg.weights.uses_target());
    let pass = forward_domains(model, source, target)?;
    let c = model.config.num_classes;
    let correct = pass
        .graph
        .value(pass.source.logits)
        .data()
        .chunks(c)
        .zip(&pass.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let count = pass.labels.len();
    let disc_loss = if cfg.weights.lambda_domain > 0.0 {
        discriminator_step(model, state, &pass)?
    } else {
        None
    };
    let center_active = state.epoch >= cfg.center_warmup_epochs;
    let losses = feature_step(model, state, pass, &cfg.weights, center_active)?;
    Ok(StepReport {
        losses,
        disc_loss,
        correct,
        count,
    })
}

/// Endless reshuffled pass over `0..n`.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn take(&mut self, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One epoch over the larger of the two datasets, cycling the smaller one.
/// Batches are `batch_size` long (or the whole set when it is smaller); a
/// trailing partial batch is dropped.
pub fn train_epoch(
    model: &mut Model,
    state: &mut TrainState,
    source: &Dataset,
    target: &Dataset,
    cfg: &TrainConfig,
) -> Result<EpochMetrics> {
    if source.is_empty() || (cfg.weights.uses_target() && target.is_empty()) {
        return Err(Error::EmptyDataset);
    }
    let uses_target = cfg.weights.uses_target();
    let longest = if uses_target {
        source.len().max(target.len())
    } else {
        source.len()
    };
    let bs_src = cfg.batch_size.min(source.len());
    let bs_tgt = cfg.batch_size.min(target.len().max(1));
    let steps = (longest / cfg.batch_size).max(1);
    let mut src_cycle = Cycler::new(source.len());
    let mut tgt_cycle = Cycler::new(target.len());

    let mut sums = LossParts::<Float>::default();
    let (mut disc_sum, mut disc_n, mut correct, mut count) = (0.0, 0usize, 0usize, 0usize);
    for _ in 0..steps {
        let si = src_cycle.take(bs_src, &mut state.rng);
        let sb = LabeledBatch::from_indices(&model.config, source, &si)?;
        let tb = if uses_target {
            let ti = tgt_cycle.take(bs_tgt, &mut state.rng);
            Some(LabeledBatch::from_indices(&model.config, target, &ti)?)
        } else {
            None
        };
        let r = train_step(model, state, &sb, tb.as_ref(), cfg)?;
        sums.cls += r.losses.cls;
        sums.domain += r.losses.domain;
        sums.margin += r.losses.margin;
        sums.dtw += r.losses.dtw;
        sums.center += r.losses.center;
        if let Some(d) = r.disc_loss {
            disc_sum += d;
            disc_n += 1;
        }
        correct += r.correct;
        count += r.count;
    }
    let n = steps as Float;
    let metrics = EpochMetrics {
        epoch: state.epoch + 1,
        loss_cls: sums.cls / n,
        loss_domain: sums.domain / n,
        loss_margin: sums.margin / n,
        loss_dtw: sums.dtw / n,
        loss_center: sums.center / n,
        loss_disc: if disc_n > 0 { disc_sum / disc_n as Float } else { 0.0 },
        source_accuracy: correct as Float / count as Float,
        target_accuracy: None,
    };
    state.epoch += 1;
    state.history.push(metrics.clone());
    Ok(metrics)
}

/// Accuracy and confusion matrix (`confusion[true][predicted]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: Float,
    pub correct: usize,
    pub total: usize,
    pub per_class_total: Vec<usize>,
    pub per_class_correct: Vec<usize>,
    pub confusion: Vec<Vec<usize>>,
}

/// Class predictions for every sample, in inference mode.
pub fn predict_dataset(model: &Model, ds: &Dataset) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(EVAL_BATCH) {
        let series: Vec<&[Float]> = chunk.iter().map(|s| s.values.as_slice()).collect();
        out.extend(model.predict(&series)?);
    }
    Ok(out)
}

/// Arg-max predictions against the labels of `ds`.
pub fn evaluate(model: &Model, ds: &Dataset) -> Result<Evaluation> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let labels = ds.labels()?;
    let preds = predict_dataset(model, ds)?;
    Ok(score(&preds, &labels, model.config.num_classes))
}

/// Accuracy and confusion matrix of `preds` against `labels`.
pub fn score(preds: &[usize], labels: &[usize], num_classes: usize) -> Evaluation {
    let mut confusion = vec![vec![0; num_classes]; num_classes];
    for (&p, &y) in preds.iter().zip(labels) {
        confusion[y][p] += 1;
    }
    let per_class_total: Vec<usize> = confusion.iter().map(|r| r.iter().sum()).collect();
    let per_class_correct: Vec<usize> = (0..num_classes).map(|c| confusion[c][c]).collect();
    let correct: usize = per_class_correct.iter().sum();
    Evaluation {
        accuracy: correct as Float / labels.len() as Float,
        correct,
        total: labels.len(),
        per_class_total,
        per_class_correct,
        confusion,
    }
}

/// Which parameters a store holds that differ between two snapshots.
pub fn changed_params(before: &ParamStore, after: &ParamStore) -> Vec<String> {
    before
        .iter()
        .zip(after.iter())
        .filter(|((_, a), (_, b))| a.value != b.value)
        .map(|((_, a), _)| a.name.clone())
        .collect()
}

/// A full run: model initialisation from `cfg.seed`, then `cfg.epochs`
/// epochs. `on_epoch` sees the model after every epoch and may fill in
/// `target_accuracy` or write checkpoints.
pub fn fit(
    cfg: &TrainConfig,
    source: &Dataset,
    target: &Dataset,
    mut on_epoch: impl FnMut(&Model, &mut EpochMetrics) -> Result<()>,
) -> Result<(Model, TrainState)> {
    cfg.validate()?;
    check_compatible(&cfg.model, source)?;
    if cfg.weights.uses_target() {
        check_compatible(&cfg.model, target)?;
    }
    source.labels()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut state = TrainState::new(&model, cfg);
    for _ in 0..cfg.epochs {
        let mut m = train_epoch(&mut model, &mut state, source, target, cfg)?;
        on_epoch(&model, &mut m)?;
        *state.history.last_mut().unwrap() = m;
    }
    Ok((model, state))
}

/// The dataset's shape and class count agree with the model's.
pub fn check_compatible(cfg: &ModelConfig, ds: &Dataset) -> Result<()> {
    let m = &ds.meta;
    if (m.seq_len, m.channels, m.num_classes) != (cfg.seq_len, cfg.channels, cfg.num_classes) {
        return Err(Error::MetaMismatch(format!(
            "dataset is T={} d={} C={}, model expects T={} d={} C={}",
            m.seq_len, m.channels, m.num_classes, cfg.seq_len, cfg.channels, cfg.num_classes
        )));
    }
    Ok(())
}
