//! Classification, adversarial domain, DTW-triplet, margin-triplet and
//! prototype center losses, and their weighted combination.
//!
//! Every function appends nodes to a [`Graph`] and returns a scalar node, so
//! the feature path can be differentiated through all of them at once.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Probabilities are clamped into `[PROB_EPS, 1 − PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

/// Weights of the auxiliary terms and the two triplet margins.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_domain: f64,
    pub lambda_margin: f64,
    pub lambda_dtw: f64,
    pub lambda_center: f64,
    /// Margin of the DTW triplet loss.
    pub alpha: f64,
    /// Margin of the Euclidean triplet loss on fused features.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_domain: 1.0,
            lambda_margin: 1.0,
            lambda_dtw: 1.0,
            lambda_center: 1.0,
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    /// Only the classification term.
    pub fn source_only() -> Self {
        Self {
            lambda_domain: 0.0,
            lambda_margin: 0.0,
            lambda_dtw: 0.0,
            lambda_center: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_domain,
            self.lambda_margin,
            self.lambda_dtw,
            self.lambda_center,
            self.alpha,
            self.beta,
        ];
        if all.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::BadConfig(format!(
                "loss weights must be finite and ≥ 0: {self:?}"
            )));
        }
        Ok(())
    }

    /// Whether any term consumes target-domain data.
    pub fn uses_target(&self) -> bool {
        self.lambda_domain > 0.0 || self.lambda_center > 0.0
    }
}

/// The five loss terms of one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub cls: T,
    pub domain: T,
    pub margin: T,
    pub dtw: T,
    pub center: T,
}

impl LossParts<f64> {
    /// `cls − λ_domain·domain + λ_margin·margin + λ_dtw·dtw + λ_center·center`.
    pub fn combine(&self, w: &LossWeights) -> f64 {
        self.cls - w.lambda_domain * self.domain
            + w.lambda_margin * self.margin
            + w.lambda_dtw * self.dtw
            + w.lambda_center * self.center
    }
}

/// The weighted objective of the feature path. The domain term enters with a
/// negative sign: the features are trained to make the discriminator fail.
pub fn total_loss<S: Scalar>(g: &mut Graph<S>, parts: &LossParts<Var>, w: &LossWeights) -> Result<Var> {
    let mut total = parts.cls;
    for (v, lambda) in [
        (parts.domain, -w.lambda_domain),
        (parts.margin, w.lambda_margin),
        (parts.dtw, w.lambda_dtw),
        (parts.center, w.lambda_center),
    ] {
        if lambda != 0.0 {
            let term = g.scale(v, S::lit(lambda));
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}

/// Mean softmax cross-entropy of `logits: [B, C]` against `labels`.
pub fn classification_loss<S: Scalar>(g: &mut Graph<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(Error::shape(format!("{} labels for logits {shape:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= shape[1]) {
        return Err(Error::LabelOutOfRange {
            label: bad,
            classes: shape[1],
        });
    }
    let logp = g.log_softmax(logits);
    let picked = g.pick(logp, labels)?;
    let mean = g.mean(picked);
    Ok(g.neg(mean))
}

fn check_probs<S: Scalar>(g: &Graph<S>, v: Var) -> Result<()> {
    for &p in g.value(v).data() {
        let p = p.as_f64();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::OutOfRange(p));
        }
    }
    Ok(())
}

/// Binary cross-entropy of the discriminator with source labelled 1 and
/// target 0: `−mean(log d_s) − mean(log(1 − d_t))`. Either side may be absent.
pub fn domain_loss<S: Scalar>(g: &mut Graph<S>, d_source: Option<Var>, d_target: Option<Var>) -> Result<Var> {
    let lo = S::lit(PROB_EPS);
    let hi = S::one() - lo;
    let mut total: Option<Var> = None;
    if let Some(ds) = d_source {
        check_probs(g, ds)?;
        let p = g.clamp(ds, lo, hi);
        let l = g.log(p);
        let m = g.mean(l);
        total = Some(g.neg(m));
    }
    if let Some(dt) = d_target {
        check_probs(g, dt)?;
        let p = g.clamp(dt, lo, hi);
        let neg = g.neg(p);
        let q = g.add_scalar(neg, S::one());
        let l = g.log(q);
        let m = g.mean(l);
        let term = g.neg(m);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    total.ok_or(Error::EmptyDataset)
}

/// `max(d_pos − d_neg + margin, 0)` on plain numbers.
pub fn hinge<S: Scalar>(d_pos: S, d_neg: S, margin: S) -> S {
    (d_pos - d_neg + margin).max(S::zero())
}

/// Anchor/positive/negative row indices into a mini-batch.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Triplets {
    pub anchor: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
}

impl Triplets {
    pub fn len(&self) -> usize {
        self.anchor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchor.is_empty()
    }

    /// Positives must share the anchor's class, negatives must not.
    pub fn validate(&self, labels: &[usize]) -> Result<()> {
        if self.positive.len() != self.anchor.len() || self.negative.len() != self.anchor.len() {
            return Err(Error::shape("triplet index lists differ in length"));
        }
        for ((&a, &p), &n) in self.anchor.iter().zip(&self.positive).zip(&self.negative) {
            let (ya, yp, yn) = (labels[a], labels[p], labels[n]);
            if ya != yp {
                return Err(Error::ClassMismatch(format!(
                    "anchor {a} (class {ya}) with positive {p} (class {yp})"
                )));
            }
            if ya == yn {
                return Err(Error::ClassMismatch(format!(
                    "anchor {a} and negative {n} share class {ya}"
                )));
            }
        }
        Ok(())
    }
}

/// For every anchor, a uniformly random in-batch positive (another sample of
/// the same class) and negative (any sample of another class). Anchors
/// lacking either are skipped.
pub fn mine_triplets<R: Rng>(labels: &[usize], rng: &mut R) -> Triplets {
    let mut t = Triplets::default();
    for (i, &y) in labels.iter().enumerate() {
        let pos: Vec<usize> = (0..labels.len()).filter(|&j| j != i && labels[j] == y).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&j| labels[j] != y).collect();
        if let (Some(&p), Some(&n)) = (pos.choose(rng), neg.choose(rng)) {
            t.anchor.push(i);
            t.positive.push(p);
            t.negative.push(n);
        }
    }
    t
}

fn gather_triplet<S: Scalar>(g: &mut Graph<S>, reps: Var, t: &Triplets) -> Result<(Var, Var, Var)> {
    Ok((
        g.gather_rows(reps, &t.anchor)?,
        g.gather_rows(reps, &t.positive)?,
        g.gather_rows(reps, &t.negative)?,
    ))
}

/// Sums `max(d(a,p) − d(a,n) + margin, 0)` given per-triplet distances `[n]`.
fn hinge_sum<S: Scalar>(g: &mut Graph<S>, d_pos: Var, d_neg: Var, margin: f64) -> Result<Var> {
    let diff = g.sub(d_pos, d_neg)?;
    let shifted = g.add_scalar(diff, S::lit(margin));
    let h = g.relu(shifted);
    Ok(g.sum(h))
}

/// DTW triplet loss over global representations `reps: [B, M, D]`.
pub fn dtw_triplet_loss<S: Scalar>(
    g: &mut Graph<S>,
    reps: Var,
    labels: &[usize],
    triplets: &Triplets,
    alpha: f64,
) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(g.constant(Tensor::scalar(S::zero())));
    }
    triplets.validate(labels)?;
    let (a, p, n) = gather_triplet(g, reps, triplets)?;
    let d_pos = g.dtw(a, p)?;
    let d_neg = g.dtw(a, n)?;
    hinge_sum(g, d_pos, d_neg, alpha)
}

/// Euclidean triplet loss over fused features `reps: [B, d_v]`.
pub fn margin_triplet_loss<S: Scalar>(
    g: &mut Graph<S>,
    reps: Var,
    labels: &[usize],
    triplets: &Triplets,
    beta: f64,
) -> Result<Var> {
    if triplets.is_empty() {
        return Ok(g.constant(Tensor::scalar(S::zero())));
    }
    triplets.validate(labels)?;
    let (a, p, n) = gather_triplet(g, reps, triplets)?;
    let ap = g.sub(a, p)?;
    let an = g.sub(a, n)?;
    let d_pos = g.row_norm(ap)?;
    let d_neg = g.row_norm(an)?;
    hinge_sum(g, d_pos, d_neg, beta)
}

/// Per-class prototypes of source fused features, maintained as an
/// exponential moving average of batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank<S> {
    pub prototypes: Vec<Vec<S>>,
    pub initialized: Vec<bool>,
    /// Weight kept by the old prototype on each update.
    pub momentum: S,
}

impl<S: Scalar> PrototypeBank<S> {
    pub fn new(num_classes: usize, width: usize, momentum: S) -> Self {
        Self {
            prototypes: vec![vec![S::zero(); width]; num_classes],
            initialized: vec![false; num_classes],
            momentum,
        }
    }

    pub fn width(&self) -> usize {
        self.prototypes.first().map_or(0, Vec::len)
    }

    pub fn num_initialized(&self) -> usize {
        self.initialized.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, class: usize) -> Option<&[S]> {
        self.initialized
            .get(class)
            .copied()
            .unwrap_or(false)
            .then(|| self.prototypes[class].as_slice())
    }

    /// For each class present in the batch: `c ← m·c + (1 − m)·mean` once
    /// initialized, otherwise `c ← mean`. `features` are `[B, width]` rows.
    pub fn update(&mut self, features: &[S], labels: &[usize]) -> Result<()> {
        let w = self.width();
        if features.len() != labels.len() * w {
            return Err(Error::shape(format!(
                "{} features for {} labels of width {w}",
                features.len(),
                labels.len()
            )));
        }
        let c = self.prototypes.len();
        let mut sums = vec![vec![S::zero(); w]; c];
        let mut counts = vec![0usize; c];
        for (row, &y) in features.chunks(w).zip(labels) {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            counts[y] += 1;
            for (s, &v) in sums[y].iter_mut().zip(row) {
                *s += v;
            }
        }
        for j in 0..c {
            if counts[j] == 0 {
                continue;
            }
            let inv = S::one() / S::from_usize(counts[j]).unwrap();
            let m = self.momentum;
            for (p, &s) in self.prototypes[j].iter_mut().zip(&sums[j]) {
                let mean = s * inv;
                *p = if self.initialized[j] {
                    m * *p + (S::one() - m) * mean
                } else {
                    mean
                };
            }
            self.initialized[j] = true;
        }
        Ok(())
    }

    /// Index of the initialized prototype nearest to `x` (first on ties).
    pub fn nearest(&self, x: &[S]) -> Option<usize> {
        let mut best: Option<(usize, S)> = None;
        for (j, p) in self.prototypes.iter().enumerate() {
            if !self.initialized[j] {
                continue;
            }
            let d: S = p.iter().zip(x).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        best.map(|(j, _)| j)
    }
}

/// `Σ_i min_j ‖z_i − c_j‖²` over target features `fused: [n, d_v]`. The
/// prototypes are constants for differentiation.
pub fn center_loss<S: Scalar>(g: &mut Graph<S>, fused: Var, bank: &PrototypeBank<S>) -> Result<Var> {
    if bank.num_initialized() == 0 {
        return Err(Error::NoPrototypes);
    }
    let shape = g.shape(fused).to_vec();
    if shape.len() != 2 || shape[1] != bank.width() {
        return Err(Error::shape(format!(
            "center loss: features {shape:?}, prototypes of width {}",
            bank.width()
        )));
    }
    let w = shape[1];
    let mut targets = Vec::with_capacity(shape[0] * w);
    for row in g.value(fused).data().chunks(w) {
        let j = bank.nearest(row).expect("an initialized prototype exists");
        targets.extend_from_slice(&bank.prototypes[j]);
    }
    let c = g.constant(Tensor::new(shape, targets)?);
    let diff = g.sub(fused, c)?;
    let sq = g.square(diff);
    Ok(g.sum(sq))
}
