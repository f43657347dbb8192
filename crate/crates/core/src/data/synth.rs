use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Domain, TimeSeriesSample};
use crate::error::{Error, Result};
use crate::Float;

/// Amplitude of the class-independent slow sinusoid under the motifs.
const BACKGROUND_AMPLITUDE: Float = 0.2;

/// Two-domain generator settings.
///
/// Every class is an ordered pair of distinct motifs placed in two slots,
/// centred at `T/4` and `3T/4` and each jittered by an independent uniform
/// integer shift in `[−max_shift, max_shift]`. Pairs sharing the same motifs in
/// opposite order differ only in their global arrangement. The target domain
/// multiplies the clean signal by `scale` and adds `offset` to every channel;
/// both domains receive Gaussian noise of standard deviation `noise`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seq_len: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub motif_len: usize,
    pub max_shift: usize,
    pub scale: Float,
    pub offset: Float,
    pub noise: Float,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seq_len: 128,
            channels: 3,
            num_classes: 6,
            samples_per_class: 100,
            motif_len: 24,
            max_shift: 16,
            scale: 1.6,
            offset: 0.3,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::BadConfig(msg));
        if self.channels == 0 || self.num_classes < 2 || self.samples_per_class == 0 {
            return bad(format!("degenerate synthetic config {self:?}"));
        }
        if self.motif_len < 2 || self.motif_len >= self.seq_len {
            return bad(format!("motif length {} must lie in [2, T)", self.motif_len));
        }
        if 2 * (self.motif_len + 2 * self.max_shift) > self.seq_len {
            return bad(format!(
                "two slots of motif {} with shift ±{} do not fit in T = {}",
                self.motif_len, self.max_shift, self.seq_len
            ));
        }
        if !(self.scale.is_finite() && self.offset.is_finite() && self.noise.is_finite()) || self.noise < 0.0 {
            return bad("scale, offset and noise must be finite, noise ≥ 0".into());
        }
        Ok(())
    }

    /// Number of distinct motifs: the smallest `n` with `n(n − 1) ≥ C`.
    pub fn num_motifs(&self) -> usize {
        (2..).find(|n| n * (n - 1) >= self.num_classes).unwrap()
    }

    fn slot_start(&self, slot: usize) -> usize {
        let centre = self.seq_len * (2 * slot + 1) / 4;
        centre - self.motif_len / 2
    }
}

/// Motif `m` at phase `u ∈ [0, 1]`: a raised-sine envelope modulated by a
/// cosine whose frequency grows with `m`.
pub fn motif_shape(m: usize, u: Float) -> Float {
    let env = (PI * u).sin().powi(2);
    env * (1.5 * PI * m as Float * u).cos()
}

fn channel_weight(m: usize, c: usize, num_motifs: usize) -> Float {
    if c % num_motifs == m {
        1.0
    } else if (c + m).is_multiple_of(2) {
        0.4
    } else {
        -0.4
    }
}

/// `[L × d]` row-major template of motif `m`.
fn motif_template(cfg: &SynthConfig, m: usize) -> Vec<Float> {
    let n = cfg.num_motifs();
    let l = cfg.motif_len;
    let mut out = Vec::with_capacity(l * cfg.channels);
    for t in 0..l {
        let s = motif_shape(m, t as Float / (l - 1) as Float);
        for c in 0..cfg.channels {
            out.push(s * channel_weight(m, c, n));
        }
    }
    out
}

/// The ordered motif pair of every class: `(0,1), (1,0), (0,2), (2,0), …`.
pub fn class_motifs(cfg: &SynthConfig) -> Vec<(usize, usize)> {
    let n = cfg.num_motifs();
    let mut pairs = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            pairs.push((a, b));
            pairs.push((b, a));
        }
    }
    pairs.truncate(cfg.num_classes);
    pairs
}

fn generate_sample(
    cfg: &SynthConfig,
    class: usize,
    domain: Domain,
    templates: &[Vec<Float>],
    pairs: &[(usize, usize)],
    rng: &mut ChaCha8Rng,
) -> Vec<Float> {
    let (t_len, d, l) = (cfg.seq_len, cfg.channels, cfg.motif_len);
    let mut x = vec![0.0; t_len * d];
    for c in 0..d {
        let freq = rng.gen_range(1.0..3.0);
        let phase = rng.gen_range(0.0..2.0 * PI);
        for t in 0..t_len {
            x[t * d + c] = BACKGROUND_AMPLITUDE * (2.0 * PI * freq * t as Float / t_len as Float + phase).sin();
        }
    }
    let (a, b) = pairs[class];
    for (slot, m) in [(0, a), (1, b)] {
        let jitter = rng.gen_range(-(cfg.max_shift as isize)..=cfg.max_shift as isize);
        let start = (cfg.slot_start(slot) as isize + jitter) as usize;
        for t in 0..l {
            for c in 0..d {
                x[(start + t) * d + c] += templates[m][t * d + c];
            }
        }
    }
    if domain == Domain::Target {
        for v in &mut x {
            *v = cfg.scale * *v + cfg.offset;
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, cfg.noise).unwrap();
        for v in &mut x {
            *v += normal.sample(rng);
        }
    }
    // Values are kept at f32 precision so a save/load round trip is exact.
    x.iter().map(|&v| v as f32 as Float).collect()
}

/// One labelled split of `domain`, drawn from random stream `stream`.
/// Sample `i` belongs to class `i mod C`.
pub fn synthesize_split(cfg: &SynthConfig, domain: Domain, stream: u64) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let templates: Vec<Vec<Float>> = (0..cfg.num_motifs()).map(|m| motif_template(cfg, m)).collect();
    let pairs = class_motifs(cfg);
    let n = cfg.num_classes * cfg.samples_per_class;
    let samples = (0..n)
        .map(|i| {
            let class = i % cfg.num_classes;
            TimeSeriesSample {
                values: generate_sample(cfg, class, domain, &templates, &pairs, &mut rng),
                label: Some(class),
                domain,
            }
        })
        .collect();
    Dataset::new(
        DatasetMeta::new(cfg.seq_len, cfg.channels, cfg.num_classes, domain),
        samples,
    )
}

/// Labelled source and target training sets on independent random streams.
pub fn synthesize_uda_pair(cfg: &SynthConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        synthesize_split(cfg, Domain::Source, 0)?,
        synthesize_split(cfg, Domain::Target, 1)?,
    ))
}

fn window_cost(x: &[Float], d: usize, start: usize, template: &[Float]) -> Float {
    let w = &x[start * d..start * d + template.len()];
    w.iter().zip(template).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Nearest-template classifier that knows the generator: for each class,
/// the best-aligned squared distance of each slot window to the class's
/// motif, summed over both slots. Returns the class with the smallest cost.
pub fn oracle_classify(cfg: &SynthConfig, values: &[Float]) -> usize {
    let templates: Vec<Vec<Float>> = (0..cfg.num_motifs()).map(|m| motif_template(cfg, m)).collect();
    let shift = cfg.max_shift as isize;
    let best_slot = |slot: usize, m: usize| {
        (-shift..=shift)
            .map(|j| {
                let start = (cfg.slot_start(slot) as isize + j) as usize;
                window_cost(values, cfg.channels, start, &templates[m])
            })
            .fold(Float::INFINITY, Float::min)
    };
    let mut best = (0, Float::INFINITY);
    for (k, &(a, b)) in class_motifs(cfg).iter().enumerate() {
        let cost = best_slot(0, a) + best_slot(1, b);
        if cost < best.1 {
            best = (k, cost);
        }
    }
    best.0
}

/// Accuracy of [`oracle_classify`] on a labelled dataset.
pub fn oracle_accuracy(cfg: &SynthConfig, ds: &Dataset) -> Result<Float> {
    let labels = ds.labels()?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = ds
        .samples
        .iter()
        .zip(&labels)
        .filter(|(s, &y)| oracle_classify(cfg, &s.values) == y)
        .count();
    Ok(hits as Float / labels.len() as Float)
}
