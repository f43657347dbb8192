//! Labelled multivariate series, their on-disk format, CSV ingestion and a
//! synthetic two-domain generator.
//!
//! A dataset directory holds `meta.json` and `data.bin`. The binary file is
//! the magic `LGDS`, a version byte, then for every sample a little-endian
//! `u16` label (`0xFFFF` when unlabelled) followed by `T·d` little-endian
//! `f32` values stored channel by channel. In memory a series is `T × d`
//! row-major (one row per time step).

mod convert;
mod synth;

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use convert::{convert_csv, CsvImport};
pub use synth::{
    class_motifs, motif_shape, oracle_accuracy, oracle_classify, synthesize_split, synthesize_uda_pair, SynthConfig,
};

use crate::error::{Error, Result};
use crate::Float;

pub const DATA_MAGIC: &[u8; 4] = b"LGDS";
pub const DATA_VERSION: u8 = 1;
pub const UNLABELED: u16 = 0xFFFF;

const META_FILE: &str = "meta.json";
const DATA_FILE: &str = "data.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// One series `x ∈ R^{T×d}` with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesSample {
    /// `T × d` row-major.
    pub values: Vec<Float>,
    pub label: Option<usize>,
    pub domain: Domain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "T")]
    pub seq_len: usize,
    #[serde(rename = "d")]
    pub channels: usize,
    #[serde(rename = "C")]
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub domain: Domain,
}

impl DatasetMeta {
    pub fn new(seq_len: usize, channels: usize, num_classes: usize, domain: Domain) -> Self {
        Self {
            seq_len,
            channels,
            num_classes,
            class_names: (0..num_classes).map(|c| format!("class{c}")).collect(),
            domain,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.channels == 0 || self.num_classes == 0 {
            return Err(Error::FormatError(format!("degenerate metadata {self:?}")));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::MetaMismatch(format!(
                "{} class names for C = {}",
                self.class_names.len(),
                self.num_classes
            )));
        }
        if self.num_classes >= UNLABELED as usize {
            return Err(Error::FormatError(format!(
                "C = {} does not fit a u16 label",
                self.num_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<TimeSeriesSample>,
}

impl Dataset {
    /// Checks every sample against the metadata.
    pub fn new(meta: DatasetMeta, samples: Vec<TimeSeriesSample>) -> Result<Self> {
        meta.validate()?;
        let n = meta.seq_len * meta.channels;
        for (i, s) in samples.iter().enumerate() {
            if s.values.len() != n {
                return Err(Error::MetaMismatch(format!(
                    "sample {i} has {} values, expected {}×{}",
                    s.values.len(),
                    meta.seq_len,
                    meta.channels
                )));
            }
            if let Some(y) = s.label {
                if y >= meta.num_classes {
                    return Err(Error::LabelOutOfRange {
                        label: y,
                        classes: meta.num_classes,
                    });
                }
            }
        }
        Ok(Self { meta, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.label.is_some())
    }

    /// All labels, or `MissingLabels` if any sample lacks one.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| s.label.ok_or(Error::MissingLabels))
            .collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.meta.num_classes];
        for y in self.samples.iter().filter_map(|s| s.label) {
            counts[y] += 1;
        }
        counts
    }

    pub fn without_labels(&self) -> Self {
        let mut out = self.clone();
        for s in &mut out.samples {
            s.label = None;
        }
        out
    }

    /// Every series rotated by `shift` steps along time: step `t` moves to
    /// `(t + shift) mod T`.
    pub fn circular_shift(&self, shift: isize) -> Self {
        let mut out = self.clone();
        let (t, d) = (self.meta.seq_len, self.meta.channels);
        for (dst, src) in out.samples.iter_mut().zip(&self.samples) {
            dst.values = circular_shift(&src.values, t, d, shift);
        }
        out
    }
}

/// Rotates a `T × d` row-major series by `shift` time steps.
pub fn circular_shift(values: &[Float], seq_len: usize, channels: usize, shift: isize) -> Vec<Float> {
    let k = shift.rem_euclid(seq_len as isize) as usize;
    let mut out = vec![0.0; values.len()];
    for t in 0..seq_len {
        let dst = (t + k) % seq_len;
        out[dst * channels..(dst + 1) * channels].copy_from_slice(&values[t * channels..(t + 1) * channels]);
    }
    out
}

/// Writes `meta.json` and `data.bin` into `dir`, creating it if needed.
/// Values are stored as `f32`.
pub fn save_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::to_string_pretty(&ds.meta).map_err(|e| Error::FormatError(e.to_string()))?;
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, encode_samples(ds)?).map_err(|e| Error::io(&data_path, e))
}

/// Reads and validates a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join(META_FILE);
    let meta = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta).map_err(|e| Error::FormatError(format!("meta.json: {e}")))?;
    meta.validate()?;
    let data_path = dir.join(DATA_FILE);
    let bytes = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let samples = decode_samples(&meta, &bytes)?;
    Dataset::new(meta, samples)
}

fn encode_samples(ds: &Dataset) -> Result<Vec<u8>> {
    let (t, d) = (ds.meta.seq_len, ds.meta.channels);
    let mut out = Vec::with_capacity(5 + ds.len() * (2 + 4 * t * d));
    out.extend_from_slice(DATA_MAGIC);
    out.push(DATA_VERSION);
    for s in &ds.samples {
        let label = s.label.map_or(UNLABELED, |y| y as u16);
        out.extend_from_slice(&label.to_le_bytes());
        for c in 0..d {
            for step in 0..t {
                out.extend_from_slice(&(s.values[step * d + c] as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn decode_samples(meta: &DatasetMeta, bytes: &[u8]) -> Result<Vec<TimeSeriesSample>> {
    if bytes.len() < 5 || &bytes[..4] != DATA_MAGIC {
        return Err(Error::FormatError("data.bin: bad magic".into()));
    }
    if bytes[4] != DATA_VERSION {
        return Err(Error::FormatError(format!(
            "data.bin: unsupported version {}",
            bytes[4]
        )));
    }
    let (t, d) = (meta.seq_len, meta.channels);
    let record = 2 + 4 * t * d;
    let body = &bytes[5..];
    if !body.len().is_multiple_of(record) {
        return Err(Error::MetaMismatch(format!(
            "data.bin holds {} bytes, not a whole number of {t}×{d} records",
            body.len()
        )));
    }
    let mut samples = Vec::with_capacity(body.len() / record);
    for rec in body.chunks_exact(record) {
        let raw = u16::from_le_bytes([rec[0], rec[1]]);
        let label = (raw != UNLABELED).then_some(raw as usize);
        let mut values = vec![0.0; t * d];
        for (k, chunk) in rec[2..].chunks_exact(4).enumerate() {
            let (c, step) = (k / t, k % t);
            values[step * d + c] = f32::from_le_bytes(chunk.try_into().unwrap()) as Float;
        }
        samples.push(TimeSeriesSample {
            values,
            label,
            domain: meta.domain,
        });
    }
    Ok(samples)
}
