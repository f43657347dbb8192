//! Splitting a series into overlapping patches.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Patches of one series, stored `M × P × d` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence<S> {
    pub patches: Vec<S>,
    pub patch_len: usize,
    pub stride: usize,
    pub num_patches: usize,
    pub channels: usize,
}

impl<S: Scalar> PatchSequence<S> {
    /// Patch `m` as `P × d` row-major values.
    pub fn patch(&self, m: usize) -> &[S] {
        let w = self.patch_len * self.channels;
        &self.patches[m * w..(m + 1) * w]
    }
}

/// `ceil((T − P) / S) + 1`; equals `⌊(T − P) / S⌋ + 1` when `S` divides `T − P`.
pub fn num_patches(seq_len: usize, patch_len: usize, stride: usize) -> usize {
    (seq_len - patch_len).div_ceil(stride) + 1
}

/// Windows start at `0, S, 2S, …`. When the last window runs past the end,
/// the series is extended by repeating its final time step.
///
/// `values` is the series `T × d` row-major.
pub fn patchify<S: Scalar>(
    values: &[S],
    seq_len: usize,
    channels: usize,
    patch_len: usize,
    stride: usize,
) -> Result<PatchSequence<S>> {
    if patch_len == 0 || patch_len > seq_len {
        return Err(Error::BadConfig(format!(
            "patch length {patch_len} must lie in [1, {seq_len}]"
        )));
    }
    if stride == 0 {
        return Err(Error::BadConfig("patch stride must be ≥ 1".into()));
    }
    if values.len() != seq_len * channels {
        return Err(Error::shape(format!(
            "series has {} values, expected {seq_len}×{channels}",
            values.len()
        )));
    }
    let m = num_patches(seq_len, patch_len, stride);
    let mut patches = Vec::with_capacity(m * patch_len * channels);
    for p in 0..m {
        for t in p * stride..p * stride + patch_len {
            let src = t.min(seq_len - 1);
            patches.extend_from_slice(&values[src * channels..(src + 1) * channels]);
        }
    }
    Ok(PatchSequence {
        patches,
        patch_len,
        stride,
        num_patches: m,
        channels,
    })
}
