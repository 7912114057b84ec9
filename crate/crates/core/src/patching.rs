//! Non-overlapping fixed-length patches over a segment.
//!
//! The flattened token sequence is channel-major: token `i = c * A + a`
//! holds patch `a` of channel `c`.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::signal::Segment;

/// `C x A x P` patches, stored contiguously in token order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    pub channels: usize,
    pub patches_per_channel: usize,
    pub patch_len: usize,
    pub sample_rate_hz: f64,
    data: Vec<f64>,
}

impl PatchGrid {
    pub fn new(channels: usize, patches_per_channel: usize, patch_len: usize, sample_rate_hz: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * patches_per_channel * patch_len || channels == 0 || patches_per_channel == 0 || patch_len == 0 {
            return Err(Error::ShapeMismatch(alloc::format!(
                "grid {channels}x{patches_per_channel}x{patch_len} cannot hold {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { channels, patches_per_channel, patch_len, sample_rate_hz, data })
    }

    /// Number of tokens, `C * A`.
    pub fn len(&self) -> usize {
        self.channels * self.patches_per_channel
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn index(&self, channel: usize, patch: usize) -> usize {
        channel * self.patches_per_channel + patch
    }

    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.patches_per_channel, index % self.patches_per_channel)
    }

    /// Patch for flattened token `i`.
    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.patch_len..(i + 1) * self.patch_len]
    }

    pub fn patch(&self, channel: usize, patch: usize) -> &[f64] {
        self.token(self.index(channel, patch))
    }

    pub fn tokens(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.patch_len)
    }

    /// All patch values, token-major (`N x P`).
    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

pub fn patchify(seg: &Segment, patch_len: usize) -> Result<PatchGrid> {
    if patch_len == 0 || patch_len > seg.len {
        return Err(Error::PatchTooLong { patch_len, len: seg.len });
    }
    let per_channel = seg.len / patch_len;
    let mut data = Vec::with_capacity(seg.channels * per_channel * patch_len);
    for c in 0..seg.channels {
        data.extend_from_slice(&seg.channel(c)[..per_channel * patch_len]);
    }
    PatchGrid::new(seg.channels, per_channel, patch_len, seg.sample_rate_hz, data)
}

pub fn unpatchify(grid: &PatchGrid) -> Segment {
    Segment {
        channels: grid.channels,
        len: grid.patches_per_channel * grid.patch_len,
        sample_rate_hz: grid.sample_rate_hz,
        window_index: 0,
        data: grid.data.clone(),
    }
}
