//! Multi-channel recordings and the fixed-length segments cut from them.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A continuous multi-channel recording, amplitudes in microvolts.
///
/// Samples are stored channel-major (`samples[c * len + t]`) as `f32`, the
/// same layout as the binary container, so a save/load cycle is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    channel_labels: Vec<String>,
    sample_rate_hz: f64,
    len: usize,
    samples: Vec<f32>,
}

impl Recording {
    pub fn new(channel_labels: Vec<String>, sample_rate_hz: f64, samples: Vec<f32>) -> Result<Self> {
        let channels = channel_labels.len();
        if channels == 0 || samples.is_empty() {
            return Err(Error::EmptyRecording { channels, samples: samples.len() });
        }
        if samples.len() % channels != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} samples do not divide into {} channels",
                samples.len(),
                channels
            )));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidConfig(format!("sample rate {sample_rate_hz} must be positive")));
        }
        let len = samples.len() / channels;
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { channel: i / len, sample: i % len });
        }
        Ok(Self { channel_labels, sample_rate_hz, len, samples })
    }

    /// Builds a recording with labels `ch0`, `ch1`, ...
    pub fn unlabeled(channels: usize, sample_rate_hz: f64, samples: Vec<f32>) -> Result<Self> {
        Self::new(default_labels(channels), sample_rate_hz, samples)
    }

    /// Builds a recording from per-channel rows of `f64` values.
    pub fn from_rows(channel_labels: Vec<String>, sample_rate_hz: f64, rows: &[Vec<f64>]) -> Result<Self> {
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::ShapeMismatch("channel rows have different lengths".into()));
        }
        let samples = rows.iter().flat_map(|r| r.iter().map(|&v| v as f32)).collect();
        Self::new(channel_labels, sample_rate_hz, samples)
    }

    pub fn channels(&self) -> usize {
        self.channel_labels.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn channel_labels(&self) -> &[String] {
        &self.channel_labels
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        &self.samples[c * self.len..(c + 1) * self.len]
    }

    pub fn channel_f64(&self, c: usize) -> Vec<f64> {
        self.channel(c).iter().map(|&v| f64::from(v)).collect()
    }

    pub fn duration_s(&self) -> f64 {
        self.len as f64 / self.sample_rate_hz
    }

    /// Applies `f` to every channel independently, producing a new recording
    /// at `sample_rate_hz`. All output rows must share one length.
    pub(crate) fn map_channels<F>(&self, sample_rate_hz: f64, mut f: F) -> Result<Self>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let rows: Vec<Vec<f64>> = (0..self.channels()).map(|c| f(&self.channel_f64(c))).collect();
        Self::from_rows(self.channel_labels.clone(), sample_rate_hz, &rows)
    }
}

pub fn default_labels(channels: usize) -> Vec<String> {
    (0..channels).map(|c| format!("ch{c}")).collect()
}

/// A fixed-length window cut from a recording.
///
/// Values are microvolts until [`crate::preprocess::normalize`] is applied,
/// dimensionless afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub channels: usize,
    pub len: usize,
    pub sample_rate_hz: f64,
    /// Index of the window within the source recording.
    pub window_index: usize,
    /// Channel-major, `data[c * len + t]`.
    pub data: Vec<f64>,
}

impl Segment {
    pub fn new(channels: usize, len: usize, sample_rate_hz: f64, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || len == 0 {
            return Err(Error::EmptyRecording { channels, samples: len });
        }
        if data.len() != channels * len {
            return Err(Error::ShapeMismatch(format!(
                "segment data has {} values, expected {}x{}",
                data.len(),
                channels,
                len
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { channel: i / len, sample: i % len });
        }
        Ok(Self { channels, len, sample_rate_hz, window_index: 0, data })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.len..(c + 1) * self.len]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Reinterprets a (normalized) segment as a recording, e.g. for storage.
    pub fn to_recording(&self) -> Result<Recording> {
        Recording::unlabeled(self.channels, self.sample_rate_hz, self.data.iter().map(|&v| v as f32).collect())
    }

    pub fn from_recording(rec: &Recording) -> Self {
        Self {
            channels: rec.channels(),
            len: rec.len(),
            sample_rate_hz: rec.sample_rate_hz(),
            window_index: 0,
            data: rec.samples().iter().map(|&v| f64::from(v)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_nan() {
        let err = Recording::unlabeled(2, 200.0, vec![1.0, 2.0, f32::NAN, 4.0]).unwrap_err();
        assert_eq!(err, Error::NonFinite { channel: 1, sample: 0 });
    }

    #[test]
    fn rejects_empty() {
        assert!(matches!(Recording::new(vec![], 200.0, vec![]), Err(Error::EmptyRecording { .. })));
        assert!(matches!(Recording::unlabeled(3, 200.0, vec![]), Err(Error::EmptyRecording { .. })));
    }

    #[test]
    fn channel_views() {
        let rec = Recording::unlabeled(2, 200.0, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(rec.len(), 4);
        assert_eq!(rec.channel(1), &[5.0, 6.0, 7.0, 8.0]);
        assert_eq!(rec.channel_labels()[1], "ch1");
    }
}
