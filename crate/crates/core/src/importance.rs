//! Physiology-aware patch importance and curriculum mask sampling.
//!
//! Each patch gets five raw metrics (neural band ratio, artifact-free
//! fraction, Hjorth complexity, irregularity, Hjorth mobility), min-max
//! normalized across the patches of one sample and combined with fixed
//! weights. Masks are drawn without replacement with probabilities
//! proportional to `exp(S_hat / tau)`, where `S_hat` blends the score with
//! uniform noise by the curriculum weight.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::PatchGrid;
use crate::rng::Rng;
use crate::spectral::psd;

pub const EPS: f64 = 1e-8;

/// Aggregate weights over (neural, clean, complexity, irregularity, mobility).
pub const WEIGHTS: [f64; 5] = [0.30, 0.25, 0.20, 0.15, 0.10];

pub const NEURAL_BAND_HZ: (f64, f64) = (4.0, 30.0);
pub const ARTIFACT_LOW_HZ: f64 = 2.0;
pub const ARTIFACT_HIGH_HZ: f64 = 45.0;

fn variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn diff(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hjorth {
    pub activity: f64,
    pub mobility: f64,
    pub complexity: f64,
}

/// Hjorth activity, mobility and complexity with population variances.
pub fn hjorth(patch: &[f64]) -> Result<Hjorth> {
    if patch.len() < 3 {
        return Err(Error::PatchTooShort(patch.len()));
    }
    let d1 = diff(patch);
    let d2 = diff(&d1);
    let (v0, v1, v2) = (variance(patch), variance(&d1), variance(&d2));
    let mobility = libm::sqrt(v1 / (v0 + EPS));
    let complexity = libm::sqrt(v2 / (v1 + EPS)) / (mobility + EPS);
    Ok(Hjorth { activity: libm::log(v0 + EPS), mobility, complexity })
}

fn band_fraction(power: &[f64], freqs: &[f64], keep: impl Fn(f64) -> bool) -> f64 {
    let total: f64 = power.iter().sum();
    let part: f64 = power.iter().zip(freqs).filter(|(_, &f)| keep(f)).map(|(p, _)| p).sum();
    part / (total + EPS)
}

/// Share of power in `[4, 30)` Hz.
pub fn neural_band_ratio(power: &[f64], freqs: &[f64]) -> f64 {
    band_fraction(power, freqs, |f| (NEURAL_BAND_HZ.0..NEURAL_BAND_HZ.1).contains(&f))
}

/// One minus the share of power below 2 Hz or at/above 45 Hz.
pub fn artifact_penalty(power: &[f64], freqs: &[f64]) -> f64 {
    1.0 - band_fraction(power, freqs, |f| f < ARTIFACT_LOW_HZ || f >= ARTIFACT_HIGH_HZ)
}

/// `mean |diff(|diff x|)| / (mean |diff x| + eps)`.
pub fn irregularity(patch: &[f64]) -> Result<f64> {
    if patch.len() < 3 {
        return Err(Error::PatchTooShort(patch.len()));
    }
    let a: Vec<f64> = diff(patch).iter().map(|v| v.abs()).collect();
    let num = diff(&a).iter().map(|v| v.abs()).sum::<f64>() / (a.len() - 1) as f64;
    let den = a.iter().sum::<f64>() / a.len() as f64;
    Ok(num / (den + EPS))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawMetrics {
    pub neural: f64,
    pub clean: f64,
    pub activity: f64,
    pub mobility: f64,
    pub complexity: f64,
    pub irregularity: f64,
}

impl RawMetrics {
    /// The five aggregated metrics in weight order.
    pub fn weighted(&self) -> [f64; 5] {
        [self.neural, self.clean, self.complexity, self.irregularity, self.mobility]
    }
}

pub fn raw_metrics(patch: &[f64], sample_rate_hz: f64) -> Result<RawMetrics> {
    let h = hjorth(patch)?;
    let (power, freqs) = psd(patch, sample_rate_hz);
    Ok(RawMetrics {
        neural: neural_band_ratio(&power, &freqs),
        clean: artifact_penalty(&power, &freqs),
        activity: h.activity,
        mobility: h.mobility,
        complexity: h.complexity,
        irregularity: irregularity(patch)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub raw: Vec<RawMetrics>,
    /// Min-max normalized metrics in weight order, per patch.
    pub normalized: Vec<[f64; 5]>,
    pub aggregate: Vec<f64>,
}

/// Min-max normalizes each metric across patches and applies [`WEIGHTS`].
/// A metric that is constant across patches maps to 0.5 everywhere.
pub fn aggregate_scores(raw: Vec<RawMetrics>) -> Result<ImportanceMap> {
    aggregate_with(raw, &WEIGHTS)
}

pub fn aggregate_with(raw: Vec<RawMetrics>, weights: &[f64; 5]) -> Result<ImportanceMap> {
    if raw.len() < 2 {
        return Err(Error::TooFewPatches(raw.len()));
    }
    let cols: Vec<[f64; 5]> = raw.iter().map(RawMetrics::weighted).collect();
    let mut normalized = vec![[0.0; 5]; raw.len()];
    for m in 0..5 {
        let (lo, hi) = cols.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| (lo.min(c[m]), hi.max(c[m])));
        for (n, c) in normalized.iter_mut().zip(&cols) {
            n[m] = if hi > lo { (c[m] - lo) / (hi - lo) } else { 0.5 };
        }
    }
    let aggregate = normalized.iter().map(|n| n.iter().zip(weights).map(|(a, b)| a * b).sum()).collect();
    Ok(ImportanceMap { raw, normalized, aggregate })
}

/// Scores every token of `grid` in token order.
pub fn score_grid(grid: &PatchGrid) -> Result<ImportanceMap> {
    let raw = grid.tokens().map(|t| raw_metrics(t, grid.sample_rate_hz)).collect::<Result<Vec<_>>>()?;
    aggregate_scores(raw)
}

/// Linear ramp from `w0` at step 0 to `wmax` at `total`; steps past the end
/// hold `wmax`, and a zero-length schedule is already finished.
pub fn curriculum_weight(step: usize, total: usize, w0: f64, wmax: f64) -> f64 {
    if total == 0 || step >= total {
        return wmax;
    }
    w0 + (wmax - w0) * step as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    /// Masked token indices, ascending.
    pub mask: Vec<usize>,
    pub combined: Vec<f64>,
    pub uniform: Vec<f64>,
    pub weight: f64,
}

impl MaskPlan {
    pub fn is_masked(&self) -> Vec<bool> {
        let mut m = vec![false; self.combined.len()];
        for &i in &self.mask {
            m[i] = true;
        }
        m
    }
}

pub fn mask_count(n: usize, mask_ratio: f64) -> usize {
    libm::round(mask_ratio * n as f64) as usize
}

/// Draws `round(mask_ratio * N)` distinct tokens with Gumbel-top-k on
/// `S_hat / tau`, `S_hat = w * S + (1 - w) * U`.
pub fn sample_mask(scores: &[f64], mask_ratio: f64, w: f64, tau: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(mask_ratio > 0.0 && mask_ratio < 1.0) {
        return Err(Error::InvalidConfig(alloc::format!("mask ratio {mask_ratio} must lie in (0, 1)")));
    }
    if !(tau > 0.0) || !(0.0..=1.0).contains(&w) {
        return Err(Error::InvalidConfig(alloc::format!("need tau > 0 and w in [0, 1], got {tau}, {w}")));
    }
    let n = scores.len();
    let uniform: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let combined: Vec<f64> = scores.iter().zip(&uniform).map(|(s, u)| w * s + (1.0 - w) * u).collect();
    let mut keys: Vec<(f64, usize)> = combined
        .iter()
        .enumerate()
        .map(|(i, s)| {
            // 1 - U lies in (0, 1], keeping the log finite
            let u = 1.0 - rng.random::<f64>();
            (s / tau - libm::log((-libm::log(u)).max(f64::MIN_POSITIVE)), i)
        })
        .collect();
    keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut mask: Vec<usize> = keys.iter().take(mask_count(n, mask_ratio)).map(|k| k.1).collect();
    mask.sort_unstable();
    Ok(MaskPlan { mask, combined, uniform, weight: w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use core::f64::consts::PI;

    fn tone(f: f64, fs: f64, n: usize, a: f64) -> Vec<f64> {
        (0..n).map(|i| a * libm::sin(2.0 * PI * f * i as f64 / fs)).collect()
    }

    #[test]
    fn constant_patch_conventions() {
        let h = hjorth(&[3.0; 10]).unwrap();
        assert_eq!(h.activity, libm::log(EPS));
        assert_eq!(h.mobility, 0.0);
        assert_eq!(h.complexity, 0.0);
        assert_eq!(irregularity(&[3.0; 10]).unwrap(), 0.0);
    }

    #[test]
    fn short_patches_are_rejected() {
        assert_eq!(hjorth(&[1.0, 2.0]), Err(Error::PatchTooShort(2)));
        assert_eq!(irregularity(&[1.0]), Err(Error::PatchTooShort(1)));
    }

    #[test]
    fn sinusoid_mobility_tracks_frequency() {
        for f in [3.0, 10.0, 22.0] {
            let h = hjorth(&tone(f, 200.0, 400, 1.0)).unwrap();
            let expect = 2.0 * libm::sin(PI * f / 200.0);
            assert!((h.mobility / expect - 1.0).abs() < 0.05, "f {f}: {} vs {expect}", h.mobility);
        }
    }

    #[test]
    fn ramp_and_alternating_irregularity() {
        let ramp: Vec<f64> = (0..20).map(|i| 0.3 * i as f64).collect();
        assert!(irregularity(&ramp).unwrap() < 1e-9);
        // |diff| = 2 everywhere, so the second term vanishes
        let alt: Vec<f64> = (0..11).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!(irregularity(&alt).unwrap() < 1e-12);
        // 0,1,0,0,1,0,0: |diff| = 1,1,0,1,1,0 -> diffs 0,1,1,0,1 -> 3/5 over 4/6
        let x = [0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let expect = (3.0 / 5.0) / (4.0 / 6.0 + EPS);
        assert!((irregularity(&x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn band_ratios_on_tones() {
        let fs = 200.0;
        let (p, f) = psd(&tone(10.0, fs, 200, 1.0), fs);
        assert!((neural_band_ratio(&p, &f) - 1.0).abs() < 1e-9);
        assert!((artifact_penalty(&p, &f) - 1.0).abs() < 1e-9);
        let (p, f) = psd(&tone(50.0, fs, 200, 1.0), fs);
        assert!(neural_band_ratio(&p, &f) < 1e-9);
        let (p, f) = psd(&tone(1.0, fs, 200, 1.0), fs);
        assert!(artifact_penalty(&p, &f) < 1e-9);
        let two: Vec<f64> = tone(10.0, fs, 200, 1.0).iter().zip(tone(50.0, fs, 200, 1.0)).map(|(a, b)| a + b).collect();
        let (p, f) = psd(&two, fs);
        assert!((neural_band_ratio(&p, &f) - 0.5).abs() < 1e-9);
        let two: Vec<f64> = tone(10.0, fs, 200, 1.0).iter().zip(tone(1.0, fs, 200, 1.0)).map(|(a, b)| a + b).collect();
        let (p, f) = psd(&two, fs);
        assert!((artifact_penalty(&p, &f) - 0.5).abs() < 1e-9);
    }

    fn raw(v: [f64; 5]) -> RawMetrics {
        RawMetrics { neural: v[0], clean: v[1], activity: 0.0, complexity: v[2], irregularity: v[3], mobility: v[4] }
    }

    #[test]
    fn aggregate_endpoints_and_degenerate() {
        let m = aggregate_scores(vec![raw([0.9, 0.8, 2.0, 0.5, 0.3]), raw([0.1, 0.2, 1.0, 0.1, 0.1])]).unwrap();
        assert!((m.aggregate[0] - 1.0).abs() < 1e-12);
        assert_eq!(m.aggregate[1], 0.0);
        let m = aggregate_scores(vec![raw([0.4; 5]); 3]).unwrap();
        assert!(m.aggregate.iter().all(|&s| (s - 0.5).abs() < 1e-12));
        assert_eq!(aggregate_scores(vec![raw([0.4; 5])]), Err(Error::TooFewPatches(1)));
    }

    #[test]
    fn curriculum_endpoints() {
        assert_eq!(curriculum_weight(0, 100, 0.2, 0.7), 0.2);
        assert_eq!(curriculum_weight(100, 100, 0.2, 0.7), 0.7);
        assert!((curriculum_weight(50, 100, 0.2, 0.7) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn mask_size_and_distinctness() {
        let mut rng = stream(1, Stream::Masking);
        let scores: Vec<f64> = (0..570).map(|i| (i % 7) as f64 / 7.0).collect();
        let plan = sample_mask(&scores, 0.5, 0.5, 0.8, &mut rng).unwrap();
        assert_eq!(plan.mask.len(), 285);
        assert!(plan.mask.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_mask(&scores, 1.0, 0.5, 0.8, &mut rng).is_err());
        assert!(sample_mask(&scores, 0.5, 0.5, 0.0, &mut rng).is_err());
    }

    #[test]
    fn uniform_weight_is_exchangeable() {
        let mut rng = stream(2, Stream::Masking);
        let scores: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let draws = 10_000;
        let mut hits = [0usize; 20];
        for _ in 0..draws {
            for i in sample_mask(&scores, 0.3, 0.0, 0.8, &mut rng).unwrap().mask {
                hits[i] += 1;
            }
        }
        let p = 0.3;
        let sd = libm::sqrt(draws as f64 * p * (1.0 - p));
        for h in hits {
            assert!((h as f64 - draws as f64 * p).abs() < 3.0 * sd + 1.0, "{h}");
        }
    }

    #[test]
    fn full_weight_prefers_the_high_score() {
        let mut rng = stream(3, Stream::Masking);
        let mut scores = vec![0.0; 10];
        scores[6] = 1.0;
        let mut hits = [0usize; 10];
        for _ in 0..10_000 {
            hits[sample_mask(&scores, 0.1, 1.0, 0.8, &mut rng).unwrap().mask[0]] += 1;
        }
        let best = (0..10).max_by_key(|&i| hits[i]).unwrap();
        assert_eq!(best, 6);
    }
}
