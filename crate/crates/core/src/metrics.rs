//! Codebook usage, reconstruction fidelity and mask-distribution statistics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::importance::{sample_mask, MaskPlan};
use crate::patching::PatchGrid;
use crate::rng::Rng;
use crate::rvq::Domain;
use crate::tokenizer::{train_tokenizer, Targets, Tokenizer};

/// Reported in place of an infinite SNR.
pub const SNR_CAP_DB: f64 = 120.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookStats {
    pub histogram: Vec<u64>,
    pub total: u64,
    pub unused_count: usize,
    pub normalized_entropy: f64,
    pub gini: f64,
    /// Share of assignments held by the `ceil(K/10)` most-used codes.
    pub top10_contribution: f64,
}

/// Usage statistics of one codebook from its assignment histogram.
pub fn codebook_stats(histogram: &[u64]) -> Result<CodebookStats> {
    let k = histogram.len();
    if k < 2 {
        return Err(Error::InvalidConfig(alloc::format!("codebook of size {k}")));
    }
    let total: u64 = histogram.iter().sum();
    let unused_count = histogram.iter().filter(|&&c| c == 0).count();
    let (normalized_entropy, gini, top10_contribution) = if total == 0 {
        (0.0, 0.0, 0.0)
    } else {
        let t = total as f64;
        let h: f64 = histogram.iter().filter(|&&c| c > 0).map(|&c| c as f64 / t).map(|p| -p * libm::log(p)).sum();
        let mut sorted = histogram.to_vec();
        sorted.sort_unstable();
        // integer numerator keeps the uniform case exactly 0
        let num: i128 = sorted.iter().enumerate().map(|(i, &c)| (2 * (i as i128 + 1) - k as i128 - 1) * c as i128).sum();
        let gini = num as f64 / (k as f64 * t);
        let top: u64 = sorted.iter().rev().take(k.div_ceil(10)).sum();
        (h / libm::log(k as f64), gini, top as f64 / t)
    };
    Ok(CodebookStats { histogram: histogram.to_vec(), total, unused_count, normalized_entropy, gini, top10_contribution })
}

/// Assignment histograms `[domain][layer][code]` over every token of `corpus`.
pub fn usage_histograms(tokenizer: &Tokenizer, corpus: &[PatchGrid]) -> Result<[Vec<Vec<u64>>; 2]> {
    let (layers, k) = (tokenizer.cfg.rvq_layers, tokenizer.cfg.codebook_size);
    let mut hist = [vec![vec![0u64; k]; layers], vec![vec![0u64; k]; layers]];
    for grid in corpus {
        let tg = tokenizer.tokenize(grid)?;
        for t in 0..tg.tokens() {
            for d in Domain::BOTH {
                for (l, &c) in tg.codes(t, d).iter().enumerate() {
                    hist[d.index()][l][c as usize] += 1;
                }
            }
        }
    }
    Ok(hist)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recon {
    pub mse: f64,
    pub pearson_r: f64,
    pub snr_db: f64,
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::ShapeMismatch(alloc::format!("need equal lengths >= 2, got {} and {}", a.len(), b.len())));
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 {
        return Err(Error::ConstantSignal);
    }
    if syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / libm::sqrt(sxx * syy)).clamp(-1.0, 1.0))
}

/// `10 log10(sum x^2 / sum (x - x_hat)^2)`, capped at [`SNR_CAP_DB`].
pub fn snr_db(x: &[f64], x_hat: &[f64]) -> f64 {
    let signal: f64 = x.iter().map(|v| v * v).sum();
    let noise: f64 = x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum();
    if noise == 0.0 {
        return SNR_CAP_DB;
    }
    (10.0 * libm::log10(signal / noise)).min(SNR_CAP_DB)
}

pub fn recon_metrics(original: &[f64], reconstructed: &[f64]) -> Result<Recon> {
    check_pair(original, reconstructed)?;
    Ok(Recon { mse: mse(original, reconstructed), pearson_r: pearson(original, reconstructed)?, snr_db: snr_db(original, reconstructed) })
}

/// Time, amplitude and phase fidelity over a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconMetrics {
    pub time: Recon,
    pub amplitude: Recon,
    pub phase: Recon,
}

/// Pools squared error and energy over every bin of every token. The
/// correlation is the mean of per-patch correlations; constant patches are
/// skipped.
fn pooled(pairs: &[(Vec<f64>, Vec<f64>)], p: usize) -> Result<Recon> {
    let (mut se, mut energy, mut count) = (0.0, 0.0, 0usize);
    let (mut r_sum, mut r_n) = (0.0, 0usize);
    for (x, y) in pairs {
        check_pair(x, y)?;
        for (a, b) in x.iter().zip(y) {
            se += (a - b) * (a - b);
            energy += a * a;
        }
        count += x.len();
        for (xa, ya) in x.chunks_exact(p).zip(y.chunks_exact(p)) {
            match pearson(xa, ya) {
                Ok(r) => {
                    r_sum += r;
                    r_n += 1;
                }
                Err(Error::ConstantSignal) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if r_n == 0 {
        return Err(Error::ConstantSignal);
    }
    let snr = if se == 0.0 { SNR_CAP_DB } else { (10.0 * libm::log10(energy / se)).min(SNR_CAP_DB) };
    Ok(Recon { mse: se / count as f64, pearson_r: r_sum / r_n as f64, snr_db: snr })
}

pub fn corpus_recon(tokenizer: &Tokenizer, corpus: &[PatchGrid]) -> Result<ReconMetrics> {
    let mut time = Vec::with_capacity(corpus.len());
    let mut amp = Vec::with_capacity(corpus.len());
    let mut phase = Vec::with_capacity(corpus.len());
    for grid in corpus {
        let t = Targets::of(grid);
        let (rt, ra, rp) = tokenizer.reconstruct(grid)?;
        time.push((t.time, rt));
        amp.push((t.log_amp, ra));
        phase.push((t.phase, rp));
    }
    let p = tokenizer.cfg.patch_len;
    Ok(ReconMetrics { time: pooled(&time, p)?, amplitude: pooled(&amp, p)?, phase: pooled(&phase, p)? })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskReport {
    pub mean_masked: f64,
    pub mean_visible: f64,
    pub gap: f64,
    /// `gap / mean_visible`, or 0 when no visible score is positive.
    pub relative_increase: f64,
}

impl MaskReport {
    fn from_means(mean_masked: f64, mean_visible: f64) -> Self {
        let gap = mean_masked - mean_visible;
        let relative_increase = if mean_visible > 0.0 { gap / mean_visible } else { 0.0 };
        Self { mean_masked, mean_visible, gap, relative_increase }
    }
}

/// Mean score of masked versus visible patches. An empty side has mean 0.
pub fn mask_report(scores: &[f64], plan: &MaskPlan) -> Result<MaskReport> {
    let flags = plan.is_masked();
    if flags.len() != scores.len() {
        return Err(Error::ShapeMismatch(alloc::format!("plan over {} patches for {} scores", flags.len(), scores.len())));
    }
    let (mut sm, mut nm, mut sv, mut nv) = (0.0, 0usize, 0.0, 0usize);
    for (s, m) in scores.iter().zip(flags) {
        if m {
            sm += s;
            nm += 1;
        } else {
            sv += s;
            nv += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(MaskReport::from_means(mean(sm, nm), mean(sv, nv)))
}

/// Averages [`mask_report`] over `draws` masks per score vector.
pub fn mask_gap(scores: &[Vec<f64>], mask_ratio: f64, w: f64, tau: f64, draws: usize, rng: &mut Rng) -> Result<MaskReport> {
    if scores.is_empty() || draws == 0 {
        return Err(Error::EmptyMask);
    }
    let (mut m, mut v) = (0.0, 0.0);
    let n = (scores.len() * draws) as f64;
    for _ in 0..draws {
        for s in scores {
            let plan = sample_mask(s, mask_ratio, w, tau, rng)?;
            let r = mask_report(s, &plan)?;
            m += r.mean_masked / n;
            v += r.mean_visible / n;
        }
    }
    Ok(MaskReport::from_means(m, v))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthResult {
    pub depth: usize,
    pub recon: ReconMetrics,
    pub final_loss: f64,
}

/// Trains one tokenizer per depth with the same seed and settings.
pub fn rvq_depth_sweep(corpus: &[PatchGrid], cfg: &ModelConfig, train: &TrainConfig, depths: &[usize]) -> Result<Vec<DepthResult>> {
    if depths.is_empty() {
        return Err(Error::InvalidConfig("depth sweep needs at least one depth".into()));
    }
    depths
        .iter()
        .map(|&depth| {
            let c = ModelConfig { rvq_layers: depth, ..cfg.clone() };
            let run = train_tokenizer(corpus, &c, train)?;
            let final_loss = run.history.last().map_or(f64::NAN, |h| h.loss.l_total);
            Ok(DepthResult { depth, recon: corpus_recon(&run.model, corpus)?, final_loss })
        })
        .collect()
}
