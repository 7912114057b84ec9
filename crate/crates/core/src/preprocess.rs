//! Filtering, resampling, windowing, amplitude rejection and scaling.
//!
//! Filters are zero-phase: a biquad cascade is run forward then backward
//! over a mirror-extended signal, with steady-state initial conditions, so the
//! waveform is not shifted in time.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::{Recording, Segment};

/// One second-order section, `a0` normalized to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn normalized(b: [f64; 3], a: [f64; 3]) -> Self {
        Self { b: [b[0] / a[0], b[1] / a[0], b[2] / a[0]], a: [a[1] / a[0], a[2] / a[0]] }
    }

    pub fn lowpass(cutoff_hz: f64, fs: f64, q: f64) -> Self {
        let (cw, alpha) = rbj_terms(cutoff_hz, fs, q);
        let b1 = 1.0 - cw;
        Self::normalized([b1 / 2.0, b1, b1 / 2.0], [1.0 + alpha, -2.0 * cw, 1.0 - alpha])
    }

    pub fn highpass(cutoff_hz: f64, fs: f64, q: f64) -> Self {
        let (cw, alpha) = rbj_terms(cutoff_hz, fs, q);
        let b0 = (1.0 + cw) / 2.0;
        Self::normalized([b0, -(1.0 + cw), b0], [1.0 + alpha, -2.0 * cw, 1.0 - alpha])
    }

    pub fn notch(center_hz: f64, fs: f64, q: f64) -> Self {
        let (cw, alpha) = rbj_terms(center_hz, fs, q);
        Self::normalized([1.0, -2.0 * cw, 1.0], [1.0 + alpha, -2.0 * cw, 1.0 - alpha])
    }

    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    /// Transposed direct-form-II state for a unit step held forever.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        [g - self.b[0], self.b[2] - self.a[1] * g]
    }

    /// Magnitude response at `f_hz`.
    pub fn magnitude(&self, f_hz: f64, fs: f64) -> f64 {
        let w = 2.0 * PI * f_hz / fs;
        let z1 = num_complex::Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = 1.0 + z1 * self.a[0] + z2 * self.a[1];
        (num / den).norm()
    }
}

fn rbj_terms(f0: f64, fs: f64, q: f64) -> (f64, f64) {
    let w0 = 2.0 * PI * f0 / fs;
    (libm::cos(w0), libm::sin(w0) / (2.0 * q))
}

/// A cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos(pub Vec<Biquad>);

impl Sos {
    /// Quality factors of the two sections of a 4th-order Butterworth filter.
    const BUTTER4_Q: [f64; 2] = [0.541_196_100_146_197, 1.306_562_964_876_376_4];

    pub fn butter4_lowpass(cutoff_hz: f64, fs: f64) -> Self {
        Sos(Self::BUTTER4_Q.iter().map(|&q| Biquad::lowpass(cutoff_hz, fs, q)).collect())
    }

    pub fn butter4_highpass(cutoff_hz: f64, fs: f64) -> Self {
        Sos(Self::BUTTER4_Q.iter().map(|&q| Biquad::highpass(cutoff_hz, fs, q)).collect())
    }

    /// 4th-order Butterworth high-pass at `low` followed by 4th-order
    /// Butterworth low-pass at `high`.
    pub fn butter4_bandpass(low_hz: f64, high_hz: f64, fs: f64) -> Self {
        let mut sections = Self::butter4_highpass(low_hz, fs).0;
        sections.extend(Self::butter4_lowpass(high_hz, fs).0);
        Sos(sections)
    }

    pub fn magnitude(&self, f_hz: f64, fs: f64) -> f64 {
        self.0.iter().map(|s| s.magnitude(f_hz, fs)).product()
    }

    /// Causal filtering starting from state `zi`, scaled by `x0` per section.
    fn run(&self, x: &mut [f64], x0: f64) {
        let mut scale = x0;
        for s in &self.0 {
            let [mut z1, mut z2] = s.step_state();
            z1 *= scale;
            z2 *= scale;
            scale *= s.dc_gain();
            let [b0, b1, b2] = s.b;
            let [a1, a2] = s.a;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z1;
                z1 = b1 * xin - a1 * y + z2;
                z2 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Zero-phase forward-backward filtering with the default edge padding.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        self.filtfilt_padded(x, 3 * (2 * self.0.len() + 1))
    }

    /// Zero-phase filtering with `pad` samples of mirror extension per side
    /// (capped at `x.len() - 1`).
    pub fn filtfilt_padded(&self, x: &[f64], pad: usize) -> Vec<f64> {
        let n = x.len();
        if n < 2 {
            return x.to_vec();
        }
        let pad = pad.min(n - 1);
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| x[n - 1 - i]));

        let x0 = ext[0];
        self.run(&mut ext, x0);
        ext.reverse();
        let x0 = ext[0];
        self.run(&mut ext, x0);
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

fn check_band(what: &str, f: f64, fs: f64) -> Result<()> {
    if !(f > 0.0 && f < fs / 2.0) {
        return Err(Error::InvalidBand(format!("{what} {f} Hz outside (0, {}) Hz", fs / 2.0)));
    }
    Ok(())
}

pub fn bandpass(rec: &Recording, low_hz: f64, high_hz: f64) -> Result<Recording> {
    let fs = rec.sample_rate_hz();
    check_band("low cutoff", low_hz, fs)?;
    check_band("high cutoff", high_hz, fs)?;
    if low_hz >= high_hz {
        return Err(Error::InvalidBand(format!("low cutoff {low_hz} Hz >= high cutoff {high_hz} Hz")));
    }
    let sos = Sos::butter4_bandpass(low_hz, high_hz, fs);
    // Pad by three time constants of the lowest cutoff so the high-pass
    // start-up transient stays outside the kept samples.
    let pad = libm::ceil(3.0 * fs / low_hz) as usize;
    rec.map_channels(fs, |x| sos.filtfilt_padded(x, pad))
}

pub const NOTCH_Q: f64 = 30.0;

pub fn notch(rec: &Recording, center_hz: f64) -> Result<Recording> {
    let fs = rec.sample_rate_hz();
    check_band("notch center", center_hz, fs)?;
    let sos = Sos(alloc::vec![Biquad::notch(center_hz, fs, NOTCH_Q)]);
    rec.map_channels(fs, |x| sos.filtfilt(x))
}

const RESAMPLE_HALF_TAPS: f64 = 32.0;
const KAISER_BETA: f64 = 8.0;
const RESAMPLE_ROLLOFF: f64 = 0.95;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= half / k as f64;
        let t2 = term * term;
        sum += t2;
        if t2 < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        libm::sin(PI * x) / (PI * x)
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut m = i.rem_euclid(period);
    if m >= n as isize {
        m = period - m;
    }
    m as usize
}

/// Kaiser-windowed sinc interpolation of one channel.
pub fn resample_channel(x: &[f64], source_hz: f64, target_hz: f64) -> Vec<f64> {
    let n = x.len();
    let out_len = libm::round(n as f64 * target_hz / source_hz) as usize;
    let ratio = target_hz / source_hz;
    let cutoff = ratio.min(1.0) * RESAMPLE_ROLLOFF;
    let half = RESAMPLE_HALF_TAPS / ratio.min(1.0);
    let i0_beta = bessel_i0(KAISER_BETA);
    (0..out_len)
        .map(|m| {
            let u = m as f64 / ratio;
            let lo = libm::ceil(u - half) as isize;
            let hi = libm::floor(u + half) as isize;
            let (mut acc, mut norm) = (0.0, 0.0);
            for k in lo..=hi {
                let tau = u - k as f64;
                let r = tau / half;
                let w = bessel_i0(KAISER_BETA * libm::sqrt((1.0 - r * r).max(0.0))) / i0_beta;
                let h = cutoff * sinc(cutoff * tau) * w;
                acc += h * x[reflect(k, n)];
                norm += h;
            }
            acc / norm
        })
        .collect()
}

pub fn resample(rec: &Recording, target_hz: f64) -> Result<Recording> {
    if !(target_hz.is_finite() && target_hz > 0.0) {
        return Err(Error::InvalidConfig(format!("target rate {target_hz} must be positive")));
    }
    let fs = rec.sample_rate_hz();
    if target_hz == fs {
        return Ok(rec.clone());
    }
    rec.map_channels(target_hz, |x| resample_channel(x, fs, target_hz))
}

fn seconds_to_samples(seconds: f64, rate: f64) -> Result<usize> {
    let exact = seconds * rate;
    let rounded = libm::round(exact);
    if !(seconds >= 0.0) || (exact - rounded).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!(
            "{seconds} s at {rate} Hz is not a whole number of samples"
        )));
    }
    Ok(rounded as usize)
}

/// Cuts non-overlapping windows and drops any whose absolute amplitude
/// exceeds `amp_thresh_uv` on any channel. The trailing partial window is
/// discarded. Kept segments carry their `window_index`.
pub fn segment_and_reject(rec: &Recording, window_s: f64, amp_thresh_uv: f64) -> Result<Vec<Segment>> {
    let window = seconds_to_samples(window_s, rec.sample_rate_hz())?;
    if window == 0 {
        return Err(Error::InvalidConfig("window must span at least one sample".into()));
    }
    if window > rec.len() {
        return Err(Error::WindowTooLong { window, available: rec.len() });
    }
    let count = rec.len() / window;
    let c = rec.channels();
    let mut out = Vec::new();
    for w in 0..count {
        let mut data = Vec::with_capacity(c * window);
        for ch in 0..c {
            data.extend(rec.channel(ch)[w * window..(w + 1) * window].iter().map(|&v| f64::from(v)));
        }
        if data.iter().all(|v| v.abs() <= amp_thresh_uv) {
            let mut seg = Segment::new(c, window, rec.sample_rate_hz(), data)?;
            seg.window_index = w;
            out.push(seg);
        }
    }
    Ok(out)
}

/// Number of whole windows `segment_and_reject` considers.
pub fn window_count(rec: &Recording, window_s: f64) -> Result<usize> {
    let window = seconds_to_samples(window_s, rec.sample_rate_hz())?.max(1);
    Ok(rec.len() / window)
}

pub fn normalize(seg: &Segment, scale_uv: f64) -> Result<Segment> {
    if !(scale_uv > 0.0) {
        return Err(Error::InvalidConfig(format!("scale {scale_uv} must be positive")));
    }
    let mut out = seg.clone();
    out.data.iter_mut().for_each(|v| *v /= scale_uv);
    Ok(out)
}

pub fn trim_boundaries(rec: &Recording, seconds: f64) -> Result<Recording> {
    let trim = libm::round(seconds * rec.sample_rate_hz()) as usize;
    if seconds < 0.0 || 2 * trim >= rec.len() {
        return Err(Error::TooShort { trim, available: rec.len() });
    }
    if trim == 0 {
        return Ok(rec.clone());
    }
    let fs = rec.sample_rate_hz();
    rec.map_channels(fs, |x| x[trim..x.len() - trim].to_vec())
}

/// The full preprocessing recipe, with defaults matching the reference
/// protocol: trim 60 s per end, 0.3-75 Hz band-pass, 60 Hz notch, resample
/// to 200 Hz, 30 s windows, reject above 100 uV, scale by 100 uV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub band_hz: (f64, f64),
    pub notch_hz: Option<f64>,
    pub resample_hz: f64,
    pub window_s: f64,
    pub amp_thresh_uv: f64,
    pub trim_s: f64,
    pub scale_uv: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            band_hz: (0.3, 75.0),
            notch_hz: Some(60.0),
            resample_hz: 200.0,
            window_s: 30.0,
            amp_thresh_uv: 100.0,
            trim_s: 60.0,
            scale_uv: 100.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    /// Normalized segments that passed rejection.
    pub segments: Vec<Segment>,
    pub windows: usize,
    pub rejected: usize,
}

pub fn run_pipeline(rec: &Recording, cfg: &PreprocessConfig) -> Result<PreprocessOutput> {
    let mut cur = trim_boundaries(rec, cfg.trim_s)?;
    let (low, high) = cfg.band_hz;
    cur = bandpass(&cur, low, high)?;
    if let Some(f) = cfg.notch_hz {
        cur = notch(&cur, f)?;
    }
    cur = resample(&cur, cfg.resample_hz)?;
    let windows = window_count(&cur, cfg.window_s)?;
    let kept = segment_and_reject(&cur, cfg.window_s, cfg.amp_thresh_uv)?;
    let rejected = windows - kept.len();
    let segments = kept.iter().map(|s| normalize(s, cfg.scale_uv)).collect::<Result<Vec<_>>>()?;
    Ok(PreprocessOutput { segments, windows, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tone(freq: f64, fs: f64, n: usize, amp: f64) -> Vec<f64> {
        (0..n).map(|i| amp * libm::sin(2.0 * PI * freq * i as f64 / fs)).collect()
    }

    fn rms(x: &[f64]) -> f64 {
        libm::sqrt(x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64)
    }

    fn rec_of(rows: &[Vec<f64>], fs: f64) -> Recording {
        Recording::from_rows(crate::signal::default_labels(rows.len()), fs, rows).unwrap()
    }

    #[test]
    fn butterworth_cutoff_is_half_power() {
        let lp = Sos::butter4_lowpass(75.0, 200.0);
        assert!((lp.magnitude(75.0, 200.0) - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
        assert!((lp.magnitude(0.0, 200.0) - 1.0).abs() < 1e-12);
        let hp = Sos::butter4_highpass(0.3, 200.0);
        assert!((hp.magnitude(0.3, 200.0) - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
    }

    #[test]
    fn bandpass_attenuates_100hz_and_keeps_10hz() {
        let fs = 400.0;
        let hi = tone(100.0, fs, 4000, 1.0);
        let lo = tone(10.0, fs, 4000, 1.0);
        let out = bandpass(&rec_of(&[hi.clone(), lo.clone()], fs), 0.3, 75.0).unwrap();
        let r = rms(&out.channel_f64(0)) / rms(&hi);
        assert!(r < 0.1, "100 Hz gain {r}, design {}", Sos::butter4_bandpass(0.3, 75.0, fs).magnitude(100.0, fs));
        let kept = rms(&out.channel_f64(1)) / rms(&lo);
        assert!((kept - 1.0).abs() < 0.1, "10 Hz gain {kept}");
    }

    #[test]
    fn invalid_bands() {
        let r = rec_of(&[vec![0.0; 100]], 200.0);
        assert!(matches!(bandpass(&r, 75.0, 0.3), Err(Error::InvalidBand(_))));
        assert!(matches!(bandpass(&r, 0.3, 100.0), Err(Error::InvalidBand(_))));
        assert!(matches!(notch(&r, 100.0), Err(Error::InvalidBand(_))));
        assert!(matches!(notch(&r, 0.0), Err(Error::InvalidBand(_))));
    }

    #[test]
    fn notch_removes_line_and_spares_neighbours() {
        let fs = 200.0;
        let line = tone(60.0, fs, 4000, 1.0);
        let alpha = tone(10.0, fs, 4000, 1.0);
        let side = tone(50.0, fs, 4000, 1.0);
        let out = notch(&rec_of(&[line.clone(), alpha.clone(), side.clone()], fs), 60.0).unwrap();
        assert!(rms(&out.channel_f64(0)) < 0.1 * rms(&line));
        assert!(rms(&out.channel_f64(1)) >= 0.7 * rms(&alpha));
        // 60 +/- 10 Hz: no more than 3 dB lost
        let db = 20.0 * libm::log10(rms(&out.channel_f64(2)) / rms(&side));
        assert!(db > -3.0, "{db} dB");
    }

    #[test]
    fn filters_commute_with_channel_permutation() {
        let fs = 200.0;
        let a = tone(7.0, fs, 600, 20.0);
        let b = tone(61.0, fs, 600, 5.0);
        let ab = bandpass(&rec_of(&[a.clone(), b.clone()], fs), 1.0, 40.0).unwrap();
        let ba = bandpass(&rec_of(&[b, a], fs), 1.0, 40.0).unwrap();
        assert_eq!(ab.channel(0), ba.channel(1));
        assert_eq!(ab.channel(1), ba.channel(0));
    }

    fn fit_sinusoid(x: &[f64], freq: f64, fs: f64) -> f64 {
        // least-squares amplitude of a known-frequency sinusoid
        let (mut s, mut c) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let w = 2.0 * PI * freq * i as f64 / fs;
            s += v * libm::sin(w);
            c += v * libm::cos(w);
        }
        let n = x.len() as f64;
        2.0 * libm::sqrt(s * s + c * c) / n
    }

    #[test]
    fn resample_preserves_low_tone() {
        let x = tone(5.0, 400.0, 4000, 30.0);
        let out = resample(&rec_of(&[x], 400.0), 200.0).unwrap();
        assert_eq!(out.len(), 2000);
        let y = out.channel_f64(0);
        let interior = &y[200..1800];
        let amp = fit_sinusoid(interior, 5.0, 200.0);
        assert!((amp / 30.0 - 1.0).abs() < 0.05, "amplitude {amp}");
        // frequency check: the fitted amplitude at 5 Hz dominates neighbours
        assert!(fit_sinusoid(interior, 4.0, 200.0) < 0.1 * amp);
        assert!(fit_sinusoid(interior, 6.0, 200.0) < 0.1 * amp);
    }

    #[test]
    fn resample_lengths_and_identity() {
        let r = rec_of(&[vec![1.0; 2560]], 256.0);
        assert_eq!(resample(&r, 200.0).unwrap().len(), 2000);
        assert_eq!(resample(&r, 256.0).unwrap(), r);
    }

    #[test]
    fn segmentation_rules() {
        let r = rec_of(&[vec![10.0; 6000]], 200.0);
        assert_eq!(segment_and_reject(&r, 30.0, 100.0).unwrap().len(), 1);

        let r = rec_of(&[vec![10.0; 6500]], 200.0);
        let segs = segment_and_reject(&r, 30.0, 100.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].len, 6000);

        let mut x = vec![10.0; 12000];
        x[7000] = 150.0;
        let segs = segment_and_reject(&rec_of(&[x], 200.0), 30.0, 100.0).unwrap();
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].window_index, 0);

        let short = rec_of(&[vec![0.0; 100]], 200.0);
        assert!(matches!(segment_and_reject(&short, 30.0, 100.0), Err(Error::WindowTooLong { .. })));
    }

    #[test]
    fn normalize_divides() {
        let seg = Segment::new(1, 3, 200.0, vec![50.0, -100.0, 0.0]).unwrap();
        assert_eq!(normalize(&seg, 100.0).unwrap().data, vec![0.5, -1.0, 0.0]);
        let zero = Segment::new(1, 2, 200.0, vec![0.0, 0.0]).unwrap();
        assert_eq!(normalize(&zero, 100.0).unwrap().data, vec![0.0, 0.0]);
    }

    #[test]
    fn trimming() {
        let r = rec_of(&[vec![1.0; 6000]], 200.0);
        assert_eq!(trim_boundaries(&r, 5.0).unwrap().len(), 4000);
        assert_eq!(trim_boundaries(&r, 0.0).unwrap(), r);
        let short = rec_of(&[vec![1.0; 1000]], 200.0);
        assert!(matches!(trim_boundaries(&short, 5.0), Err(Error::TooShort { .. })));
    }
}
