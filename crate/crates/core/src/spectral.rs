//! Discrete Fourier analysis of single patches.
//!
//! Transforms are the plain length-`P` DFT with no windowing or padding.
//! [`Dft`] caches the `P` twiddle factors so repeated transforms of equal
//! length cost one table lookup per term.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    /// Largest `|X[k] - conj(X[P-k])|` over all bins.
    pub fn symmetry_error(&self) -> f64 {
        let p = self.len();
        (0..p)
            .map(|k| {
                let j = (p - k) % p;
                libm::hypot(self.re[k] - self.re[j], self.im[k] + self.im[j])
            })
            .fold(0.0, f64::max)
    }
}

/// Twiddle table for one transform length.
#[derive(Debug, Clone)]
pub struct Dft {
    len: usize,
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Dft {
    pub fn new(len: usize) -> Self {
        let (cos, sin) = (0..len)
            .map(|m| {
                let w = 2.0 * PI * m as f64 / len as f64;
                (libm::cos(w), libm::sin(w))
            })
            .unzip();
        Self { len, cos, sin }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Forward transform, `X[k] = sum_n x[n] exp(-2 pi i k n / P)`.
    pub fn forward(&self, x: &[f64]) -> Spectrum {
        assert_eq!(x.len(), self.len, "dft length mismatch");
        let p = self.len;
        let mut re = alloc::vec![0.0; p];
        let mut im = alloc::vec![0.0; p];
        for k in 0..p {
            let (mut sr, mut si) = (0.0, 0.0);
            let mut m = 0;
            for &v in x {
                sr += v * self.cos[m];
                si -= v * self.sin[m];
                m += k;
                if m >= p {
                    m -= p;
                }
            }
            re[k] = sr;
            im[k] = si;
        }
        Spectrum { re, im }
    }

    /// Power `|X[k]|^2` for `k = 0..=P/2`, computing only those bins.
    pub fn power(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.len, "dft length mismatch");
        let p = self.len;
        (0..=p / 2)
            .map(|k| {
                let (mut sr, mut si) = (0.0, 0.0);
                let mut m = 0;
                for &v in x {
                    sr += v * self.cos[m];
                    si -= v * self.sin[m];
                    m += k;
                    if m >= p {
                        m -= p;
                    }
                }
                sr * sr + si * si
            })
            .collect()
    }

    /// Inverse transform of a conjugate-symmetric spectrum.
    pub fn inverse(&self, spec: &Spectrum) -> Result<Vec<f64>> {
        let p = self.len;
        if spec.len() != p {
            return Err(Error::ShapeMismatch(alloc::format!("spectrum of length {} for a {p}-point transform", spec.len())));
        }
        let scale = spec.re.iter().chain(&spec.im).fold(1.0_f64, |m, v| m.max(v.abs()));
        let asym = spec.symmetry_error();
        if asym > SYMMETRY_TOL * scale {
            return Err(Error::AsymmetricSpectrum(asym));
        }
        Ok((0..p)
            .map(|n| {
                let mut acc = 0.0;
                let mut m = 0;
                for k in 0..p {
                    // real part of X[k] exp(+2 pi i k n / P)
                    acc += spec.re[k] * self.cos[m] - spec.im[k] * self.sin[m];
                    m += n;
                    if m >= p {
                        m -= p;
                    }
                }
                acc / p as f64
            })
            .collect())
    }
}

const SYMMETRY_TOL: f64 = 1e-6;

pub fn dft(x: &[f64]) -> Spectrum {
    Dft::new(x.len()).forward(x)
}

pub fn idft(spec: &Spectrum) -> Result<Vec<f64>> {
    Dft::new(spec.len()).inverse(spec)
}

/// Wrapped phase in `(-pi, pi]`.
pub fn wrapped_phase(re: f64, im: f64) -> f64 {
    let ph = libm::atan2(im, re);
    if ph <= -PI {
        PI
    } else {
        ph
    }
}

/// Amplitude `|X[k]|` and phase `arg X[k]` in `(-pi, pi]`.
pub fn amplitude_phase(spec: &Spectrum) -> (Vec<f64>, Vec<f64>) {
    spec.re
        .iter()
        .zip(&spec.im)
        .map(|(&r, &i)| (libm::sqrt(r * r + i * i), wrapped_phase(r, i)))
        .unzip()
}

/// Bin frequencies `k * fs / P` for `k = 0..=P/2`.
pub fn bin_frequencies(patch_len: usize, sample_rate_hz: f64) -> Vec<f64> {
    (0..=patch_len / 2).map(|k| k as f64 * sample_rate_hz / patch_len as f64).collect()
}

/// One-sided power spectrum `|X[k]|^2` and its bin frequencies.
pub fn psd(x: &[f64], sample_rate_hz: f64) -> (Vec<f64>, Vec<f64>) {
    (Dft::new(x.len()).power(x), bin_frequencies(x.len(), sample_rate_hz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn constant_is_dc_only() {
        let s = dft(&[2.5; 8]);
        assert!((s.re[0] - 20.0).abs() < 1e-12);
        for k in 1..8 {
            assert!(s.re[k].abs() < 1e-12 && s.im[k].abs() < 1e-12);
        }
    }

    #[test]
    fn zero_patch() {
        let s = dft(&[0.0; 16]);
        assert!(s.re.iter().chain(&s.im).all(|&v| v == 0.0));
    }

    #[test]
    fn impulse_round_trip() {
        let mut x = vec![0.0; 10];
        x[0] = 1.0;
        let back = idft(&dft(&x)).unwrap();
        for (a, b) in back.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_spectrum_rejected() {
        let mut s = dft(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        s.im[1] += 0.1;
        assert!(matches!(idft(&s), Err(Error::AsymmetricSpectrum(_))));
    }

    #[test]
    fn axis_phases() {
        let s = Spectrum { re: vec![0.0, -1.0, 3.0, -1.0], im: vec![8.0, 0.0, 4.0, -0.0] };
        let (amp, ph) = amplitude_phase(&s);
        assert_eq!(amp[0], 8.0);
        assert!((ph[0] - PI / 2.0).abs() < 1e-15);
        assert_eq!((amp[1], ph[1]), (1.0, PI));
        assert_eq!(amp[2], 5.0);
        assert!((ph[2] - libm::atan2(4.0, 3.0)).abs() < 1e-15);
        // negative zero imaginary part still maps into (-pi, pi]
        assert_eq!(ph[3], PI);
    }

    #[test]
    fn psd_bins() {
        let x: Vec<f64> = (0..200).map(|n| libm::sin(2.0 * PI * 10.0 * n as f64 / 200.0)).collect();
        let (power, freqs) = psd(&x, 200.0);
        assert_eq!(freqs.len(), 101);
        assert_eq!(freqs[100], 100.0);
        assert_eq!(freqs[10], 10.0);
        let peak = power.iter().enumerate().fold((0, 0.0), |b, (k, &p)| if p > b.1 { (k, p) } else { b });
        assert_eq!(peak.0, 10);

        let (power, _) = psd(&[3.0; 200], 200.0);
        assert!(power[1..].iter().all(|&p| p < 1e-18 * power[0]));
    }
}
