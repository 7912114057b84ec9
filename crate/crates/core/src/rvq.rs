//! Residual vector quantization over unit-norm codebooks learned by EMA.
//!
//! Layer 1 searches with the l2-normalized embedding; deeper layers search
//! with the raw residual. Subtraction always uses the stored unit code, so
//! `normalize(e) - sum(selected codes)` equals the final residual exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Additive guard in the EMA division.
pub const EMA_EPS: f64 = 1e-6;

pub fn l2_norm(x: &[f64]) -> f64 {
    libm::sqrt(x.iter().map(|v| v * v).sum())
}

/// Unit-norm copy of `x`; `None` when `x` is (numerically) zero.
pub fn normalized(x: &[f64]) -> Option<Vec<f64>> {
    let n = l2_norm(x);
    (n > 1e-12).then(|| x.iter().map(|v| v / n).collect())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    dim: usize,
    codes: Vec<f64>,
    counts: Vec<f64>,
    sums: Vec<f64>,
    pub decay: f64,
}

impl Codebook {
    /// Codes from rows of `vectors` (normalized), with `n = 1`, `m = v`.
    pub fn from_vectors(vectors: &[Vec<f64>], decay: f64) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if dim == 0 || vectors.len() < 2 {
            return Err(Error::InvalidConfig(format!("codebook needs at least 2 non-empty codes, got {}", vectors.len())));
        }
        let mut codes = Vec::with_capacity(vectors.len() * dim);
        for v in vectors {
            if v.len() != dim {
                return Err(Error::ShapeMismatch(format!("code of length {} in codebook of dim {dim}", v.len())));
            }
            codes.extend(normalized(v).ok_or(Error::NonFiniteInput)?);
        }
        Ok(Self { dim, counts: vec![1.0; vectors.len()], sums: codes.clone(), codes, decay })
    }

    /// `size` random unit codes.
    /// Rebuilds a codebook from stored state; code rows are re-normalized.
    pub fn from_state(dim: usize, codes: &[f64], counts: &[f64], sums: &[f64], decay: f64) -> Result<Self> {
        let k = counts.len();
        if dim == 0 || k < 2 || codes.len() != k * dim || sums.len() != k * dim {
            return Err(Error::ShapeMismatch(format!("codebook state of {k} codes, dim {dim}, {} code and {} sum values", codes.len(), sums.len())));
        }
        if counts.iter().any(|c| !(*c >= 0.0) || !c.is_finite()) || sums.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let mut book = Self { dim, codes: Vec::with_capacity(k * dim), counts: counts.to_vec(), sums: sums.to_vec(), decay };
        for row in codes.chunks_exact(dim) {
            book.codes.extend(normalized(row).ok_or(Error::NonFiniteInput)?);
        }
        Ok(book)
    }

    pub fn random(size: usize, dim: usize, decay: f64, rng: &mut Rng) -> Result<Self> {
        let vectors: Vec<Vec<f64>> = (0..size).map(|_| random_direction(dim, rng)).collect();
        Self::from_vectors(&vectors, decay)
    }

    pub fn size(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn code(&self, k: usize) -> &[f64] {
        &self.codes[k * self.dim..(k + 1) * self.dim]
    }

    pub fn counts(&self) -> &[f64] {
        &self.counts
    }

    pub fn sum(&self, k: usize) -> &[f64] {
        &self.sums[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the code nearest to `q` in Euclidean distance; ties go to
    /// the lowest index.
    pub fn nearest(&self, q: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d = sq_dist(q, self.code(k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// One EMA step from `(code index, embedding)` pairs:
    /// `n <- g n + (1-g) count`, `m <- g m + (1-g) sum`,
    /// `v <- normalize(m / (n + eps))`. A code whose running sum vanishes
    /// keeps its previous direction.
    pub fn ema_update(&mut self, assignments: &[(usize, &[f64])]) -> Result<()> {
        let (k_total, d) = (self.size(), self.dim);
        let mut count = vec![0.0; k_total];
        let mut sum = vec![0.0; k_total * d];
        for &(k, e) in assignments {
            if k >= k_total {
                return Err(Error::IndexOutOfRange { index: k, bound: k_total });
            }
            if e.len() != d {
                return Err(Error::ShapeMismatch(format!("embedding of length {} for codebook of dim {d}", e.len())));
            }
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput);
            }
            count[k] += 1.0;
            sum[k * d..(k + 1) * d].iter_mut().zip(e).for_each(|(s, x)| *s += x);
        }
        let g = self.decay;
        for k in 0..k_total {
            self.counts[k] = g * self.counts[k] + (1.0 - g) * count[k];
            let denom = self.counts[k] + EMA_EPS;
            for j in 0..d {
                self.sums[k * d + j] = g * self.sums[k * d + j] + (1.0 - g) * sum[k * d + j];
            }
            let mean: Vec<f64> = self.sums[k * d..(k + 1) * d].iter().map(|m| m / denom).collect();
            if let Some(v) = normalized(&mean) {
                self.codes[k * d..(k + 1) * d].copy_from_slice(&v);
            }
        }
        Ok(())
    }

    /// k-means++ seeding: first code uniform over `data`, each next code
    /// drawn with probability proportional to squared distance from the
    /// nearest chosen code. Codes are stored normalized; EMA state resets.
    pub fn seed_kmeanspp(&mut self, data: &[Vec<f64>], rng: &mut Rng) -> Result<()> {
        let usable: Vec<Vec<f64>> = data.iter().filter_map(|x| normalized(x)).collect();
        if usable.is_empty() {
            return Ok(());
        }
        let k_total = self.size();
        let mut chosen: Vec<Vec<f64>> = Vec::with_capacity(k_total);
        chosen.push(usable[rng.random_range(0..usable.len())].clone());
        let mut dist: Vec<f64> = usable.iter().map(|x| sq_dist(x, &chosen[0])).collect();
        while chosen.len() < k_total {
            let total: f64 = dist.iter().sum();
            let next = if total > 1e-18 {
                let mut u = rng.random::<f64>() * total;
                let mut pick = usable.len() - 1;
                for (i, &d) in dist.iter().enumerate() {
                    if u < d {
                        pick = i;
                        break;
                    }
                    u -= d;
                }
                usable[pick].clone()
            } else {
                // Fewer distinct points than codes: fill with random directions.
                random_direction(self.dim, rng)
            };
            for (i, x) in usable.iter().enumerate() {
                dist[i] = dist[i].min(sq_dist(x, &next));
            }
            chosen.push(next);
        }
        *self = Self::from_vectors(&chosen, self.decay)?;
        Ok(())
    }
}

fn random_direction(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        if let Some(u) = normalized(&v) {
            return u;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Time,
    Freq,
}

impl Domain {
    pub const BOTH: [Domain; 2] = [Domain::Time, Domain::Freq];

    pub fn index(self) -> usize {
        match self {
            Domain::Time => 0,
            Domain::Freq => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Time => "time",
            Domain::Freq => "freq",
        }
    }
}

/// Result of quantizing one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub codes: Vec<usize>,
    /// Sum of the selected unit codes.
    pub quantized: Vec<f64>,
    /// `residuals[0] = normalize(e)`, `residuals[l] = residuals[l-1] - v_l`.
    pub residuals: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RvqStack {
    pub domain: Domain,
    pub layers: Vec<Codebook>,
}

impl RvqStack {
    pub fn new(domain: Domain, layers: Vec<Codebook>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::InvalidConfig("RVQ stack needs at least one layer".into()))?;
        if layers.iter().any(|b| b.dim() != first.dim()) {
            return Err(Error::ShapeMismatch("codebooks in a stack must share their dimension".into()));
        }
        Ok(Self { domain, layers })
    }

    pub fn random(domain: Domain, depth: usize, size: usize, dim: usize, decay: f64, rng: &mut Rng) -> Result<Self> {
        let layers = (0..depth).map(|_| Codebook::random(size, dim, decay, rng)).collect::<Result<_>>()?;
        Self::new(domain, layers)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    pub fn quantize(&self, e: &[f64]) -> Result<Quantized> {
        if e.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!("embedding of length {} for stack of dim {}", e.len(), self.dim())));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let r0 = normalized(e).unwrap_or_else(|| vec![0.0; e.len()]);
        let mut residuals = Vec::with_capacity(self.depth() + 1);
        let mut codes = Vec::with_capacity(self.depth());
        let mut quantized = vec![0.0; e.len()];
        residuals.push(r0);
        for book in &self.layers {
            let r = residuals.last().expect("non-empty");
            let k = book.nearest(r);
            let v = book.code(k);
            let next: Vec<f64> = r.iter().zip(v).map(|(a, b)| a - b).collect();
            quantized.iter_mut().zip(v).for_each(|(q, x)| *q += x);
            codes.push(k);
            residuals.push(next);
        }
        Ok(Quantized { codes, quantized, residuals })
    }

    pub fn dequantize(&self, codes: &[usize]) -> Result<Vec<f64>> {
        if codes.len() != self.depth() {
            return Err(Error::ShapeMismatch(format!("{} codes for a stack of depth {}", codes.len(), self.depth())));
        }
        let mut out = vec![0.0; self.dim()];
        for (book, &k) in self.layers.iter().zip(codes) {
            if k >= book.size() {
                return Err(Error::IndexOutOfRange { index: k, bound: book.size() });
            }
            out.iter_mut().zip(book.code(k)).for_each(|(o, v)| *o += v);
        }
        Ok(out)
    }

    /// EMA-updates every layer: layer `l` receives the residual it quantized.
    pub fn ema_update(&mut self, items: &[Quantized]) -> Result<()> {
        for (l, book) in self.layers.iter_mut().enumerate() {
            let pairs: Vec<(usize, &[f64])> = items.iter().map(|q| (q.codes[l], q.residuals[l].as_slice())).collect();
            book.ema_update(&pairs)?;
        }
        Ok(())
    }

    /// k-means++ seeds layer by layer: layer 1 from the normalized
    /// embeddings, layer `l` from the residuals left by layers `1..l`.
    pub fn seed_kmeanspp(&mut self, embeddings: &[Vec<f64>], rng: &mut Rng) -> Result<()> {
        let mut residuals: Vec<Vec<f64>> = embeddings.iter().map(|e| normalized(e).unwrap_or_else(|| vec![0.0; e.len()])).collect();
        for book in &mut self.layers {
            book.seed_kmeanspp(&residuals, rng)?;
            for r in &mut residuals {
                let k = book.nearest(r);
                r.iter_mut().zip(book.code(k)).for_each(|(a, b)| *a -= b);
            }
        }
        Ok(())
    }
}

/// `beta * sum_l ||r^(l-1) - v^(l)||^2` for one item.
pub fn commitment_loss(residual_inputs: &[Vec<f64>], selected_codes: &[Vec<f64>], beta: f64) -> Result<f64> {
    if residual_inputs.len() != selected_codes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} residuals for {} codes",
            residual_inputs.len(),
            selected_codes.len()
        )));
    }
    let mut total = 0.0;
    for (r, v) in residual_inputs.iter().zip(selected_codes) {
        if r.len() != v.len() {
            return Err(Error::ShapeMismatch(format!("residual of length {} vs code of length {}", r.len(), v.len())));
        }
        total += sq_dist(r, v);
    }
    Ok(beta * total)
}

/// Code indices per token, per domain, per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    tokens: usize,
    layers: usize,
    /// `[domain][token][layer]`.
    codes: Vec<u32>,
}

impl TokenGrid {
    pub fn new(tokens: usize, layers: usize, time: &[Vec<usize>], freq: &[Vec<usize>]) -> Result<Self> {
        if time.len() != tokens || freq.len() != tokens {
            return Err(Error::ShapeMismatch(format!("token grid of {tokens} tokens got {} / {}", time.len(), freq.len())));
        }
        let mut codes = Vec::with_capacity(2 * tokens * layers);
        for per_domain in [time, freq] {
            for c in per_domain {
                if c.len() != layers {
                    return Err(Error::ShapeMismatch(format!("{} codes for {layers} layers", c.len())));
                }
                codes.extend(c.iter().map(|&k| k as u32));
            }
        }
        Ok(Self { tokens, layers, codes })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn get(&self, token: usize, domain: Domain, layer: usize) -> usize {
        self.codes[(domain.index() * self.tokens + token) * self.layers + layer] as usize
    }

    pub fn set(&mut self, token: usize, domain: Domain, layer: usize, code: usize) {
        self.codes[(domain.index() * self.tokens + token) * self.layers + layer] = code as u32;
    }

    /// All codes of one token in one domain, coarse to fine.
    pub fn codes(&self, token: usize, domain: Domain) -> &[u32] {
        let start = (domain.index() * self.tokens + token) * self.layers;
        &self.codes[start..start + self.layers]
    }
}
