//! Patch encoder, transformer encoder and reconstruction decoders.
//!
//! Activations are stacked as `[batch * seq_len, d]` matrices; attention is
//! computed per sample so no information crosses sample boundaries.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};

use crate::autodiff::{ConvGeom, Graph, ParamId, ParamStore, Tensor, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::patching::PatchGrid;
use crate::rng::Rng;

/// Standard deviation for position tables, mask tokens and code embeddings.
/// Output heads start near a constant prediction.
pub const OUTPUT_HEAD_GAIN: f64 = 0.01;

pub const EMBED_INIT_STD: f64 = 0.02;

pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape matches")
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// LeCun-normal weights, zero bias.
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / libm::sqrt(fan_in as f64);
        let w = store.add(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], std));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b: Some(b) }
    }

    /// LeCun-normal weights shrunk by `gain`, zero bias.
    pub fn scaled(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, gain: f64, rng: &mut Rng) -> Self {
        let std = gain / libm::sqrt(fan_in as f64);
        let w = store.add(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], std));
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b: Some(b) }
    }

    pub fn without_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let std = 1.0 / libm::sqrt(fan_in as f64);
        let w = store.add(format!("{name}.w"), normal_tensor(rng, &[fan_in, fan_out], std));
        Self { w, b: None }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.tape.layer_norm(x, gain, bias)
    }
}

/// Pre-norm transformer block: multi-head self-attention then a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub heads: usize,
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, ffn: usize, rng: &mut Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            wq: Linear::new(store, &format!("{name}.wq"), d, d, rng),
            // A key bias shifts every score of a query equally; softmax ignores it.
            wk: Linear::without_bias(store, &format!("{name}.wk"), d, d, rng),
            wv: Linear::new(store, &format!("{name}.wv"), d, d, rng),
            wo: Linear::new(store, &format!("{name}.wo"), d, d, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff1: Linear::new(store, &format!("{name}.ff1"), d, ffn, rng),
            ff2: Linear::new(store, &format!("{name}.ff2"), ffn, d, rng),
            heads,
        }
    }

    /// `x: [batch * seq_len, d]`.
    pub fn forward(&self, g: &mut Graph, x: Var, seq_len: usize) -> Result<Var> {
        let h = self.ln1.forward(g, x)?;
        let att = self.attention(g, h, seq_len)?;
        let x = g.tape.add(x, att)?;
        let h = self.ln2.forward(g, x)?;
        let h = self.ff1.forward(g, h)?;
        let h = g.tape.gelu(h);
        let h = self.ff2.forward(g, h)?;
        g.tape.add(x, h)
    }

    fn attention(&self, g: &mut Graph, x: Var, seq_len: usize) -> Result<Var> {
        let shape = g.tape.shape(x).to_vec();
        let (rows, d) = (shape[0], shape[1]);
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(Error::ShapeMismatch(format!("{rows} rows do not split into sequences of {seq_len}")));
        }
        let dh = d / self.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let q = self.wq.forward(g, x)?;
        let k = self.wk.forward(g, x)?;
        let v = self.wv.forward(g, x)?;
        let mut per_sample = Vec::with_capacity(rows / seq_len);
        for s in 0..rows / seq_len {
            let (qs, ks, vs) = if rows == seq_len {
                (q, k, v)
            } else {
                (
                    g.tape.slice_rows(q, s * seq_len, seq_len)?,
                    g.tape.slice_rows(k, s * seq_len, seq_len)?,
                    g.tape.slice_rows(v, s * seq_len, seq_len)?,
                )
            };
            let mut heads = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let qh = g.tape.slice_cols(qs, hd * dh, dh)?;
                let kh = g.tape.slice_cols(ks, hd * dh, dh)?;
                let vh = g.tape.slice_cols(vs, hd * dh, dh)?;
                let kt = g.tape.transpose(kh)?;
                let scores = g.tape.matmul(qh, kt)?;
                let scores = g.tape.scale(scores, scale);
                let weights = g.tape.softmax(scores);
                heads.push(g.tape.matmul(weights, vh)?);
            }
            per_sample.push(if heads.len() == 1 { heads[0] } else { g.tape.concat_cols(&heads)? });
        }
        let merged = if per_sample.len() == 1 { per_sample[0] } else { g.tape.concat_rows(&per_sample)? };
        self.wo.forward(g, merged)
    }
}

/// One temporal convolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvStage {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// `(in_ch, out_ch, kernel, stride, pad)` for the three stages.
pub const PATCH_CONV_STAGES: [(usize, usize, usize, usize, usize); 3] =
    [(1, 8, 15, 8, 7), (8, 8, 3, 1, 1), (8, 8, 3, 1, 1)];

/// Three conv + GELU stages over each raw patch, then flatten, project and normalize.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchEncoder {
    pub stages: Vec<ConvStage>,
    pub proj: Linear,
    pub norm: LayerNorm,
    pub patch_len: usize,
    pub flat_dim: usize,
}

impl PatchEncoder {
    pub fn new(store: &mut ParamStore, name: &str, patch_len: usize, d: usize, rng: &mut Rng) -> Self {
        let mut stages = Vec::new();
        let mut len = patch_len;
        for (i, &(in_ch, out_ch, kernel, stride, pad)) in PATCH_CONV_STAGES.iter().enumerate() {
            let std = 1.0 / libm::sqrt((in_ch * kernel) as f64);
            let w = store.add(format!("{name}.conv{i}.w"), normal_tensor(rng, &[out_ch, in_ch, kernel], std));
            let b = store.add(format!("{name}.conv{i}.b"), Tensor::zeros(&[out_ch]));
            stages.push(ConvStage { w, b, in_ch, out_ch, kernel, stride, pad });
            len = ConvGeom::out_len(len, kernel, stride, pad);
        }
        let flat_dim = stages.last().map_or(patch_len, |s| s.out_ch) * len;
        let proj = Linear::new(store, &format!("{name}.proj"), flat_dim, d, rng);
        let norm = LayerNorm::new(store, &format!("{name}.norm"), d);
        Self { stages, proj, norm, patch_len, flat_dim }
    }

    /// `patches: [M, P]` -> `[M, d]`.
    pub fn forward(&self, g: &mut Graph, patches: Var) -> Result<Var> {
        let shape = g.tape.shape(patches).to_vec();
        if shape.len() != 2 || shape[1] != self.patch_len {
            return Err(Error::ShapeMismatch(format!("patch encoder expects [M, {}], got {shape:?}", self.patch_len)));
        }
        let m = shape[0];
        let mut x = g.tape.reshape(patches, &[m, 1, self.patch_len])?;
        for s in &self.stages {
            let w = g.param(s.w);
            let b = g.param(s.b);
            x = g.tape.conv1d(x, w, b, s.stride, s.pad)?;
            x = g.tape.gelu(x);
        }
        let flat = g.tape.reshape(x, &[m, self.flat_dim])?;
        let h = self.proj.forward(g, flat)?;
        self.norm.forward(g, h)
    }
}

/// Patch encoder, learned position table, transformer stack and final norm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoder {
    pub patch: PatchEncoder,
    pub position: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub use_position: bool,
    pub max_seq_len: usize,
}

/// Stacks the token rows of several grids into `[sum N, P]`.
pub fn stack_patches(grids: &[&PatchGrid]) -> Result<(Tensor, usize)> {
    let first = grids.first().ok_or_else(|| Error::ShapeMismatch(String::from("empty batch")))?;
    let n = first.len();
    let p = first.patch_len;
    let mut data = Vec::with_capacity(grids.len() * n * p);
    for g in grids {
        if g.len() != n || g.patch_len != p {
            return Err(Error::ShapeMismatch(format!(
                "batch mixes grids of {} x {} and {} x {}",
                n,
                p,
                g.len(),
                g.patch_len
            )));
        }
        data.extend_from_slice(g.data());
    }
    Ok((Tensor::matrix(grids.len() * n, p, data)?, n))
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let patch = PatchEncoder::new(store, &format!("{name}.patch"), cfg.patch_len, d, rng);
        let position = store.add(format!("{name}.position"), normal_tensor(rng, &[cfg.max_seq_len, d], EMBED_INIT_STD));
        let blocks = (0..cfg.encoder_layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), d, cfg.heads, cfg.ffn_dim, rng))
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), d);
        Self { patch, position, blocks, ln_f, use_position: true, max_seq_len: cfg.max_seq_len }
    }

    /// Per-patch embeddings before position and attention: `[B*N, d]`.
    pub fn embed(&self, g: &mut Graph, grids: &[&PatchGrid]) -> Result<(Var, usize)> {
        let (patches, n) = stack_patches(grids)?;
        if n > self.max_seq_len {
            return Err(Error::ShapeMismatch(format!("sequence of {n} exceeds position table of {}", self.max_seq_len)));
        }
        let x = g.constant(patches);
        Ok((self.patch.forward(g, x)?, n))
    }

    /// Adds positions and runs the transformer stack over `[B*N, d]`.
    pub fn contextualize(&self, g: &mut Graph, x: Var, seq_len: usize) -> Result<Var> {
        let rows = g.tape.shape(x)[0];
        let mut h = x;
        if self.use_position {
            let table = g.param(self.position);
            let idx: Vec<usize> = (0..rows).map(|r| r % seq_len).collect();
            let pos = g.tape.select_rows(table, idx)?;
            h = g.tape.add(h, pos)?;
        }
        for b in &self.blocks {
            h = b.forward(g, h, seq_len)?;
        }
        self.ln_f.forward(g, h)
    }

    /// `[B*N, d]` contextual embeddings for a batch of equally shaped grids.
    pub fn encode(&self, g: &mut Graph, grids: &[&PatchGrid]) -> Result<Var> {
        let (x, n) = self.embed(g, grids)?;
        self.contextualize(g, x, n)
    }

    /// Like [`Encoder::encode`], with the input rows listed in `masks[s]`
    /// (per-sample token indices) replaced by `mask_token` before positions
    /// are added.
    pub fn encode_masked(&self, g: &mut Graph, grids: &[&PatchGrid], masks: &[Vec<usize>], mask_token: ParamId) -> Result<Var> {
        let (x, n) = self.embed(g, grids)?;
        let x = substitute_rows(g, x, n, masks, mask_token)?;
        self.contextualize(g, x, n)
    }
}

/// Replaces the masked rows of `x` with the mask token.
pub fn substitute_rows(g: &mut Graph, x: Var, seq_len: usize, masks: &[Vec<usize>], mask_token: ParamId) -> Result<Var> {
    let rows = g.tape.shape(x)[0];
    let d = g.tape.shape(x)[1];
    if masks.len() * seq_len != rows {
        return Err(Error::ShapeMismatch(format!("{} masks for {} sequences", masks.len(), rows / seq_len)));
    }
    let mut idx: Vec<usize> = (0..rows).collect();
    let mut any = false;
    for (s, m) in masks.iter().enumerate() {
        for &i in m {
            if i >= seq_len {
                return Err(Error::IndexOutOfRange { index: i, bound: seq_len });
            }
            idx[s * seq_len + i] = rows;
            any = true;
        }
    }
    if !any {
        return Ok(x);
    }
    let token = g.param(mask_token);
    let token = g.tape.reshape(token, &[1, d])?;
    let extended = g.tape.concat_rows(&[x, token])?;
    g.tape.select_rows(extended, idx)
}

/// Transformer block(s) over the quantized embedding followed by one or
/// more linear heads to length-`P` outputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoder {
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
    pub heads: Vec<Linear>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, n_heads: usize, rng: &mut Rng) -> Self {
        let d = cfg.embed_dim;
        let blocks = (0..cfg.decoder_layers)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), d, cfg.heads, cfg.ffn_dim, rng))
            .collect();
        let ln = LayerNorm::new(store, &format!("{name}.ln"), d);
        let heads = (0..n_heads)
            .map(|i| Linear::scaled(store, &format!("{name}.head{i}"), d, cfg.patch_len, OUTPUT_HEAD_GAIN, rng))
            .collect();
        Self { blocks, ln, heads }
    }

    /// Shared trunk output `[M, d]`.
    pub fn trunk(&self, g: &mut Graph, hq: Var, seq_len: usize) -> Result<Var> {
        let mut h = hq;
        for b in &self.blocks {
            h = b.forward(g, h, seq_len)?;
        }
        self.ln.forward(g, h)
    }
}

/// Time-domain decoder: one waveform head.
pub fn decode_time(g: &mut Graph, dec: &Decoder, hq: Var, seq_len: usize) -> Result<Var> {
    let h = dec.trunk(g, hq, seq_len)?;
    dec.heads[0].forward(g, h)
}

/// Frequency decoder: amplitude head and a phase head bounded by `tanh * pi`.
pub fn decode_freq(g: &mut Graph, dec: &Decoder, hq: Var, seq_len: usize) -> Result<(Var, Var)> {
    let h = dec.trunk(g, hq, seq_len)?;
    let amp = dec.heads[0].forward(g, h)?;
    let raw = dec.heads[1].forward(g, h)?;
    let t = g.tape.tanh(raw);
    let phase = g.tape.scale(t, core::f64::consts::PI);
    Ok((amp, phase))
}

/// Rebuilds `store` from `loaded`, requiring identical names and shapes.
pub fn adopt_params(store: &mut ParamStore, loaded: ParamStore) -> Result<()> {
    if store.len() != loaded.len() {
        return Err(Error::ShapeMismatch(format!("expected {} tensors, found {}", store.len(), loaded.len())));
    }
    for i in 0..store.len() {
        if store.name(i) != loaded.name(i) || store.tensor(i).shape() != loaded.tensor(i).shape() {
            return Err(Error::ShapeMismatch(format!(
                "tensor {i}: expected {} {:?}, found {} {:?}",
                store.name(i),
                store.tensor(i).shape(),
                loaded.name(i),
                loaded.tensor(i).shape()
            )));
        }
    }
    *store = loaded;
    Ok(())
}

#[cfg(test)]
fn zeros_like(store: &mut ParamStore, id: ParamId) {
    let shape = store.get(id).shape().to_vec();
    *store.get_mut(id) = Tensor::zeros(&shape);
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use crate::autodiff::grad_check_params;
    use crate::rng::{stream, Stream};

    fn small_cfg() -> ModelConfig {
        ModelConfig { embed_dim: 8, heads: 2, ffn_dim: 16, encoder_layers: 1, patch_len: 16, max_seq_len: 8, ..ModelConfig::default() }
    }

    fn grid(c: usize, a: usize, p: usize, seed: u64) -> PatchGrid {
        let mut rng = stream(seed, Stream::Data);
        let t = normal_tensor(&mut rng, &[c * a * p], 0.3);
        PatchGrid::new(c, a, p, 200.0, t.into_data()).unwrap()
    }

    #[test]
    fn patch_encoder_geometry() {
        let mut store = ParamStore::new();
        let mut rng = stream(1, Stream::Init);
        let pe = PatchEncoder::new(&mut store, "pe", 200, 32, &mut rng);
        assert_eq!(pe.flat_dim, 200);
    }

    #[test]
    fn encode_shape() {
        let cfg = ModelConfig { embed_dim: 32, heads: 4, ffn_dim: 64, encoder_layers: 1, ..ModelConfig::default() };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut stream(1, Stream::Init));
        let gr = grid(2, 3, 200, 2);
        let mut g = Graph::inference(&store);
        let h = enc.encode(&mut g, &[&gr]).unwrap();
        assert_eq!(g.value(h).shape(), &[6, 32]);
    }

    #[test]
    fn identical_patches_without_position_give_identical_rows() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut enc = Encoder::new(&mut store, "enc", &cfg, &mut stream(1, Stream::Init));
        enc.use_position = false;
        let p: Vec<f64> = (0..16).map(|i| libm::sin(i as f64)).collect();
        let mut data = p.clone();
        data.extend((0..16).map(|i| i as f64 * 0.1));
        data.extend_from_slice(&p);
        let gr = PatchGrid::new(1, 3, 16, 200.0, data).unwrap();
        let mut g = Graph::inference(&store);
        let h = enc.encode(&mut g, &[&gr]).unwrap();
        let v = g.value(h);
        for j in 0..8 {
            assert!((v.row(0)[j] - v.row(2)[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_projection_gives_constant_rows() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let mut enc = Encoder::new(&mut store, "enc", &cfg, &mut stream(1, Stream::Init));
        enc.use_position = false;
        zeros_like(&mut store, enc.patch.proj.w);
        let gr = grid(2, 2, 16, 3);
        let mut g = Graph::inference(&store);
        let (x, _) = enc.embed(&mut g, &[&gr]).unwrap();
        let v = g.value(x);
        for r in 1..4 {
            assert_eq!(v.row(r), v.row(0));
        }
    }

    #[test]
    fn batch_equals_stacked_singles() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut stream(1, Stream::Init));
        let (a, b) = (grid(2, 2, 16, 4), grid(2, 2, 16, 5));
        let run = |gs: &[&PatchGrid]| {
            let mut g = Graph::inference(&store);
            let h = enc.encode(&mut g, gs).unwrap();
            g.value(h).clone().into_data()
        };
        let both = run(&[&a, &b]);
        let mut singles = run(&[&a]);
        singles.extend(run(&[&b]));
        for (x, y) in both.iter().zip(&singles) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_encoding_substitution() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut stream(1, Stream::Init));
        let token = store.add("mask", normal_tensor(&mut stream(2, Stream::Init), &[8], 0.5));
        let (a, b) = (grid(1, 4, 16, 6), grid(1, 4, 16, 7));

        let out = |gr: &PatchGrid, mask: Vec<usize>| {
            let mut g = Graph::inference(&store);
            let h = enc.encode_masked(&mut g, &[gr], &[mask], token).unwrap();
            g.value(h).clone()
        };
        let mut g = Graph::inference(&store);
        let plain = enc.encode(&mut g, &[&a]).unwrap();
        assert_eq!(&out(&a, vec![]), g.value(plain));
        assert_eq!(out(&a, vec![0, 1, 2, 3]), out(&b, vec![0, 1, 2, 3]));

        let mut g = Graph::inference(&store);
        let (x, n) = enc.embed(&mut g, &[&a]).unwrap();
        let sub = substitute_rows(&mut g, x, n, &[vec![0]], token).unwrap();
        assert_eq!(g.value(sub).row(0), store.get(token).data());
        for r in 1..4 {
            assert_eq!(g.value(sub).row(r), g.value(x).row(r));
        }
        let mut g = Graph::inference(&store);
        assert!(matches!(enc.encode_masked(&mut g, &[&a], &[vec![4]], token), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn decoder_shapes_and_range() {
        let cfg = ModelConfig { embed_dim: 32, heads: 4, ffn_dim: 64, ..ModelConfig::default() };
        let mut store = ParamStore::new();
        let mut rng = stream(1, Stream::Init);
        let dt = Decoder::new(&mut store, "dt", &cfg, 1, &mut rng);
        let df = Decoder::new(&mut store, "df", &cfg, 2, &mut rng);
        let mut g = Graph::inference(&store);
        let row = normal_tensor(&mut rng, &[32], 3.0).into_data();
        let mut data = row.clone();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let hq = g.constant(Tensor::matrix(6, 32, data).unwrap());
        let t = decode_time(&mut g, &dt, hq, 6).unwrap();
        assert_eq!(g.value(t).shape(), &[6, 200]);
        let v = g.value(t).clone();
        for r in 1..6 {
            for j in 0..200 {
                assert!((v.row(r)[j] - v.row(0)[j]).abs() < 1e-12);
            }
        }
        let (a, p) = decode_freq(&mut g, &df, hq, 6).unwrap();
        assert_eq!(g.value(a).shape(), &[6, 200]);
        assert_eq!(g.value(p).shape(), &[6, 200]);
        assert!(g.value(p).data().iter().all(|x| x.abs() < core::f64::consts::PI));
    }

    #[test]
    fn encoder_gradients() {
        let cfg = small_cfg();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut store, "enc", &cfg, &mut stream(3, Stream::Init));
        let gr = grid(2, 2, 16, 8);
        let target = normal_tensor(&mut stream(9, Stream::Data), &[4, 8], 1.0);
        let err = grad_check_params(
            |g| {
                let h = enc.encode(g, &[&gr])?;
                let t = g.constant(target.clone());
                g.tape.mse(h, t)
            },
            &store,
            1e-5,
            Some(24),
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
