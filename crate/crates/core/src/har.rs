//! Hierarchical autoregressive masked pre-training.
//!
//! A fresh encoder reads a patch grid whose masked rows are replaced by a
//! learned token. At each masked position, layer `l` of each domain is
//! predicted from the encoder output plus embeddings of the ground-truth
//! codes of layers `1..l` of the same domain (teacher forcing), and the
//! per-layer cross-entropies are weighted by `2^-(l-1)`. Targets come from a
//! frozen tokenizer.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::importance::{curriculum_weight, sample_mask, score_grid};
use crate::nets::{adopt_params, normal_tensor, Encoder, LayerNorm, Linear, EMBED_INIT_STD};
use crate::optim::{lr_at, AdamW, Schedule};
use crate::patching::PatchGrid;
use crate::rng::{stream, substream, Stream};
use crate::rvq::{Domain, TokenGrid};
use crate::tokenizer::{steps_per_epoch, Tokenizer};

/// Std of the code embedding tables, on the scale of the normalized encoder output.
pub const CODE_EMBED_STD: f64 = 1.0;

/// `lambda_l = 2^-(l-1)` for `l = 1..=layers`.
pub fn lambdas(layers: usize) -> Vec<f64> {
    (0..layers).map(|l| libm::ldexp(1.0, -(l as i32))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Teacher-forced, depth-weighted.
    #[default]
    Hierarchical,
    /// Every layer from the encoder output alone, unit weights.
    Independent,
}

impl Objective {
    pub fn weights(self, layers: usize) -> Vec<f64> {
        match self {
            Objective::Hierarchical => lambdas(layers),
            Objective::Independent => vec![1.0; layers],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerHead {
    pub norm: LayerNorm,
    pub out: Linear,
}

/// Prediction heads of one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainHeads {
    pub layers: Vec<LayerHead>,
    /// `embeds[k]` is the `[K, d]` table for codes of layer `k + 1`.
    pub embeds: Vec<ParamId>,
}

impl DomainHeads {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut crate::rng::Rng) -> Self {
        let (d, k) = (cfg.embed_dim, cfg.codebook_size);
        let layers = (0..cfg.rvq_layers)
            .map(|l| LayerHead {
                norm: LayerNorm::new(store, &format!("{name}.head{l}.norm"), d),
                out: Linear::new(store, &format!("{name}.head{l}.out"), d, k, rng),
            })
            .collect();
        let embeds = (1..cfg.rvq_layers)
            .map(|l| store.add(format!("{name}.embed{l}"), normal_tensor(rng, &[k, d], CODE_EMBED_STD)))
            .collect();
        Self { layers, embeds }
    }

    /// Logits `[M, K]` of layer `l` (0-based) for rows `h: [M, d]`,
    /// conditioned on the codes `prior[k][m]` of each given layer `k < l`.
    /// An empty `prior` gives the unconditioned prediction.
    pub fn predict_layer(&self, g: &mut Graph, h: Var, l: usize, prior: &[Vec<usize>]) -> Result<Var> {
        if l >= self.layers.len() {
            return Err(Error::IndexOutOfRange { index: l, bound: self.layers.len() });
        }
        if prior.len() > l {
            return Err(Error::ShapeMismatch(format!("layer {l} cannot condition on {} layers", prior.len())));
        }
        let mut x = h;
        for (k, codes) in prior.iter().enumerate() {
            let table = g.param(self.embeds[k]);
            let kk = g.tape.shape(table)[0];
            if let Some(&bad) = codes.iter().find(|&&c| c >= kk) {
                return Err(Error::IndexOutOfRange { index: bad, bound: kk });
            }
            let e = g.tape.embedding_lookup(table, codes)?;
            x = g.tape.add(x, e)?;
        }
        let head = &self.layers[l];
        let x = head.norm.forward(g, x)?;
        head.out.forward(g, x)
    }
}

/// Per-layer cross-entropy and top-1 accuracy, `[domain][layer]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HarLossReport {
    pub ce: [Vec<f64>; 2],
    pub accuracy: [Vec<f64>; 2],
    pub lambdas: Vec<f64>,
    pub total: f64,
    pub masked: usize,
}

/// Ground-truth codes at the masked rows: `[domain][layer][row]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedTargets {
    pub rows: Vec<usize>,
    pub codes: [Vec<Vec<usize>>; 2],
}

impl MaskedTargets {
    /// `masks[s]` are token indices of sample `s`; rows are `s * N + i`.
    pub fn gather(tokens: &[&TokenGrid], masks: &[Vec<usize>], layers: usize) -> Result<Self> {
        if tokens.len() != masks.len() {
            return Err(Error::ShapeMismatch(format!("{} token grids for {} masks", tokens.len(), masks.len())));
        }
        let mut rows = Vec::new();
        let mut codes = [vec![Vec::new(); layers], vec![Vec::new(); layers]];
        for (s, (tg, mask)) in tokens.iter().zip(masks).enumerate() {
            if tg.layers() != layers {
                return Err(Error::ShapeMismatch(format!("token grid has {} layers, model {layers}", tg.layers())));
            }
            for &i in mask {
                if i >= tg.tokens() {
                    return Err(Error::IndexOutOfRange { index: i, bound: tg.tokens() });
                }
                rows.push(s * tg.tokens() + i);
                for d in Domain::BOTH {
                    for (l, c) in tg.codes(i, d).iter().enumerate() {
                        codes[d.index()][l].push(*c as usize);
                    }
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(Self { rows, codes })
    }
}

pub struct HarForward {
    pub loss: Var,
    pub report: HarLossReport,
}

fn argmax_rows(values: &[f64], k: usize) -> Vec<usize> {
    values
        .chunks_exact(k)
        .map(|r| r.iter().enumerate().fold(0, |best, (j, v)| if *v > r[best] { j } else { best }))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub mask_token: ParamId,
    pub heads: [DomainHeads; 2],
}

impl HarModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = substream(cfg.seed, Stream::Init, 1);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "har.encoder", cfg, &mut rng);
        let mask_token = params.add("har.mask_token", normal_tensor(&mut rng, &[cfg.embed_dim], EMBED_INIT_STD));
        let heads = [DomainHeads::new(&mut params, "har.time", cfg, &mut rng), DomainHeads::new(&mut params, "har.freq", cfg, &mut rng)];
        Ok(Self { cfg: cfg.clone(), params, encoder, mask_token, heads })
    }

    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let mut m = Self::new(cfg)?;
        adopt_params(&mut m.params, params)?;
        Ok(m)
    }

    /// Masked encoder output at the masked rows, `[M, d]`.
    pub fn masked_hidden(&self, g: &mut Graph, grids: &[&PatchGrid], masks: &[Vec<usize>], rows: &[usize]) -> Result<Var> {
        let h = self.encoder.encode_masked(g, grids, masks, self.mask_token)?;
        g.tape.select_rows(h, rows.to_vec())
    }

    /// Loss over the masked rows. `lambdas` weights each layer (both domains).
    pub fn har_loss(&self, g: &mut Graph, h: Var, targets: &MaskedTargets, objective: Objective, lambdas: &[f64]) -> Result<HarForward> {
        let layers = self.cfg.rvq_layers;
        if lambdas.len() != layers {
            return Err(Error::ShapeMismatch(format!("{} weights for {layers} layers", lambdas.len())));
        }
        let k = self.cfg.codebook_size;
        let m = targets.rows.len();
        if m == 0 {
            return Err(Error::EmptyMask);
        }
        let mut report = HarLossReport { lambdas: lambdas.to_vec(), masked: m, ..HarLossReport::default() };
        let mut terms = Vec::new();
        for d in Domain::BOTH {
            let codes = &targets.codes[d.index()];
            for l in 0..layers {
                let prior: &[Vec<usize>] = match objective {
                    Objective::Hierarchical => &codes[..l],
                    Objective::Independent => &[],
                };
                let logits = self.heads[d.index()].predict_layer(g, h, l, prior)?;
                let ce = g.tape.cross_entropy_with_logits(logits, &codes[l])?;
                let pred = argmax_rows(g.value(logits).data(), k);
                let hits = pred.iter().zip(&codes[l]).filter(|(a, b)| a == b).count();
                report.ce[d.index()].push(g.value(ce).item());
                report.accuracy[d.index()].push(hits as f64 / m as f64);
                terms.push(g.tape.scale(ce, lambdas[l]));
            }
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.tape.add(total, t)?;
        }
        report.total = g.value(total).item();
        Ok(HarForward { loss: total, report })
    }

    /// Teacher-forced loss of a batch under the given masks.
    pub fn forward(
        &self,
        g: &mut Graph,
        grids: &[&PatchGrid],
        masks: &[Vec<usize>],
        tokens: &[&TokenGrid],
        objective: Objective,
    ) -> Result<HarForward> {
        let targets = MaskedTargets::gather(tokens, masks, self.cfg.rvq_layers)?;
        let h = self.masked_hidden(g, grids, masks, &targets.rows)?;
        self.har_loss(g, h, &targets, objective, &objective.weights(self.cfg.rvq_layers))
    }

    /// Greedy chain at every row of `h`: layer `l` conditions on the codes
    /// predicted for layers `1..l`. Returns `[domain][layer][row]`.
    pub fn autoregressive_infer(&self, g: &mut Graph, h: Var) -> Result<[Vec<Vec<usize>>; 2]> {
        let k = self.cfg.codebook_size;
        let mut out: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
        for d in Domain::BOTH {
            let mut prior: Vec<Vec<usize>> = Vec::new();
            for l in 0..self.cfg.rvq_layers {
                let logits = self.heads[d.index()].predict_layer(g, h, l, &prior)?;
                prior.push(argmax_rows(g.value(logits).data(), k));
            }
            out[d.index()] = prior;
        }
        Ok(out)
    }

    /// Argmax of each layer under teacher forcing, `[domain][layer][row]`.
    pub fn teacher_forced_argmax(&self, g: &mut Graph, h: Var, targets: &MaskedTargets) -> Result<[Vec<Vec<usize>>; 2]> {
        let k = self.cfg.codebook_size;
        let mut out: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
        for d in Domain::BOTH {
            let codes = &targets.codes[d.index()];
            out[d.index()] = (0..self.cfg.rvq_layers)
                .map(|l| {
                    let logits = self.heads[d.index()].predict_layer(g, h, l, &codes[..l])?;
                    Ok(argmax_rows(g.value(logits).data(), k))
                })
                .collect::<Result<_>>()?;
        }
        Ok(out)
    }

    /// Fraction of (row, domain, layer) predictions where greedy inference
    /// disagrees with the teacher-forced argmax.
    pub fn divergence(&self, grids: &[&PatchGrid], masks: &[Vec<usize>], tokens: &[&TokenGrid]) -> Result<f64> {
        let targets = MaskedTargets::gather(tokens, masks, self.cfg.rvq_layers)?;
        let mut g = Graph::inference(&self.params);
        let h = self.masked_hidden(&mut g, grids, masks, &targets.rows)?;
        let a = self.autoregressive_infer(&mut g, h)?;
        let t = self.teacher_forced_argmax(&mut g, h, &targets)?;
        let (mut diff, mut total) = (0usize, 0usize);
        for d in 0..2 {
            for (x, y) in a[d].iter().zip(&t[d]) {
                diff += x.iter().zip(y).filter(|(p, q)| p != q).count();
                total += x.len();
            }
        }
        Ok(diff as f64 / total as f64)
    }
}

/// Per-epoch pre-training record; loss fields are epoch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub curriculum_weight: f64,
    pub loss: f64,
    pub ce: [Vec<f64>; 2],
    /// Teacher-forced top-1 accuracy.
    pub accuracy: [Vec<f64>; 2],
    /// Accuracy of the greedy chain, where each layer conditions on the
    /// model's own earlier predictions.
    pub greedy_accuracy: [Vec<f64>; 2],
}

pub struct HarRun {
    pub model: HarModel,
    pub history: Vec<HarEpoch>,
}

/// Pre-trains a fresh model against codes from the frozen `tokenizer`.
pub fn pretrain(corpus: &[PatchGrid], tokenizer: &Tokenizer, train: &TrainConfig, objective: Objective) -> Result<HarRun> {
    if corpus.is_empty() {
        return Err(Error::ShapeMismatch(String::from("empty corpus")));
    }
    train.validate()?;
    let cfg = tokenizer.cfg.clone();
    let tokens = corpus.iter().map(|g| tokenizer.tokenize(g)).collect::<Result<Vec<_>>>()?;
    let scores = corpus.iter().map(|g| score_grid(g).map(|m| m.aggregate)).collect::<Result<Vec<_>>>()?;
    let mut model = HarModel::new(&cfg)?;
    let spe = steps_per_epoch(corpus.len(), train.batch_size);
    let schedule = Schedule::from_config(train, spe);
    let total_steps = train.epochs * spe;
    let mut opt = AdamW::new(&model.params, train);
    let mut shuffle = substream(train.seed, Stream::Shuffle, 1);
    let mut mask_rng = stream(train.seed, Stream::Masking);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let layers = cfg.rvq_layers;
    let weights = objective.weights(layers);
    let mut history = Vec::with_capacity(train.epochs);
    let mut step = 0usize;
    for epoch in 0..train.epochs {
        order.shuffle(&mut shuffle);
        let mut loss = 0.0;
        let mut ce = [vec![0.0; layers], vec![0.0; layers]];
        let mut acc = [vec![0.0; layers], vec![0.0; layers]];
        let mut greedy_acc = [vec![0.0; layers], vec![0.0; layers]];
        let mut w = 0.0;
        for chunk in order.chunks(train.batch_size) {
            w = curriculum_weight(step, total_steps, train.curriculum_w0, train.curriculum_wmax);
            step += 1;
            let lr = lr_at(step, &schedule);
            let masks = chunk
                .iter()
                .map(|&i| sample_mask(&scores[i], cfg.mask_ratio, w, train.mask_temperature, &mut mask_rng).map(|p| p.mask))
                .collect::<Result<Vec<_>>>()?;
            let grids: Vec<&PatchGrid> = chunk.iter().map(|&i| &corpus[i]).collect();
            let toks: Vec<&TokenGrid> = chunk.iter().map(|&i| &tokens[i]).collect();
            let (report, greedy, grads) = {
                let mut g = Graph::new(&model.params);
                let targets = MaskedTargets::gather(&toks, &masks, layers)?;
                let h = model.masked_hidden(&mut g, &grids, &masks, &targets.rows)?;
                let fwd = model.har_loss(&mut g, h, &targets, objective, &weights)?;
                if !fwd.report.total.is_finite() {
                    return Err(Error::NonFiniteLoss { step, detail: format!("{:?}", fwd.report) });
                }
                let pred = model.autoregressive_infer(&mut g, h)?;
                let m = targets.rows.len() as f64;
                let greedy = [0, 1].map(|d| {
                    (0..layers)
                        .map(|l| pred[d][l].iter().zip(&targets.codes[d][l]).filter(|(a, b)| a == b).count() as f64 / m)
                        .collect::<Vec<_>>()
                });
                (fwd.report, greedy, g.param_grads(fwd.loss)?)
            };
            opt.step(&mut model.params, &grads, lr);
            let share = 1.0 / spe as f64;
            loss += share * report.total;
            for d in 0..2 {
                for l in 0..layers {
                    ce[d][l] += share * report.ce[d][l];
                    acc[d][l] += share * report.accuracy[d][l];
                    greedy_acc[d][l] += share * greedy[d][l];
                }
            }
        }
        history.push(HarEpoch { epoch, steps: step, lr: lr_at(step, &schedule), curriculum_weight: w, loss, ce, accuracy: acc, greedy_accuracy: greedy_acc });
    }
    Ok(HarRun { model, history })
}
