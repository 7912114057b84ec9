//! Dual-domain residual-quantized tokenizer and its training loop.
//!
//! A shared encoder maps every patch to `h`. Each domain projects `h` to
//! the code space, quantizes it with its own RVQ stack, and reconstructs:
//! the time branch the waveform, the frequency branch `log(1 + |X|)` and
//! the wrapped phase of the patch DFT. Reconstruction gradients cross the
//! quantizer by straight-through; codebooks learn only by EMA.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use core::f64::consts::PI;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::config::{ModelConfig, PhaseLoss, TrainConfig};
use crate::error::{Error, Result};
use crate::nets::{adopt_params, decode_freq, decode_time, Decoder, Encoder, Linear};
use crate::optim::{lr_at, AdamW, Schedule};
use crate::patching::PatchGrid;
use crate::rng::{stream, Rng, Stream};
use crate::rvq::{Domain, Quantized, RvqStack, TokenGrid};
use crate::spectral::{wrapped_phase, Dft};

/// Reconstruction targets of one patch grid, token-major `[N, P]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    pub time: Vec<f64>,
    pub log_amp: Vec<f64>,
    pub phase: Vec<f64>,
}

impl Targets {
    pub fn of(grid: &PatchGrid) -> Self {
        let dft = Dft::new(grid.patch_len);
        let mut log_amp = Vec::with_capacity(grid.data().len());
        let mut phase = Vec::with_capacity(grid.data().len());
        for tok in grid.tokens() {
            let s = dft.forward(tok);
            for (re, im) in s.re.iter().zip(&s.im) {
                log_amp.push(libm::log1p(libm::sqrt(re * re + im * im)));
                phase.push(wrapped_phase(*re, *im));
            }
        }
        Self { time: grid.data().to_vec(), log_amp, phase }
    }
}

/// A patch grid with its precomputed targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub grid: PatchGrid,
    pub targets: Targets,
}

impl Sample {
    pub fn new(grid: PatchGrid) -> Self {
        let targets = Targets::of(&grid);
        Self { grid, targets }
    }
}

/// Reconstruction terms are per-token squared L2 norms over the `P` bins,
/// averaged over tokens.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_time: f64,
    pub l_freq_amp: f64,
    pub l_freq_phase: f64,
    /// Encoder-side commitment summed over domains and layers, before `beta`.
    pub l_commit: f64,
    pub l_total: f64,
}

impl LossReport {
    fn accumulate(&mut self, o: &LossReport, w: f64) {
        self.l_time += w * o.l_time;
        self.l_freq_amp += w * o.l_freq_amp;
        self.l_freq_phase += w * o.l_freq_phase;
        self.l_commit += w * o.l_commit;
        self.l_total += w * o.l_total;
    }

    pub fn is_finite(&self) -> bool {
        [self.l_time, self.l_freq_amp, self.l_freq_phase, self.l_commit, self.l_total].iter().all(|v| v.is_finite())
    }
}

/// Projection into code space, up-projection back, and decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Branch {
    pub proj: Linear,
    pub up: Linear,
    pub decoder: Decoder,
}

impl Branch {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, heads: usize, rng: &mut Rng) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), cfg.embed_dim, cfg.code_dim, rng),
            up: Linear::new(store, &format!("{name}.up"), cfg.code_dim, cfg.embed_dim, rng),
            decoder: Decoder::new(store, &format!("{name}.decoder"), cfg, heads, rng),
        }
    }
}

/// Codes held fixed across a forward pass, with the continuous code-space
/// embedding they were computed from. Used for finite-difference checks,
/// where re-quantizing a perturbed input would make the loss piecewise
/// constant.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenCodes {
    pub items: [Vec<Quantized>; 2],
}

pub struct Forward {
    pub loss: Var,
    pub report: LossReport,
    pub quantized: [Vec<Quantized>; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub encoder: Encoder,
    pub time: Branch,
    pub freq: Branch,
    pub stacks: [RvqStack; 2],
}

impl Tokenizer {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, Stream::Init);
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, "encoder", cfg, &mut rng);
        let time = Branch::new(&mut params, "time", cfg, 1, &mut rng);
        let freq = Branch::new(&mut params, "freq", cfg, 2, &mut rng);
        let mut crng = stream(cfg.seed, Stream::Codebook);
        let stacks = [
            RvqStack::random(Domain::Time, cfg.rvq_layers, cfg.codebook_size, cfg.code_dim, cfg.ema_decay, &mut crng)?,
            RvqStack::random(Domain::Freq, cfg.rvq_layers, cfg.codebook_size, cfg.code_dim, cfg.ema_decay, &mut crng)?,
        ];
        Ok(Self { cfg: cfg.clone(), params, encoder, time, freq, stacks })
    }

    /// Rebuilds a tokenizer from stored parameters and codebooks.
    pub fn from_parts(cfg: &ModelConfig, params: ParamStore, stacks: [RvqStack; 2]) -> Result<Self> {
        let mut t = Self::new(cfg)?;
        adopt_params(&mut t.params, params)?;
        for (have, got) in t.stacks.iter().zip(&stacks) {
            if have.depth() != got.depth() || have.dim() != got.dim() || have.layers[0].size() != got.layers[0].size() {
                return Err(Error::ShapeMismatch(String::from("codebook shapes do not match the configuration")));
            }
        }
        t.stacks = stacks;
        Ok(t)
    }

    pub fn stack(&self, d: Domain) -> &RvqStack {
        &self.stacks[d.index()]
    }

    fn branch(&self, d: Domain) -> &Branch {
        match d {
            Domain::Time => &self.time,
            Domain::Freq => &self.freq,
        }
    }

    fn check_grid(&self, grid: &PatchGrid) -> Result<()> {
        if grid.patch_len != self.cfg.patch_len {
            return Err(Error::ShapeMismatch(format!(
                "grid patch length {} differs from configured {}",
                grid.patch_len, self.cfg.patch_len
            )));
        }
        Ok(())
    }

    /// Unit-norm code-space embeddings `[B*N, code_dim]` for one domain.
    fn code_space(&self, g: &mut Graph, h: Var, d: Domain) -> Result<Var> {
        let e = self.branch(d).proj.forward(g, h)?;
        Ok(g.tape.l2_normalize_rows(e))
    }

    /// Full forward pass and loss over a batch.
    pub fn forward(&self, g: &mut Graph, batch: &[&Sample], frozen: Option<&FrozenCodes>) -> Result<Forward> {
        let grids: Vec<&PatchGrid> = batch.iter().map(|s| &s.grid).collect();
        for gr in &grids {
            self.check_grid(gr)?;
        }
        let seq_len = grids[0].len();
        let h = self.encoder.encode(g, &grids)?;
        let rows = g.tape.shape(h)[0];
        let p = self.cfg.patch_len;
        let cd = self.cfg.code_dim;

        let mut report = LossReport::default();
        let mut quantized: [Vec<Quantized>; 2] = [Vec::new(), Vec::new()];
        let mut commit_terms = Vec::new();
        let mut recon_terms = Vec::new();

        for d in Domain::BOTH {
            let en = self.code_space(g, h, d)?;
            let items: Vec<Quantized> = match frozen {
                Some(f) => f.items[d.index()].clone(),
                None => {
                    let v = g.value(en);
                    (0..rows).map(|r| self.stack(d).quantize(v.row(r))).collect::<Result<_>>()?
                }
            };
            if items.len() != rows {
                return Err(Error::ShapeMismatch(format!("{} frozen codes for {rows} tokens", items.len())));
            }
            let q = Tensor::matrix(rows, cd, items.iter().flat_map(|q| q.quantized.iter().copied()).collect())?;
            let st = match frozen {
                None => {
                    let qv = g.constant(q);
                    g.tape.straight_through(en, qv)?
                }
                Some(_) => {
                    // en + (q - en0): same value and gradient at the base point
                    let offset: Vec<f64> =
                        items.iter().flat_map(|it| it.quantized.iter().zip(&it.residuals[0]).map(|(a, b)| a - b)).collect();
                    let off = g.constant(Tensor::matrix(rows, cd, offset)?);
                    g.tape.add(en, off)?
                }
            };

            // sum over layers of mean_rows ||r^(l-1) - sg[v_l]||^2, with
            // r^(l-1) - v_l = en - (v_1 + ... + v_l)
            let mut cumulative = vec![0.0; rows * cd];
            for l in 0..self.stack(d).depth() {
                for (r, it) in items.iter().enumerate() {
                    let v = self.stack(d).layers[l].code(it.codes[l]);
                    cumulative[r * cd..(r + 1) * cd].iter_mut().zip(v).for_each(|(c, x)| *c += x);
                }
                let target = g.constant(Tensor::matrix(rows, cd, cumulative.clone())?);
                let m = g.tape.mse(en, target)?;
                commit_terms.push(g.tape.scale(m, cd as f64));
            }

            let branch = self.branch(d);
            let hq = branch.up.forward(g, st)?;
            match d {
                Domain::Time => {
                    let pred = decode_time(g, &branch.decoder, hq, seq_len)?;
                    let t = g.constant(Tensor::matrix(rows, p, batch.iter().flat_map(|s| s.targets.time.iter().copied()).collect())?);
                    let m = g.tape.mse(pred, t)?;
                    let l = g.tape.scale(m, p as f64);
                    report.l_time = g.value(l).item();
                    recon_terms.push(l);
                }
                Domain::Freq => {
                    let (amp, phase) = decode_freq(g, &branch.decoder, hq, seq_len)?;
                    let ta = g.constant(Tensor::matrix(rows, p, batch.iter().flat_map(|s| s.targets.log_amp.iter().copied()).collect())?);
                    let tp = g.constant(Tensor::matrix(rows, p, batch.iter().flat_map(|s| s.targets.phase.iter().copied()).collect())?);
                    let ma = g.tape.mse(amp, ta)?;
                    let la = g.tape.scale(ma, p as f64);
                    let mp = match self.cfg.phase_loss {
                        PhaseLoss::L2 => g.tape.mse(phase, tp)?,
                        PhaseLoss::Cosine => {
                            let diff = g.tape.sub(phase, tp)?;
                            let c = g.tape.cos(diff);
                            let m = g.tape.mean(c);
                            let one = g.constant(Tensor::scalar(1.0));
                            g.tape.sub(one, m)?
                        }
                    };
                    let lp = g.tape.scale(mp, p as f64);
                    report.l_freq_amp = g.value(la).item();
                    report.l_freq_phase = g.value(lp).item();
                    recon_terms.push(la);
                    recon_terms.push(lp);
                }
            }
            quantized[d.index()] = items;
        }

        let mut commit = commit_terms[0];
        for &c in &commit_terms[1..] {
            commit = g.tape.add(commit, c)?;
        }
        report.l_commit = g.value(commit).item();
        let mut total = g.tape.scale(commit, self.cfg.beta);
        for &r in &recon_terms {
            total = g.tape.add(total, r)?;
        }
        report.l_total = g.value(total).item();
        Ok(Forward { loss: total, report, quantized })
    }

    /// Code-space embeddings of every token in `batch`, per domain.
    pub fn embeddings(&self, batch: &[&PatchGrid]) -> Result<[Vec<Vec<f64>>; 2]> {
        let mut g = Graph::inference(&self.params);
        let h = self.encoder.encode(&mut g, batch)?;
        let mut out: [Vec<Vec<f64>>; 2] = [Vec::new(), Vec::new()];
        for d in Domain::BOTH {
            let en = self.code_space(&mut g, h, d)?;
            let v = g.value(en);
            out[d.index()] = (0..v.rows()).map(|r| v.row(r).to_vec()).collect();
        }
        Ok(out)
    }

    /// k-means++ seeding of both stacks from one batch.
    pub fn seed_codebooks(&mut self, batch: &[&PatchGrid], rng: &mut Rng) -> Result<()> {
        let emb = self.embeddings(batch)?;
        for d in Domain::BOTH {
            self.stacks[d.index()].seed_kmeanspp(&emb[d.index()], rng)?;
        }
        Ok(())
    }

    /// Sets every output head bias to the best constant prediction for
    /// `batch`: per-bin means for time and amplitude, and for phase the
    /// pre-`tanh` value of the mean (L2) or circular mean (cosine).
    pub fn seed_output_bias(&mut self, batch: &[&Sample]) -> Result<()> {
        let p = self.cfg.patch_len;
        let rows: usize = batch.iter().map(|s| s.grid.len()).sum();
        if rows == 0 {
            return Err(Error::ShapeMismatch(String::from("empty seeding batch")));
        }
        let bin_mean = |f: &dyn Fn(&Sample) -> &[f64], map: &dyn Fn(f64) -> f64| {
            let mut m = vec![0.0; p];
            for s in batch {
                for tok in f(s).chunks_exact(p) {
                    m.iter_mut().zip(tok).for_each(|(a, v)| *a += map(*v));
                }
            }
            m.iter_mut().for_each(|a| *a /= rows as f64);
            m
        };
        let time = bin_mean(&|s| &s.targets.time, &|v| v);
        let amp = bin_mean(&|s| &s.targets.log_amp, &|v| v);
        let centre: Vec<f64> = match self.cfg.phase_loss {
            PhaseLoss::L2 => bin_mean(&|s| &s.targets.phase, &|v| v),
            PhaseLoss::Cosine => {
                let c = bin_mean(&|s| &s.targets.phase, &libm::cos);
                let sn = bin_mean(&|s| &s.targets.phase, &libm::sin);
                sn.iter().zip(&c).map(|(y, x)| libm::atan2(*y, *x)).collect()
            }
        };
        let phase: Vec<f64> = centre.iter().map(|m| libm::atanh((m / PI).clamp(-0.99, 0.99))).collect();
        let heads = [
            (self.time.decoder.heads[0], time),
            (self.freq.decoder.heads[0], amp),
            (self.freq.decoder.heads[1], phase),
        ];
        for (head, values) in heads {
            let b = head.b.ok_or_else(|| Error::ShapeMismatch(String::from("output head without bias")))?;
            self.params.get_mut(b).data_mut().copy_from_slice(&values);
        }
        Ok(())
    }

    /// Discrete codes of every token of `grid`.
    pub fn tokenize(&self, grid: &PatchGrid) -> Result<TokenGrid> {
        self.check_grid(grid)?;
        let emb = self.embeddings(&[grid])?;
        let mut per: [Vec<Vec<usize>>; 2] = [Vec::new(), Vec::new()];
        for d in Domain::BOTH {
            per[d.index()] = emb[d.index()].iter().map(|e| self.stack(d).quantize(e).map(|q| q.codes)).collect::<Result<_>>()?;
        }
        TokenGrid::new(grid.len(), self.cfg.rvq_layers, &per[0], &per[1])
    }

    /// Decoder outputs `(time, log_amp, phase)`, each `[N, P]` token-major.
    pub fn reconstruct(&self, grid: &PatchGrid) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        self.check_grid(grid)?;
        let mut g = Graph::inference(&self.params);
        let h = self.encoder.encode(&mut g, &[grid])?;
        let n = grid.len();
        let mut outs: Vec<Vec<f64>> = Vec::new();
        for d in Domain::BOTH {
            let en = self.code_space(&mut g, h, d)?;
            let v = g.value(en).clone();
            let mut q = Vec::with_capacity(v.len());
            for r in 0..n {
                q.extend(self.stack(d).quantize(v.row(r))?.quantized);
            }
            let qv = g.constant(Tensor::matrix(n, self.cfg.code_dim, q)?);
            let branch = self.branch(d);
            let hq = branch.up.forward(&mut g, qv)?;
            match d {
                Domain::Time => {
                    let t = decode_time(&mut g, &branch.decoder, hq, n)?;
                    outs.push(g.value(t).data().to_vec());
                }
                Domain::Freq => {
                    let (a, p) = decode_freq(&mut g, &branch.decoder, hq, n)?;
                    outs.push(g.value(a).data().to_vec());
                    outs.push(g.value(p).data().to_vec());
                }
            }
        }
        let phase = outs.pop().expect("three outputs");
        let amp = outs.pop().expect("three outputs");
        let time = outs.pop().expect("three outputs");
        Ok((time, amp, phase))
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenizerEpoch {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    /// Mean of per-step reports over the epoch.
    pub loss: LossReport,
    /// Codes never selected during the epoch, `[domain][layer]`.
    pub unused_codes: [Vec<usize>; 2],
}

/// Mutable training state for step-level control.
pub struct TokenizerTrainer {
    pub model: Tokenizer,
    pub opt: AdamW,
    pub schedule: Schedule,
    pub step: usize,
    pub train: TrainConfig,
    /// Quantizer assignments of the most recent step.
    pub last_assignments: Option<[Vec<Quantized>; 2]>,
}

impl TokenizerTrainer {
    pub fn new(model: Tokenizer, train: &TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        train.validate()?;
        let opt = AdamW::new(&model.params, train);
        Ok(Self { model, opt, schedule: Schedule::from_config(train, steps_per_epoch), step: 0, train: train.clone(), last_assignments: None })
    }

    /// One optimizer step plus EMA updates of both stacks.
    pub fn tokenizer_step(&mut self, batch: &[&Sample]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::ShapeMismatch(String::from("empty batch")));
        }
        self.step += 1;
        let lr = lr_at(self.step, &self.schedule);
        let (report, grads, quantized) = {
            let mut g = Graph::new(&self.model.params);
            let fwd = self.model.forward(&mut g, batch, None)?;
            if !fwd.report.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.step, detail: format!("{:?}", fwd.report) });
            }
            let grads = g.param_grads(fwd.loss)?;
            (fwd.report, grads, fwd.quantized)
        };
        self.opt.step(&mut self.model.params, &grads, lr);
        for d in Domain::BOTH {
            self.model.stacks[d.index()].ema_update(&quantized[d.index()])?;
        }
        self.last_assignments = Some(quantized);
        Ok(report)
    }
}

/// Output of [`train_tokenizer`].
pub struct TokenizerRun {
    pub model: Tokenizer,
    pub history: Vec<TokenizerEpoch>,
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

/// Trains a tokenizer on `corpus` (equally shaped grids).
pub fn train_tokenizer(corpus: &[PatchGrid], cfg: &ModelConfig, train: &TrainConfig) -> Result<TokenizerRun> {
    if corpus.is_empty() {
        return Err(Error::ShapeMismatch(String::from("empty corpus")));
    }
    let samples: Vec<Sample> = corpus.iter().cloned().map(Sample::new).collect();
    let spe = steps_per_epoch(samples.len(), train.batch_size);
    let mut model = Tokenizer::new(cfg)?;
    let mut shuffle = stream(train.seed, Stream::Shuffle);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut shuffle);
    {
        let first: Vec<&PatchGrid> = order.iter().take(train.batch_size).map(|&i| &samples[i].grid).collect();
        model.seed_codebooks(&first, &mut stream(train.seed, Stream::Codebook))?;
        let first: Vec<&Sample> = order.iter().take(train.batch_size).map(|&i| &samples[i]).collect();
        model.seed_output_bias(&first)?;
    }
    let mut trainer = TokenizerTrainer::new(model, train, spe)?;
    let k = cfg.codebook_size;
    let mut history = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        if epoch > 0 {
            order.shuffle(&mut shuffle);
        }
        let mut mean = LossReport::default();
        let mut used = [vec![vec![false; k]; cfg.rvq_layers], vec![vec![false; k]; cfg.rvq_layers]];
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let report = trainer.tokenizer_step(&batch)?;
            mean.accumulate(&report, 1.0 / spe as f64);
            if let Some(q) = trainer.last_assignments.take() {
                for d in 0..2 {
                    for item in &q[d] {
                        for (l, &c) in item.codes.iter().enumerate() {
                            used[d][l][c] = true;
                        }
                    }
                }
            }
        }
        let unused_codes = [0, 1].map(|d| used[d].iter().map(|u| u.iter().filter(|&&x| !x).count()).collect());
        history.push(TokenizerEpoch { epoch, steps: trainer.step, lr: lr_at(trainer.step, &trainer.schedule), loss: mean, unused_codes });
    }
    Ok(TokenizerRun { model: trainer.model, history })
}
