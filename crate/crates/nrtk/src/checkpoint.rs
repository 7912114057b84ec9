//! Model checkpoints: a JSON manifest (config plus tensor index) next to a
//! raw little-endian `f32` payload.
//!
//! A checkpoint lives in a directory as `checkpoint.json` and
//! `checkpoint.bin`. Every tensor and every codebook array is a `Slot` into
//! the payload, counted in `f32` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nrtk_core::autodiff::{ParamStore, Tensor};
use nrtk_core::har::HarModel;
use nrtk_core::rvq::{Codebook, Domain, RvqStack};
use nrtk_core::tokenizer::Tokenizer;
use nrtk_core::ModelConfig;

use crate::error::{CliError, Result};

pub const FORMAT: &str = "nrtk-checkpoint-1";
pub const MANIFEST: &str = "checkpoint.json";
pub const PAYLOAD: &str = "checkpoint.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Tokenizer,
    Har,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slot {
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(flatten)]
    pub slot: Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookEntry {
    pub domain: Domain,
    pub layer: usize,
    pub size: usize,
    pub dim: usize,
    pub decay: f64,
    pub codes: Slot,
    pub counts: Slot,
    pub sums: Slot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: Kind,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub codebooks: Vec<CodebookEntry>,
    pub payload_values: usize,
}

#[derive(Default)]
struct Writer {
    payload: Vec<u8>,
    values: usize,
}

impl Writer {
    fn push(&mut self, data: impl IntoIterator<Item = f64>) -> Slot {
        let offset = self.values;
        for v in data {
            self.payload.extend_from_slice(&(v as f32).to_le_bytes());
            self.values += 1;
        }
        Slot { offset, len: self.values - offset }
    }
}

fn tensor_entries(params: &ParamStore, w: &mut Writer) -> Vec<TensorEntry> {
    params
        .iter()
        .map(|(name, t)| TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), slot: w.push(t.data().iter().copied()) })
        .collect()
}

fn write(dir: &Path, manifest: &Manifest, payload: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let m = dir.join(MANIFEST);
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&m, json + "\n").map_err(|e| CliError::io(&m, e))?;
    let p = dir.join(PAYLOAD);
    fs::write(&p, payload).map_err(|e| CliError::io(&p, e))
}

pub fn save_tokenizer(dir: &Path, model: &Tokenizer) -> Result<()> {
    let mut w = Writer::default();
    let tensors = tensor_entries(&model.params, &mut w);
    let mut codebooks = Vec::new();
    for d in Domain::BOTH {
        for (layer, book) in model.stack(d).layers.iter().enumerate() {
            let (size, dim) = (book.size(), book.dim());
            let codes = w.push((0..size).flat_map(|k| book.code(k).to_vec()));
            let counts = w.push(book.counts().iter().copied());
            let sums = w.push((0..size).flat_map(|k| book.sum(k).to_vec()));
            codebooks.push(CodebookEntry { domain: d, layer, size, dim, decay: book.decay, codes, counts, sums });
        }
    }
    let manifest = Manifest { format: FORMAT.into(), kind: Kind::Tokenizer, config: model.cfg.clone(), tensors, codebooks, payload_values: w.values };
    write(dir, &manifest, &w.payload)
}

pub fn save_har(dir: &Path, model: &HarModel) -> Result<()> {
    let mut w = Writer::default();
    let tensors = tensor_entries(&model.params, &mut w);
    let manifest = Manifest { format: FORMAT.into(), kind: Kind::Har, config: model.cfg.clone(), tensors, codebooks: Vec::new(), payload_values: w.values };
    write(dir, &manifest, &w.payload)
}

pub struct Loaded {
    pub manifest: Manifest,
    pub params: ParamStore,
    values: Vec<f64>,
}

fn malformed(path: &Path, msg: impl std::fmt::Display) -> CliError {
    CliError::Core(nrtk_core::Error::MalformedHeader(format!("{}: {msg}", path.display())))
}

impl Loaded {
    fn slice(&self, s: Slot) -> &[f64] {
        &self.values[s.offset..s.offset + s.len]
    }
}

pub fn load(dir: &Path, kind: Kind) -> Result<Loaded> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| CliError::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| malformed(&mpath, e))?;
    if manifest.format != FORMAT || manifest.kind != kind {
        return Err(malformed(&mpath, format!("expected a {kind:?} checkpoint in format {FORMAT}")));
    }
    let ppath: PathBuf = dir.join(PAYLOAD);
    let bytes = fs::read(&ppath).map_err(|e| CliError::io(&ppath, e))?;
    if bytes.len() != 4 * manifest.payload_values {
        return Err(malformed(&ppath, format!("{} bytes for {} values", bytes.len(), manifest.payload_values)));
    }
    let values: Vec<f64> = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64).collect();
    let in_range = |s: &Slot| s.offset.checked_add(s.len).is_some_and(|e| e <= values.len());
    let slots = manifest.tensors.iter().map(|t| &t.slot).chain(manifest.codebooks.iter().flat_map(|c| [&c.codes, &c.counts, &c.sums]));
    if let Some(s) = slots.into_iter().find(|s| !in_range(s)) {
        return Err(malformed(&mpath, format!("slot {s:?} outside payload")));
    }
    let mut loaded = Loaded { manifest, params: ParamStore::new(), values };
    for t in &loaded.manifest.tensors {
        let tensor = Tensor::new(t.shape.clone(), loaded.slice(t.slot).to_vec())?;
        loaded.params.add(t.name.clone(), tensor);
    }
    Ok(loaded)
}

pub fn load_tokenizer(dir: &Path) -> Result<Tokenizer> {
    let mut l = load(dir, Kind::Tokenizer)?;
    let cfg = l.manifest.config.clone();
    let mut stacks: [Vec<Codebook>; 2] = [Vec::new(), Vec::new()];
    for c in &l.manifest.codebooks {
        if c.layer != stacks[c.domain.index()].len() {
            return Err(malformed(dir, "codebooks out of order"));
        }
        stacks[c.domain.index()].push(Codebook::from_state(c.dim, l.slice(c.codes), l.slice(c.counts), l.slice(c.sums), c.decay)?);
    }
    let [t, f] = stacks;
    let stacks = [RvqStack::new(Domain::Time, t)?, RvqStack::new(Domain::Freq, f)?];
    let params = std::mem::take(&mut l.params);
    Ok(Tokenizer::from_parts(&cfg, params, stacks)?)
}

pub fn load_har(dir: &Path) -> Result<HarModel> {
    let l = load(dir, Kind::Har)?;
    Ok(HarModel::from_params(&l.manifest.config, l.params)?)
}
