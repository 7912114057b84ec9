//! Training corpora: patch grids cut from preprocessed segments.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nrtk_core::patching::patchify;
use nrtk_core::preprocess::{run_pipeline, PreprocessConfig};
use nrtk_core::synth::{generate, SynthOutput};
use nrtk_core::{PatchGrid, Recording, Segment};

use crate::config::DeskConfig;
use crate::error::{CliError, Result};
use crate::signal_io::{load_recording, save_recording, Format};

pub const SEGMENT_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub file: String,
    pub window_index: usize,
}

/// What `preprocess` writes next to the kept segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentManifest {
    pub source: String,
    pub windows: usize,
    pub kept: usize,
    pub rejected: usize,
    pub config: PreprocessConfig,
    pub segments: Vec<SegmentEntry>,
}

pub fn write_segments(dir: &Path, source: &str, cfg: &PreprocessConfig, out: &nrtk_core::preprocess::PreprocessOutput) -> Result<SegmentManifest> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut segments = Vec::with_capacity(out.segments.len());
    for seg in &out.segments {
        let file = format!("segment_{:05}.bin", seg.window_index);
        save_recording(&seg.to_recording()?, &dir.join(&file))?;
        segments.push(SegmentEntry { file, window_index: seg.window_index });
    }
    let manifest = SegmentManifest { source: source.into(), windows: out.windows, kept: out.segments.len(), rejected: out.rejected, config: cfg.clone(), segments };
    let path = dir.join(SEGMENT_MANIFEST);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    Ok(manifest)
}

/// Segments from `data`: a `preprocess` output directory (already
/// normalized) or a raw recording, which is preprocessed with `cfg`.
pub fn load_segments(data: &Path, cfg: &DeskConfig, csv_rate_hz: f64) -> Result<Vec<Segment>> {
    if data.is_dir() {
        let mpath: PathBuf = data.join(SEGMENT_MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| CliError::io(&mpath, e))?;
        let manifest: SegmentManifest =
            serde_json::from_str(&text).map_err(|e| nrtk_core::Error::MalformedHeader(format!("{}: {e}", mpath.display())))?;
        manifest
            .segments
            .iter()
            .take(cfg.max_segments)
            .map(|s| {
                let rec = load_recording(&data.join(&s.file), Format::Bin)?;
                let mut seg = Segment::from_recording(&rec);
                seg.window_index = s.window_index;
                Ok(seg)
            })
            .collect()
    } else {
        let rec = load_recording(data, Format::from_path(data, csv_rate_hz))?;
        preprocess_recording(&rec, cfg)
    }
}

pub fn preprocess_recording(rec: &Recording, cfg: &DeskConfig) -> Result<Vec<Segment>> {
    let mut out = run_pipeline(rec, &cfg.preprocess)?;
    out.segments.truncate(cfg.max_segments);
    Ok(out.segments)
}

pub fn grids(segments: &[Segment], patch_len: usize) -> Result<Vec<PatchGrid>> {
    if segments.is_empty() {
        return Err(nrtk_core::Error::EmptyRecording { channels: 0, samples: 0 }.into());
    }
    Ok(segments.iter().map(|s| patchify(s, patch_len)).collect::<Result<_, _>>()?)
}

/// The synthetic desk corpus: generated, preprocessed and patched.
pub struct Synthetic {
    pub synth: SynthOutput,
    pub segments: Vec<Segment>,
    pub grids: Vec<PatchGrid>,
}

pub fn synthetic(cfg: &DeskConfig) -> Result<Synthetic> {
    let synth = generate(&cfg.synth)?;
    let segments = preprocess_recording(&synth.recording, cfg)?;
    let grids = grids(&segments, cfg.model.patch_len)?;
    Ok(Synthetic { synth, segments, grids })
}
