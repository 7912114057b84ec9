//! Recording files: the `NRTK0001` binary container and headerless CSV.
//!
//! Binary layout: 8-byte magic, `u32` channels, `u32` samples per channel,
//! `f64` sample rate, then `C*T` little-endian `f32` values, channel-major.
//! All header fields are little-endian. Channel labels are not stored and
//! load as `ch0..`.

use std::fs;
use std::path::Path;

use nrtk_core::signal::default_labels;
use nrtk_core::{Error, Recording};

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"NRTK0001";
const HEADER_LEN: usize = 8 + 4 + 4 + 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Format {
    Bin,
    Csv { sample_rate_hz: f64 },
}

impl Format {
    /// `.csv` files are CSV at the given rate; everything else is binary.
    pub fn from_path(path: &Path, csv_rate_hz: f64) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Format::Csv { sample_rate_hz: csv_rate_hz },
            _ => Format::Bin,
        }
    }
}

pub fn encode(rec: &Recording) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rec.samples().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(rec.channels() as u32).to_le_bytes());
    out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
    out.extend_from_slice(&rec.sample_rate_hz().to_le_bytes());
    for v in rec.samples() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Recording> {
    let bad = |m: String| CliError::Core(Error::MalformedHeader(m));
    if bytes.len() < HEADER_LEN {
        return Err(bad(format!("{} bytes is shorter than the {HEADER_LEN}-byte header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(bad(String::from("bad magic")));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (c, t) = (u32_at(8), u32_at(12));
    let fs = f64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    if !(fs.is_finite() && fs > 0.0) {
        return Err(bad(format!("sample rate {fs}")));
    }
    if c == 0 || t == 0 {
        return Err(Error::EmptyRecording { channels: c, samples: t }.into());
    }
    let want = c.checked_mul(t).and_then(|n| n.checked_mul(4)).ok_or_else(|| bad(format!("dims {c} x {t} overflow")))?;
    if bytes.len() - HEADER_LEN != want {
        return Err(bad(format!("dims {c} x {t} need {want} payload bytes, found {}", bytes.len() - HEADER_LEN)));
    }
    let samples: Vec<f32> = bytes[HEADER_LEN..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
    Ok(Recording::new(default_labels(c), fs, samples)?)
}

/// One row per channel, comma-separated, no header.
pub fn parse_csv(text: &str, sample_rate_hz: f64) -> Result<Recording> {
    let mut rows: Vec<Vec<f32>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f32>().map_err(|e| Error::MalformedHeader(format!("line {}: {e}", i + 1))))
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    let t = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || t == 0 {
        return Err(Error::EmptyRecording { channels: rows.len(), samples: t }.into());
    }
    if let Some(r) = rows.iter().position(|r| r.len() != t) {
        return Err(Error::MalformedHeader(format!("row {} has {} values, expected {t}", r + 1, rows[r].len())).into());
    }
    let c = rows.len();
    Ok(Recording::new(default_labels(c), sample_rate_hz, rows.concat())?)
}

pub fn load_recording(path: &Path, format: Format) -> Result<Recording> {
    match format {
        Format::Bin => decode(&fs::read(path).map_err(|e| CliError::io(path, e))?),
        Format::Csv { sample_rate_hz } => parse_csv(&fs::read_to_string(path).map_err(|e| CliError::io(path, e))?, sample_rate_hz),
    }
}

pub fn save_recording(rec: &Recording, path: &Path) -> Result<()> {
    fs::write(path, encode(rec)).map_err(|e| CliError::io(path, e))
}
