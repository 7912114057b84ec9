use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core library can report.
///
/// Variant names double as the structured error names printed by the CLI.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("non-finite value at channel {channel}, sample {sample}")]
    NonFinite { channel: usize, sample: usize },
    #[error("empty recording ({channels} channels x {samples} samples)")]
    EmptyRecording { channels: usize, samples: usize },
    #[error("invalid band: {0}")]
    InvalidBand(String),
    #[error("window of {window} samples exceeds recording of {available}")]
    WindowTooLong { window: usize, available: usize },
    #[error("recording of {available} samples too short to trim {trim} from each end")]
    TooShort { trim: usize, available: usize },
    #[error("patch length {patch_len} exceeds segment length {len}")]
    PatchTooLong { patch_len: usize, len: usize },
    #[error("patch of length {0} is too short (need at least 3)")]
    PatchTooShort(usize),
    #[error("spectrum is not conjugate-symmetric (max deviation {0:e})")]
    AsymmetricSpectrum(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("function output is not a scalar (shape {0:?})")]
    NonScalarOutput(alloc::vec::Vec<usize>),
    #[error("index {index} out of range 0..{bound}")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("non-finite input to quantizer")]
    NonFiniteInput,
    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },
    #[error("need at least 2 patches for min-max normalization, got {0}")]
    TooFewPatches(usize),
    #[error("mask is empty")]
    EmptyMask,
    #[error("original signal is constant; correlation undefined")]
    ConstantSignal,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    /// Stable variant name, used for structured error reporting.
    pub fn name(&self) -> &'static str {
        match self {
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::NonFinite { .. } => "NonFinite",
            Error::EmptyRecording { .. } => "EmptyRecording",
            Error::InvalidBand(_) => "InvalidBand",
            Error::WindowTooLong { .. } => "WindowTooLong",
            Error::TooShort { .. } => "TooShort",
            Error::PatchTooLong { .. } => "PatchTooLong",
            Error::PatchTooShort(_) => "PatchTooShort",
            Error::AsymmetricSpectrum(_) => "AsymmetricSpectrum",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonScalarOutput(_) => "NonScalarOutput",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::NonFiniteInput => "NonFiniteInput",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::TooFewPatches(_) => "TooFewPatches",
            Error::EmptyMask => "EmptyMask",
            Error::ConstantSignal => "ConstantSignal",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }
}
