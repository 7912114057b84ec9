#![cfg_attr(not(feature = "std"), no_std)]
//! Tokenization and masked pre-training for multi-channel neural recordings.
//!
//! The crate is `no_std` + `alloc`: every routine here is pure computation
//! over in-memory buffers. File formats, checkpoints and the command line
//! live in the companion `nrtk` crate.
//!
//! Pipeline, bottom-up:
//!
//! * [`preprocess`]: band-pass / notch filtering, resampling, windowing,
//!   amplitude rejection and scaling of raw recordings.
//! * [`patching`]: non-overlapping fixed-length patches over a segment.
//! * [`spectral`]: DFT, amplitude/phase and power spectra of patches.
//! * [`autodiff`]: a small tape-based reverse-mode engine over dense tensors.
//! * [`nets`]: patch encoder, transformer encoder and the two decoders.
//! * [`rvq`]: residual vector quantization with EMA codebooks.
//! * [`tokenizer`]: the dual-domain tokenizer and its training loop.
//! * [`importance`]: per-patch importance scores and curriculum masking.
//! * [`har`]: hierarchical autoregressive masked pre-training.
//! * [`metrics`]: codebook usage, reconstruction and mask statistics.
//! * [`synth`]: a seeded synthetic recording generator used as a test corpus.

extern crate alloc;

pub mod autodiff;
pub mod config;
pub mod error;
pub mod har;
pub mod importance;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod patching;
pub mod preprocess;
pub mod rng;
pub mod rvq;
pub mod signal;
pub mod spectral;
pub mod synth;
pub mod tokenizer;

pub use config::{ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use patching::PatchGrid;
pub use signal::{Recording, Segment};
