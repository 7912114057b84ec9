//! File formats, checkpoints, configuration and the command-line driver for
//! [`nrtk_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod signal_io;

pub use config::DeskConfig;
pub use error::{CliError, Result};
