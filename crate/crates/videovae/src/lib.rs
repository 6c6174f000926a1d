//! Sequential VAE for controllable video generation.
//!
//! The crate is organized around a small define-by-run tensor library
//! ([`tensor`]) on top of which the generative model ([`model`]), its
//! training objective ([`objective`]), the two-stage semi-supervised
//! pipeline ([`training`]), test-time synthesis ([`synthesis`]) and the
//! entropy-based evaluation suite ([`metrics`]) are built. A procedural
//! sprite dataset ([`sprites`]) provides attributed clips for end-to-end
//! runs, and [`cli`] wires everything into subcommands.

pub mod attributes;
pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod sprites;
pub mod synthesis;
pub mod tensor;
pub mod training;

use thiserror::Error;

/// Crate-wide error type.
///
/// The CLI maps these onto process exit codes: parameter/usage problems
/// exit 1, data and format problems exit 2, numerical failures exit 3.
#[derive(Debug, Error)]
pub enum VvError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, VvError>;
