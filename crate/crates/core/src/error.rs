// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every analysis in the crate.

use thiserror::Error;

/// Errors raised by the linear algebra, model and analysis layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("svd did not converge for {rows}x{cols} matrix after {sweeps} sweeps")]
    SvdNoConvergence { rows: usize, cols: usize, sweeps: usize },

    #[error("basis rows are not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),

    #[error("undefined correlation: zero variance in input")]
    UndefinedCorrelation,

    #[error("no alternative attention exists: augmented left null space is empty (identifiable head)")]
    IdentifiableHead,

    #[error("attention row has non-positive entry {value:e} at index {index}")]
    NonPositiveAttention { index: usize, value: f64 },

    #[error("degenerate attribution at layer {layer}, position {position}: all gradients are zero")]
    DegenerateAttribution { layer: usize, position: usize },

    #[error("training diverged at step {step}")]
    Diverged { step: usize },

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("bundle parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
