// SPDX-License-Identifier: MIT OR Apache-2.0

//! Identifiability analyses of self-attention.
//!
//! The crate covers the null space of the value-output product of an
//! attention head, effective attention, construction of alternative
//! attention distributions with identical head output, Hidden Token
//! Attribution on a small BERT-style encoder with exact Jacobians, and
//! nearest-neighbour token identifiability probes.

pub mod acceptance;
pub mod attribution;
pub mod cli;
pub mod effective;
pub mod error;
pub mod head_geometry;
pub mod io;
pub mod linalg;
pub mod model;
pub mod probe;
pub mod rng;
pub mod simplex;
pub mod train;

pub use error::{Error, Result};
pub use head_geometry::HeadSnapshot;
pub use linalg::Matrix;
