// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded, counter-based random streams.
//!
//! Every consumer derives its own ChaCha stream from a 64-bit seed and a
//! stream id, so independent work items (heads, rows, seeds) draw from
//! disjoint sequences regardless of evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::Matrix;

pub type Stream = ChaCha8Rng;

/// Random stream keyed by `(seed, stream_id)`.
pub fn stream(seed: u64, stream_id: u64) -> Stream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// Matrix of independent `N(0, std²)` entries.
pub fn gaussian_matrix(rng: &mut Stream, rows: usize, cols: usize, std: f64) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

pub fn gaussian_vec(rng: &mut Stream, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}
