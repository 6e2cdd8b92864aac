// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-head geometry: the value-output product `T = E·Wv·H`, its rank
//! bound and the dimensions of its left null spaces with and without the
//! simplex (all-ones) constraint.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::rng::{self, Stream};

/// Everything needed to analyse one attention head at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSnapshot {
    /// 1-based layer index.
    pub layer: usize,
    /// 0-based head index.
    pub head: usize,
    /// Attention-layer input embeddings, `d_s × d`.
    pub e: Matrix,
    /// Value projection, `d × d_v`.
    pub wv: Matrix,
    /// This head's slice of the output projection, `d_v × d`.
    pub h: Matrix,
    /// Post-softmax attention, `d_s × d_s`.
    pub a: Matrix,
}

impl HeadSnapshot {
    /// Validates shapes and that `a` is row-stochastic.
    pub fn new(layer: usize, head: usize, e: Matrix, wv: Matrix, h: Matrix, a: Matrix) -> Result<Self> {
        let snap = Self { layer, head, e, wv, h, a };
        snap.validate()?;
        Ok(snap)
    }

    pub fn seq_len(&self) -> usize {
        self.e.rows()
    }

    pub fn model_dim(&self) -> usize {
        self.e.cols()
    }

    pub fn head_dim(&self) -> usize {
        self.wv.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (ds, d) = self.e.shape();
        let dv = self.wv.cols();
        if self.wv.rows() != d || self.h.shape() != (dv, d) || self.a.shape() != (ds, ds) {
            return Err(Error::Shape(format!(
                "snapshot shapes E {:?}, Wv {:?}, H {:?}, A {:?} do not conform",
                self.e.shape(),
                self.wv.shape(),
                self.h.shape(),
                self.a.shape()
            )));
        }
        for r in 0..ds {
            let row = self.a.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::Invalid(format!("attention row {r} sums to {sum}")));
            }
            if let Some(v) = row.iter().find(|v| **v < 0.0) {
                return Err(Error::Invalid(format!("attention row {r} has negative entry {v}")));
            }
        }
        Ok(())
    }

    pub fn t(&self) -> Result<Matrix> {
        compute_t(self)
    }
}

/// `T = (E·Wv)·H`.
pub fn compute_t(snap: &HeadSnapshot) -> Result<Matrix> {
    let (ds, d) = snap.e.shape();
    if snap.wv.rows() != d || snap.h.rows() != snap.wv.cols() || snap.h.cols() != d {
        return Err(Error::Shape(format!(
            "cannot form T from E {}x{}, Wv {}x{}, H {}x{}",
            ds,
            d,
            snap.wv.rows(),
            snap.wv.cols(),
            snap.h.rows(),
            snap.h.cols()
        )));
    }
    snap.e.matmul(&snap.wv)?.matmul(&snap.h)
}

/// Upper bound on `rank(T)` from the factor shapes: `min(d_s, d, d_v)`.
pub fn rank_upper_bound(seq_len: usize, model_dim: usize, head_dim: usize) -> usize {
    seq_len.min(model_dim).min(head_dim)
}

/// Measured null-space dimensions of one head next to their lower bounds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NullspaceReport {
    pub layer: usize,
    pub head: usize,
    pub d_s: usize,
    pub d: usize,
    pub d_v: usize,
    pub rank_t: usize,
    pub dim_ln_t: usize,
    pub dim_ln_t1: usize,
    pub lower_bound_ln_t: usize,
    pub lower_bound_ln_t1: usize,
}

impl NullspaceReport {
    /// True when both measured dimensions meet their bounds with equality.
    pub fn at_bound(&self) -> bool {
        self.dim_ln_t == self.lower_bound_ln_t && self.dim_ln_t1 == self.lower_bound_ln_t1
    }
}

pub fn nullspace_report(snap: &HeadSnapshot, tol: Option<f64>) -> Result<NullspaceReport> {
    let t = compute_t(snap)?;
    let (d_s, d, d_v) = (snap.seq_len(), snap.model_dim(), snap.head_dim());
    let rank_t = linalg::numerical_rank(&t, tol)?;
    let rank_t1 = linalg::numerical_rank(&t.append_const_col(1.0), tol)?;
    Ok(NullspaceReport {
        layer: snap.layer,
        head: snap.head,
        d_s,
        d,
        d_v,
        rank_t,
        dim_ln_t: d_s - rank_t,
        dim_ln_t1: d_s - rank_t1,
        lower_bound_ln_t: d_s.saturating_sub(d_v),
        lower_bound_ln_t1: d_s.saturating_sub(d_v + 1),
    })
}

/// Orthonormal row basis of `LN([T, 1])`: directions that leave both the
/// head output and the row sums unchanged.
pub fn augmented_nullspace_basis(t: &Matrix, tol: Option<f64>) -> Result<Matrix> {
    linalg::left_nullspace_basis(&t.append_const_col(1.0), tol)
}

/// Random head with Gaussian factors and softmax attention of Gaussian
/// logits (scale `logit_std`). Factors are full rank almost surely.
pub fn random_snapshot(rng: &mut Stream, d_s: usize, d: usize, d_v: usize, logit_std: f64) -> HeadSnapshot {
    let e = rng::gaussian_matrix(rng, d_s, d, 1.0);
    let wv = rng::gaussian_matrix(rng, d, d_v, 1.0 / (d as f64).sqrt());
    let h = rng::gaussian_matrix(rng, d_v, d, 1.0 / (d_v as f64).sqrt());
    let logits = rng::gaussian_matrix(rng, d_s, d_s, logit_std);
    let a = linalg::softmax_rows(&logits);
    HeadSnapshot { layer: 1, head: 0, e, wv, h, a }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap_from(e: Matrix, wv: Matrix, h: Matrix) -> HeadSnapshot {
        let ds = e.rows();
        let a = Matrix::from_fn(ds, ds, |_, _| 1.0 / ds as f64);
        HeadSnapshot::new(1, 0, e, wv, h, a).unwrap()
    }

    #[test]
    fn t_identity_chain_and_annihilation() {
        let s = snap_from(Matrix::identity(3), Matrix::identity(3), Matrix::identity(3));
        assert_eq!(compute_t(&s).unwrap(), Matrix::identity(3));
        let s = snap_from(Matrix::identity(3), Matrix::zeros(3, 3), Matrix::identity(3));
        assert_eq!(compute_t(&s).unwrap(), Matrix::zeros(3, 3));
    }

    #[test]
    fn t_matches_triple_loop() {
        let mut rng = rng::stream(3, 0);
        let s = random_snapshot(&mut rng, 6, 8, 2, 1.0);
        let t = compute_t(&s).unwrap();
        for i in 0..6 {
            for j in 0..8 {
                let mut acc = 0.0;
                for k in 0..8 {
                    for v in 0..2 {
                        acc += s.e.get(i, k) * s.wv.get(k, v) * s.h.get(v, j);
                    }
                }
                assert!((acc - t.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut s = snap_from(Matrix::identity(3), Matrix::identity(3), Matrix::identity(3));
        s.h = Matrix::zeros(2, 3);
        let err = compute_t(&s).unwrap_err();
        assert!(err.to_string().contains("H 2x3"), "{err}");
        assert!(HeadSnapshot::new(1, 0, s.e.clone(), s.wv.clone(), s.h.clone(), s.a.clone()).is_err());
    }

    #[test]
    fn rank_bounds() {
        assert_eq!(rank_upper_bound(128, 768, 64), 64);
        assert_eq!(rank_upper_bound(2, 8, 4), 2);
        assert_eq!(rank_upper_bound(10, 8, 4), 4);
    }

    #[test]
    fn report_full_rank_long_sequence() {
        let mut rng = rng::stream(5, 0);
        let s = random_snapshot(&mut rng, 128, 128, 64, 1.0);
        let r = nullspace_report(&s, None).unwrap();
        assert_eq!((r.dim_ln_t, r.dim_ln_t1), (64, 63));
        assert!(r.at_bound());
        let t = compute_t(&s).unwrap();
        let b = linalg::left_nullspace_basis(&t, None).unwrap();
        assert!(b.matmul(&t).unwrap().max_abs() <= 1e-9 * linalg::spectral_norm(&t).unwrap());
    }

    #[test]
    fn report_short_sequence_has_no_null_space() {
        let mut rng = rng::stream(6, 0);
        let s = random_snapshot(&mut rng, 3, 8, 4, 1.0);
        let r = nullspace_report(&s, None).unwrap();
        assert_eq!(r.dim_ln_t, 0);
        assert_eq!(r.lower_bound_ln_t, 0);
    }

    #[test]
    fn duplicate_embedding_rows_lower_rank() {
        let mut rng = rng::stream(7, 0);
        let mut s = random_snapshot(&mut rng, 4, 8, 4, 1.0);
        let first = s.e.row(0).to_vec();
        s.e.row_mut(1).copy_from_slice(&first);
        let r = nullspace_report(&s, None).unwrap();
        assert!(r.dim_ln_t >= 1);
        assert_eq!(r.dim_ln_t, r.d_s - r.rank_t);
    }

    #[test]
    fn augmented_basis_examples() {
        let mut rng = rng::stream(8, 0);
        let s = random_snapshot(&mut rng, 5, 8, 4, 1.0);
        assert_eq!(augmented_nullspace_basis(&compute_t(&s).unwrap(), None).unwrap().rows(), 0);

        let s = random_snapshot(&mut rng, 10, 8, 4, 1.0);
        let t = compute_t(&s).unwrap();
        let b = augmented_nullspace_basis(&t, None).unwrap();
        assert_eq!(b.rows(), 5);
        let s1 = linalg::spectral_norm(&t).unwrap();
        assert!(b.matmul(&t).unwrap().max_abs() <= 1e-9 * s1);
        for sum in b.row_sums() {
            assert!(sum.abs() <= 1e-10);
        }

        let b = augmented_nullspace_basis(&Matrix::zeros(3, 4), None).unwrap();
        assert_eq!(b.rows(), 2);
        for sum in b.row_sums() {
            assert!(sum.abs() < 1e-14);
        }
    }
}
