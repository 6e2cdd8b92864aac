// SPDX-License-Identifier: MIT OR Apache-2.0

//! Effective attention: the split of an attention matrix into the part
//! annihilated by `T` (null attention) and the remainder that determines the
//! head output (effective attention), plus the summary statistics built on
//! top of it.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::Result;
use crate::head_geometry::{compute_t, HeadSnapshot};
use crate::linalg::{self, Matrix};

/// Raw, effective and null attention of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionDecomposition {
    pub layer: usize,
    pub head: usize,
    /// Raw attention `A`.
    pub a: Matrix,
    /// Effective attention `A⊥ = A − A∥`.
    pub a_perp: Matrix,
    /// Projection of the rows of `A` onto `LN(T)`.
    pub a_par: Matrix,
    /// Dimension of `LN(T)` used for the projection.
    pub null_dim: usize,
}

impl AttentionDecomposition {
    pub fn seq_len(&self) -> usize {
        self.a.rows()
    }

    /// `(raw, effective, null)` for external plotting.
    pub fn triplet(&self) -> (&Matrix, &Matrix, &Matrix) {
        (&self.a, &self.a_perp, &self.a_par)
    }

    /// Number of entries where `A⊥ + A∥` does not reproduce `A` bit for bit.
    pub fn inexact_sum_entries(&self) -> usize {
        let sum = self.a_perp.zip_map(&self.a_par, |x, y| x + y);
        sum.as_slice()
            .iter()
            .zip(self.a.as_slice())
            .filter(|(s, a)| s.to_bits() != a.to_bits())
            .count()
    }
}

/// Splits the snapshot's attention along `LN(T)`.
pub fn decompose(snap: &HeadSnapshot, tol: Option<f64>) -> Result<AttentionDecomposition> {
    let t = compute_t(snap)?;
    decompose_with_t(snap.layer, snap.head, &snap.a, &t, tol)
}

pub fn decompose_with_t(
    layer: usize,
    head: usize,
    a: &Matrix,
    t: &Matrix,
    tol: Option<f64>,
) -> Result<AttentionDecomposition> {
    let basis = linalg::left_nullspace_basis(t, tol)?;
    let projected = linalg::project_rows_onto_subspace(a, &basis)?;
    let a_perp = a.sub(&projected)?;
    // A − A⊥ instead of the raw projection: identical up to rounding, and the
    // pair then re-adds to A exactly whenever |A∥| ≤ |A| entrywise.
    let a_par = a.sub(&a_perp)?;
    Ok(AttentionDecomposition {
        layer,
        head,
        a: a.clone(),
        a_perp,
        a_par,
        null_dim: basis.rows(),
    })
}

/// One row of the correlation profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationRow {
    pub d_s: usize,
    pub n: usize,
    pub mean_pearson: f64,
}

/// A decomposition whose correlation is undefined (constant `A` or `A⊥`).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlaggedDecomposition {
    pub index: usize,
    pub layer: usize,
    pub head: usize,
    pub d_s: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrelationProfile {
    pub rows: Vec<CorrelationRow>,
    pub undefined: Vec<FlaggedDecomposition>,
}

/// Pearson correlation between flattened `A` and `A⊥`.
pub fn raw_effective_correlation(d: &AttentionDecomposition) -> Result<f64> {
    linalg::pearson(d.a.as_slice(), d.a_perp.as_slice())
}

/// Pearson(A, A⊥) per decomposition, averaged per exact sequence length
/// when `group_by_length` is set. Undefined correlations are listed in
/// `undefined` and excluded from the means.
pub fn correlation_profile(decomps: &[AttentionDecomposition], group_by_length: bool) -> CorrelationProfile {
    let mut profile = CorrelationProfile::default();
    let mut buckets: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for (index, d) in decomps.iter().enumerate() {
        match raw_effective_correlation(d) {
            Ok(r) => {
                if group_by_length {
                    let entry = buckets.entry(d.seq_len()).or_insert((0, 0.0));
                    entry.0 += 1;
                    entry.1 += r;
                } else {
                    profile.rows.push(CorrelationRow { d_s: d.seq_len(), n: 1, mean_pearson: r });
                }
            }
            Err(_) => profile.undefined.push(FlaggedDecomposition {
                index,
                layer: d.layer,
                head: d.head,
                d_s: d.seq_len(),
            }),
        }
    }
    if group_by_length {
        profile.rows = buckets
            .into_iter()
            .map(|(d_s, (n, sum))| CorrelationRow { d_s, n, mean_pearson: sum / n as f64 })
            .collect();
    }
    profile
}

/// Mean weight a token group receives.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupMean {
    pub group: String,
    pub members: usize,
    /// `None` when no position carries the label.
    pub mean: Option<f64>,
}

/// Mean of `M[row, col]` over all rows and the columns labelled with each
/// group. `groups` selects and orders the reported groups; when empty, every
/// distinct label is reported in order of first appearance.
pub fn token_group_aggregate(m: &Matrix, labels: &[String], groups: &[String]) -> Result<Vec<GroupMean>> {
    if labels.len() != m.cols() {
        return Err(crate::Error::Shape(format!(
            "{} labels for {} positions",
            labels.len(),
            m.cols()
        )));
    }
    let mut wanted: Vec<String> = groups.to_vec();
    if wanted.is_empty() {
        for l in labels {
            if !wanted.contains(l) {
                wanted.push(l.clone());
            }
        }
    }
    Ok(wanted
        .into_iter()
        .map(|group| {
            let cols: Vec<usize> = labels
                .iter()
                .enumerate()
                .filter(|(_, l)| **l == group)
                .map(|(i, _)| i)
                .collect();
            let mean = if cols.is_empty() || m.rows() == 0 {
                None
            } else {
                let total: f64 = (0..m.rows())
                    .map(|r| cols.iter().map(|&c| m.get(r, c)).sum::<f64>())
                    .sum();
                Some(total / (m.rows() * cols.len()) as f64)
            };
            GroupMean { group, members: cols.len(), mean }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head_geometry::random_snapshot;
    use crate::rng;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn short_sequence_keeps_attention() {
        let mut r = rng::stream(1, 0);
        let s = random_snapshot(&mut r, 2, 8, 4, 1.0);
        let d = decompose(&s, None).unwrap();
        assert_eq!(d.null_dim, 0);
        assert_eq!(d.a_perp, s.a);
        assert_eq!(d.a_par, Matrix::zeros(2, 2));
        assert_eq!(raw_effective_correlation(&d).unwrap(), 1.0);
    }

    #[test]
    fn long_sequence_preserves_output() {
        let mut r = rng::stream(2, 0);
        let s = random_snapshot(&mut r, 10, 8, 4, 1.0);
        let d = decompose(&s, None).unwrap();
        let t = compute_t(&s).unwrap();
        let at = s.a.matmul(&t).unwrap();
        assert!(d.a_perp.matmul(&t).unwrap().max_abs_diff(&at).unwrap() <= 1e-10);
        assert!(d.a_par.matmul(&t).unwrap().max_abs() <= 1e-10);
    }

    #[test]
    fn hand_projection_three_by_three() {
        // T = e1·e1ᵀ: LN(T) = span(e2, e3), so A⊥ keeps column 0 of each row
        // as a multiple of e1.
        let t = Matrix::from_fn(3, 3, |r, c| if r == 0 && c == 0 { 1.0 } else { 0.0 });
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        let d = decompose_with_t(1, 0, &a, &t, None).unwrap();
        assert_eq!(d.null_dim, 2);
        let expected = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0; 3], vec![0.0; 3]]).unwrap();
        assert!(d.a_perp.max_abs_diff(&expected).unwrap() < 1e-15);
    }

    #[test]
    fn effective_attention_may_be_negative() {
        let mut r = rng::stream(3, 0);
        let mut found = false;
        for _ in 0..20 {
            let s = random_snapshot(&mut r, 12, 4, 2, 2.0);
            let d = decompose(&s, None).unwrap();
            if d.a_perp.as_slice().iter().any(|&v| v < 0.0) {
                found = true;
                break;
            }
        }
        assert!(found, "expected a negative effective attention entry");
    }

    #[test]
    fn invariant_to_null_space_shift() {
        let mut r = rng::stream(4, 0);
        let s = random_snapshot(&mut r, 10, 8, 4, 1.0);
        let t = compute_t(&s).unwrap();
        let basis = linalg::left_nullspace_basis(&t, None).unwrap();
        let shift = rng::gaussian_matrix(&mut r, 10, basis.rows(), 1.0).matmul(&basis).unwrap();
        let d0 = decompose_with_t(1, 0, &s.a, &t, None).unwrap();
        let d1 = decompose_with_t(1, 0, &s.a.add(&shift).unwrap(), &t, None).unwrap();
        assert!(d0.a_perp.max_abs_diff(&d1.a_perp).unwrap() <= 1e-9);
    }

    #[test]
    fn profile_groups_and_flags() {
        let mut r = rng::stream(5, 0);
        let mut ds = Vec::new();
        for len in [3, 3, 10] {
            let s = random_snapshot(&mut r, len, 8, 4, 1.0);
            ds.push(decompose(&s, None).unwrap());
        }
        // constant attention has no variance
        let s = random_snapshot(&mut r, 4, 8, 4, 1.0);
        let flat = Matrix::from_fn(4, 4, |_, _| 0.25);
        ds.push(decompose_with_t(2, 1, &flat, &compute_t(&s).unwrap(), None).unwrap());

        let p = correlation_profile(&ds, true);
        assert_eq!(p.rows.len(), 2);
        assert_eq!(p.rows[0], CorrelationRow { d_s: 3, n: 2, mean_pearson: 1.0 });
        assert_eq!(p.rows[1].n, 1);
        assert!(p.rows[1].mean_pearson < 1.0);
        assert_eq!(p.undefined, vec![FlaggedDecomposition { index: 3, layer: 2, head: 1, d_s: 4 }]);

        let p = correlation_profile(&ds, false);
        assert_eq!(p.rows.len(), 3);
    }

    #[test]
    fn group_aggregate_examples() {
        let ds = 5;
        let uniform = Matrix::from_fn(ds, ds, |_, _| 1.0 / ds as f64);
        let lab = labels(&["CLS", "w", "w", "w", "w"]);
        let g = token_group_aggregate(&uniform, &lab, &[]).unwrap();
        assert_eq!(g.len(), 2);
        for gm in &g {
            assert!((gm.mean.unwrap() - 0.2).abs() < 1e-15);
        }

        let onehot = Matrix::from_fn(ds, ds, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let g = token_group_aggregate(&onehot, &lab, &[]).unwrap();
        assert_eq!(g[0].mean, Some(1.0));
        assert_eq!(g[1].mean, Some(0.0));

        let mut r = rng::stream(6, 0);
        let a = linalg::softmax_rows(&rng::gaussian_matrix(&mut r, 4, 4, 1.0));
        let lab = labels(&["x", "x", "y", "y"]);
        let g = token_group_aggregate(&a, &lab, &labels(&["x", "y", "SEP"])).unwrap();
        let mut sx = 0.0;
        let mut sy = 0.0;
        for row in 0..4 {
            sx += a.get(row, 0) + a.get(row, 1);
            sy += a.get(row, 2) + a.get(row, 3);
        }
        assert!((g[0].mean.unwrap() - sx / 8.0).abs() < 1e-15);
        assert!((g[1].mean.unwrap() - sy / 8.0).abs() < 1e-15);
        assert_eq!(g[2], GroupMean { group: "SEP".into(), members: 0, mean: None });

        assert!(token_group_aggregate(&a, &labels(&["x"]), &[]).is_err());
    }

    #[test]
    fn triplet_of_empty_null_space() {
        let mut r = rng::stream(7, 0);
        let s = random_snapshot(&mut r, 3, 8, 4, 1.0);
        let d = decompose(&s, None).unwrap();
        let (raw, eff, null) = d.triplet();
        assert_eq!(raw, eff);
        assert!(null.as_slice().iter().all(|&v| v == 0.0));
        assert_eq!(d.inexact_sum_entries(), 0);
    }
}
