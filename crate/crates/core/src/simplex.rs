// SPDX-License-Identifier: MIT OR Apache-2.0

//! Alternative attention matrices that stay on the probability simplex and
//! produce the same head output.
//!
//! Each row `a` of `A` is moved along a random direction `ã ∈ LN([T, 1])`
//! by `λ ≤ λ_max`, where `λ_max = min_{ã_i < 0} (−a_i / ã_i)` is the
//! largest step keeping every entry nonnegative.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::head_geometry::{augmented_nullspace_basis, compute_t, HeadSnapshot};
use crate::linalg::{dot, Matrix};
use crate::rng::{self, Stream};

/// Default fraction of `λ_max` used for each row.
pub const DEFAULT_SCALE: f64 = 0.5;

/// `λ_used` never exceeds this multiple of `‖a‖₂`.
pub const LAMBDA_NORM_CAP: f64 = 10.0;

/// Rows whose smallest entry is below this are reported as confined.
pub const CONFINED_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationResult {
    pub a_alt: Matrix,
    pub lambda_used: Vec<f64>,
    /// `+∞` for rows whose direction has no negative component.
    pub lambda_max: Vec<f64>,
    /// Sampled unit directions `ã`, one per row.
    pub direction: Matrix,
    /// Rows with an (almost) zero attention entry; their step may be ≈ 0.
    pub confined_rows: Vec<usize>,
}

/// Unit-norm random combination of the basis rows.
pub fn sample_null_direction(basis: &Matrix, rng: &mut Stream) -> Result<Vec<f64>> {
    if basis.rows() == 0 {
        return Err(Error::IdentifiableHead);
    }
    let mut dir = vec![0.0; basis.cols()];
    loop {
        let coeffs: Vec<f64> = (0..basis.rows()).map(|_| rng.sample(StandardNormal)).collect();
        dir.iter_mut().for_each(|v| *v = 0.0);
        for (b, c) in coeffs.iter().enumerate() {
            for (d, x) in dir.iter_mut().zip(basis.row(b)) {
                *d += c * x;
            }
        }
        let norm = dot(&dir, &dir).sqrt();
        if norm > 0.0 {
            dir.iter_mut().for_each(|v| *v /= norm);
            return Ok(dir);
        }
    }
}

/// Largest `λ` with `a + λ·ã ≥ 0`; `+∞` if `ã` has no negative entry.
pub fn lambda_max(a_row: &[f64], atilde: &[f64]) -> Result<f64> {
    if a_row.len() != atilde.len() {
        return Err(Error::Shape(format!(
            "attention row of length {} vs direction of length {}",
            a_row.len(),
            atilde.len()
        )));
    }
    if let Some((index, &value)) = a_row.iter().enumerate().find(|(_, v)| **v <= 0.0) {
        return Err(Error::NonPositiveAttention { index, value });
    }
    Ok(a_row
        .iter()
        .zip(atilde)
        .filter(|(_, t)| **t < 0.0)
        .map(|(a, t)| -a / t)
        .fold(f64::INFINITY, f64::min))
}

/// Stream id for the row sampler of one head.
fn row_stream_id(layer: usize, head: usize, row: usize) -> u64 {
    ((layer as u64) << 42) | ((head as u64) << 21) | row as u64
}

/// Builds `A + Ã` row by row with `λ_used = min(scale·λ_max, 10·‖a‖₂)`.
pub fn perturb_attention(snap: &HeadSnapshot, seed: u64, scale: f64, tol: Option<f64>) -> Result<PerturbationResult> {
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::Invalid(format!("scale must be in (0, 1], got {scale}")));
    }
    let t = compute_t(snap)?;
    let basis = augmented_nullspace_basis(&t, tol)?;
    if basis.rows() == 0 {
        return Err(Error::IdentifiableHead);
    }
    let ds = snap.seq_len();
    let mut a_alt = snap.a.clone();
    let mut direction = Matrix::zeros(ds, ds);
    let mut lambda_used = Vec::with_capacity(ds);
    let mut lambda_maxes = Vec::with_capacity(ds);
    let mut confined_rows = Vec::new();
    for r in 0..ds {
        let mut rng = rng::stream(seed, row_stream_id(snap.layer, snap.head, r));
        let dir = sample_null_direction(&basis, &mut rng)?;
        let a = snap.a.row(r);
        if a.iter().fold(f64::INFINITY, |m, &v| m.min(v)) < CONFINED_THRESHOLD {
            confined_rows.push(r);
        }
        let lmax = match lambda_max(a, &dir) {
            Ok(l) => l,
            // exact zeros: only directions that keep those entries fixed move
            Err(Error::NonPositiveAttention { .. }) => a
                .iter()
                .zip(&dir)
                .filter(|(_, t)| **t < 0.0)
                .map(|(a, t)| (-a / t).max(0.0))
                .fold(f64::INFINITY, f64::min),
            Err(e) => return Err(e),
        };
        let cap = LAMBDA_NORM_CAP * dot(a, a).sqrt();
        let lam = (scale * lmax).min(cap);
        for (out, d) in a_alt.row_mut(r).iter_mut().zip(&dir) {
            *out += lam * d;
        }
        direction.row_mut(r).copy_from_slice(&dir);
        lambda_used.push(lam);
        lambda_maxes.push(lmax);
    }
    Ok(PerturbationResult { a_alt, lambda_used, lambda_max: lambda_maxes, direction, confined_rows })
}

/// Diagnostics comparing an alternative attention with the original.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    /// `‖A_alt·T − A·T‖_max`.
    pub max_output_diff: f64,
    /// `max_r |Σ A_alt[r] − 1|`.
    pub max_row_sum_err: f64,
    pub min_entry: f64,
    /// Largest entrywise change `‖A_alt − A‖_max`.
    pub max_attention_diff: f64,
    pub passed: bool,
}

pub fn verify_equivalence(a: &Matrix, a_alt: &Matrix, t: &Matrix, tol: f64) -> Result<EquivalenceReport> {
    let out = a.matmul(t)?;
    let out_alt = a_alt.matmul(t)?;
    let max_output_diff = out.max_abs_diff(&out_alt)?;
    let max_row_sum_err = a_alt
        .row_sums()
        .into_iter()
        .fold(0.0, |m: f64, s| m.max((s - 1.0).abs()));
    let min_entry = a_alt.as_slice().iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let max_attention_diff = a.max_abs_diff(a_alt)?;
    let passed = max_output_diff <= tol && max_row_sum_err <= tol && min_entry >= -tol;
    Ok(EquivalenceReport { max_output_diff, max_row_sum_err, min_entry, max_attention_diff, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head_geometry::random_snapshot;
    use crate::linalg::{self, spectral_norm};

    #[test]
    fn single_row_basis_gives_that_row() {
        let b = Matrix::from_rows(&[vec![0.6, -0.8]]).unwrap();
        let mut r = rng::stream(1, 0);
        let d = sample_null_direction(&b, &mut r).unwrap();
        assert!((d[0].abs() - 0.6).abs() < 1e-15 && (d[1].abs() - 0.8).abs() < 1e-15);
        assert_eq!(d[0].signum(), -d[1].signum());
    }

    #[test]
    fn sampled_direction_satisfies_both_conditions() {
        let mut r = rng::stream(2, 0);
        let s = random_snapshot(&mut r, 10, 8, 4, 1.0);
        let t = compute_t(&s).unwrap();
        let b = augmented_nullspace_basis(&t, None).unwrap();
        let d = sample_null_direction(&b, &mut r).unwrap();
        let dt = Matrix::new(1, 10, d.clone()).unwrap().matmul(&t).unwrap();
        assert!(dt.max_abs() <= 1e-10);
        assert!(d.iter().sum::<f64>().abs() <= 1e-12);
    }

    #[test]
    fn identifiable_head_is_signalled() {
        let mut r = rng::stream(3, 0);
        let s = random_snapshot(&mut r, 5, 8, 4, 1.0);
        let b = augmented_nullspace_basis(&compute_t(&s).unwrap(), None).unwrap();
        assert!(matches!(sample_null_direction(&b, &mut r), Err(Error::IdentifiableHead)));
        assert!(matches!(perturb_attention(&s, 1, 0.5, None), Err(Error::IdentifiableHead)));
    }

    #[test]
    fn lambda_max_examples() {
        assert_eq!(lambda_max(&[0.5, 0.5], &[1.0, -1.0]).unwrap(), 0.5);
        let l = lambda_max(&[0.7, 0.2, 0.1], &[0.5, -0.25, -0.25]).unwrap();
        assert!((l - 0.4).abs() < 1e-15);
        assert_eq!(lambda_max(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), f64::INFINITY);
        assert!(matches!(
            lambda_max(&[1.0, 0.0], &[1.0, -1.0]),
            Err(Error::NonPositiveAttention { index: 1, .. })
        ));
    }

    #[test]
    fn small_scale_approaches_original() {
        let mut r = rng::stream(4, 0);
        let s = random_snapshot(&mut r, 10, 8, 4, 1.0);
        let small = perturb_attention(&s, 9, 1e-9, None).unwrap();
        assert!(small.a_alt.max_abs_diff(&s.a).unwrap() < 1e-9);
        let big = perturb_attention(&s, 9, 0.5, None).unwrap();
        assert!(big.a_alt.max_abs_diff(&s.a).unwrap() > small.a_alt.max_abs_diff(&s.a).unwrap());
    }

    #[test]
    fn perturbation_meets_simplex_and_null_conditions() {
        let mut r = rng::stream(5, 0);
        let s = random_snapshot(&mut r, 10, 8, 4, 1.0);
        let p = perturb_attention(&s, 42, 0.5, None).unwrap();
        let t = compute_t(&s).unwrap();
        let tilde = p.a_alt.sub(&s.a).unwrap();
        // (a) Ã·T = 0, (b) Ã·1 = 0, (c) Ã ≥ −A
        assert!(tilde.matmul(&t).unwrap().max_abs() <= 1e-10 * spectral_norm(&t).unwrap().max(1.0));
        assert!(tilde.row_sums().iter().all(|s| s.abs() <= 1e-10));
        assert!(p.a_alt.as_slice().iter().all(|&v| v >= -1e-12));
        for (u, m) in p.lambda_used.iter().zip(&p.lambda_max) {
            assert!(*u > 0.0 && u <= m);
        }
        assert!(p.confined_rows.is_empty());
        let rep = verify_equivalence(&s.a, &p.a_alt, &t, 1e-9).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.max_attention_diff > 0.0);
        // same seed reproduces the same matrix
        assert_eq!(perturb_attention(&s, 42, 0.5, None).unwrap(), p);
    }

    #[test]
    fn equivalence_report_cases() {
        let mut r = rng::stream(6, 0);
        let s = random_snapshot(&mut r, 10, 8, 4, 1.0);
        let t = compute_t(&s).unwrap();
        let same = verify_equivalence(&s.a, &s.a, &t, 1e-9).unwrap();
        assert_eq!(same.max_output_diff, 0.0);
        assert!(same.passed);

        let mut broken = s.a.clone();
        broken.set(0, 0, 0.0);
        let sum: f64 = broken.row(0).iter().sum();
        broken.row_mut(0).iter_mut().for_each(|v| *v /= sum);
        let rep = verify_equivalence(&s.a, &broken, &t, 1e-9).unwrap();
        assert!(!rep.passed);
        assert!(rep.max_output_diff > 1e-9);
    }

    #[test]
    fn lambda_max_positive_for_positive_rows() {
        let mut r = rng::stream(7, 0);
        for _ in 0..10_000 {
            let n = 2 + (r.random::<u32>() % 10) as usize;
            let logits = rng::gaussian_vec(&mut r, n);
            let mut a = logits.clone();
            linalg::softmax_in_place(&mut a);
            let mut dir = rng::gaussian_vec(&mut r, n);
            let mean = dir.iter().sum::<f64>() / n as f64;
            dir.iter_mut().for_each(|v| *v -= mean);
            assert!(lambda_max(&a, &dir).unwrap() > 0.0);
        }
    }
}
