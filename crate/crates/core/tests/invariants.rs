// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use attn_ident::attribution;
use attn_ident::effective::{decompose, decompose_with_t};
use attn_ident::head_geometry::{augmented_nullspace_basis, compute_t, nullspace_report, random_snapshot};
use attn_ident::io::{num, TensorBundle};
use attn_ident::linalg::{left_nullspace_basis, numerical_rank, spectral_norm};
use attn_ident::model::{self, Diagnostics, Model, ModelConfig};
use attn_ident::probe::{self, Metric, ProbeKind, ProbeModel, ProbeTarget, Split};
use attn_ident::rng;
use attn_ident::simplex::{lambda_max, perturb_attention, sample_null_direction};
use attn_ident::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn small_model(seed: u64, layers: usize) -> Model {
    Model::init(ModelConfig { layers, heads: 2, dim: 8, ff_dim: 16, vocab: 20, max_len: 12, seed }).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rank_bounded_and_nullity_exact(ds in 2usize..30, dv in 1usize..10, seed in any::<u64>()) {
        let snap = random_snapshot(&mut rng::stream(seed, 0), ds, 2 * dv, dv, 1.0);
        let t = compute_t(&snap).unwrap();
        let rank = numerical_rank(&t, None).unwrap();
        prop_assert!(rank <= ds.min(dv));
        let rep = nullspace_report(&snap, None).unwrap();
        prop_assert_eq!(rep.dim_ln_t, ds - rep.rank_t);
        if ds > dv {
            prop_assert_eq!(rep.dim_ln_t, ds - dv);
            prop_assert_eq!(rep.dim_ln_t1, ds - dv - 1);
        }
    }

    #[test]
    fn basis_rows_annihilate_t(ds in 3usize..30, dv in 1usize..10, seed in any::<u64>()) {
        let snap = random_snapshot(&mut rng::stream(seed, 0), ds, 2 * dv, dv, 1.0);
        let t = compute_t(&snap).unwrap();
        let s1 = spectral_norm(&t).unwrap();
        let basis = left_nullspace_basis(&t, None).unwrap();
        prop_assert!(basis.matmul(&t).unwrap().max_abs() <= 1e-9 * s1);
        let aug = augmented_nullspace_basis(&t, None).unwrap();
        prop_assert!(aug.matmul(&t).unwrap().max_abs() <= 1e-9 * s1);
        for r in 0..aug.rows() {
            prop_assert!(aug.row(r).iter().sum::<f64>().abs() <= 1e-9);
        }
    }

    #[test]
    fn decomposition_preserves_output(ds in 2usize..30, dv in 1usize..10, seed in any::<u64>()) {
        let snap = random_snapshot(&mut rng::stream(seed, 0), ds, 2 * dv, dv, 1.0);
        let t = compute_t(&snap).unwrap();
        let s1 = spectral_norm(&t).unwrap();
        let d = decompose(&snap, None).unwrap();
        prop_assert!(d.a_par.matmul(&t).unwrap().max_abs() <= 1e-9 * s1);
        prop_assert!(d.a_perp.matmul(&t).unwrap().max_abs_diff(&snap.a.matmul(&t).unwrap()).unwrap() <= 1e-9 * s1);
        if ds <= dv {
            prop_assert_eq!(&d.a_perp, &snap.a);
        }
    }

    #[test]
    fn effective_attention_ignores_null_shifts(ds in 4usize..24, dv in 1usize..4, seed in any::<u64>()) {
        let mut r = rng::stream(seed, 0);
        let snap = random_snapshot(&mut r, ds, 2 * dv, dv, 1.0);
        let t = compute_t(&snap).unwrap();
        let basis = left_nullspace_basis(&t, None).unwrap();
        let mut shifted = snap.a.clone();
        for row in 0..ds {
            let dir = sample_null_direction(&basis, &mut r).unwrap();
            let w: f64 = r.random_range(-2.0..2.0);
            for (x, v) in shifted.row_mut(row).iter_mut().zip(&dir) {
                *x += w * v;
            }
        }
        let base = decompose_with_t(1, 0, &snap.a, &t, None).unwrap();
        let moved = decompose_with_t(1, 0, &shifted, &t, None).unwrap();
        prop_assert!(base.a_perp.max_abs_diff(&moved.a_perp).unwrap() <= 1e-9);
    }

    #[test]
    fn perturbations_stay_equivalent(ds in 3usize..30, dv in 1usize..6, seed in any::<u64>(), scale in 0.01f64..=1.0) {
        prop_assume!(ds > dv + 1);
        let snap = random_snapshot(&mut rng::stream(seed, 0), ds, 2 * dv, dv, 1.0);
        let t = compute_t(&snap).unwrap();
        let s1 = spectral_norm(&t).unwrap();
        let res = perturb_attention(&snap, seed, scale, None).unwrap();
        prop_assert!(res.a_alt.matmul(&t).unwrap().max_abs_diff(&snap.a.matmul(&t).unwrap()).unwrap() <= 1e-9 * s1);
        for r in 0..ds {
            prop_assert!((res.a_alt.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(res.a_alt.row(r).iter().all(|&v| v >= -1e-12));
        }
        prop_assert!(res.a_alt.max_abs_diff(&snap.a).unwrap() > 0.0);
    }

    #[test]
    fn lambda_max_positive_for_positive_rows(n in 2usize..40, seed in any::<u64>()) {
        let mut r = rng::stream(seed, 1);
        let raw: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let a: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let mut dir: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mean = dir.iter().sum::<f64>() / n as f64;
        dir.iter_mut().for_each(|v| *v -= mean);
        prop_assert!(lambda_max(&a, &dir).unwrap() > 0.0);
    }

    #[test]
    fn attribution_rows_are_distributions(len in 2usize..8, layers in 1usize..3, seed in any::<u64>()) {
        let m = small_model(seed, layers);
        let mut r = rng::stream(seed, 2);
        let toks: Vec<usize> = (0..len).map(|_| r.random_range(0..17)).collect();
        let at = attribution::attribute(&m, &toks, &vec![0; len]).unwrap();
        prop_assert!(at.max_row_sum_error() <= 1e-12);
        prop_assert!(at.min_entry() >= 0.0);
        let again = attribution::attribute(&m, &toks, &vec![0; len]).unwrap();
        prop_assert_eq!(attribution::non_max_fraction(&at), attribution::non_max_fraction(&again));
    }

    #[test]
    fn bundle_round_trip_is_bit_exact(vals in proptest::collection::vec(any::<f64>(), 0..40), cols in 1usize..5) {
        let rows = vals.len() / cols;
        let mut b = TensorBundle::new(Default::default());
        b.insert("m", vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
        b.insert("v", vec![vals.len()], vals.clone()).unwrap();
        let back = TensorBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        for (x, y) in back.tensors().iter().zip(b.tensors()) {
            prop_assert_eq!(&x.dims, &y.dims);
            prop_assert!(x.data.iter().zip(&y.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }

    #[test]
    fn csv_numbers_round_trip(v in any::<f64>().prop_filter("finite", |v| v.is_finite())) {
        prop_assert_eq!(num(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn splits_are_disjoint_and_cosine_scale_free(seed in any::<u64>(), alpha in 1e-3f64..1e3) {
        let m = small_model(seed, 1);
        let mut r = rng::stream(seed, 3);
        let traces: Vec<_> = (0..20)
            .map(|_| {
                let toks: Vec<usize> = (0..8).map(|_| r.random_range(0..17)).collect();
                model::forward(&m, &toks, &[0; 8]).unwrap()
            })
            .collect();
        let ds = probe::build_dataset(&traces, 1, ProbeTarget::Input, 0, seed).unwrap();
        let mut seen = BTreeMap::new();
        for s in &ds.sentences {
            prop_assert!(seen.insert(s.sentence, s.split).is_none());
        }
        let input = probe::build_dataset(&traces, 0, ProbeTarget::Input, 0, seed).unwrap();
        for metric in [Metric::Cosine, Metric::L2] {
            prop_assert_eq!(probe::identifiability_rate(&ProbeModel::naive(metric, 0), &input, Split::Test).unwrap(), 1.0);
        }
        let hyper = probe::ProbeHyper { max_epochs: 3, seed, ..Default::default() };
        let lin = probe::train_probe(&ds, ProbeKind::Linear, Metric::Cosine, &hyper).unwrap();
        let base = probe::identifiability_rate(&lin, &ds, Split::Test).unwrap();
        let scaled = probe::rate_with(&ds, Split::Test, Metric::Cosine, |v| lin.apply(v).iter().map(|x| x * alpha).collect()).unwrap();
        prop_assert_eq!(base.to_bits(), scaled.to_bits());
    }

    #[test]
    fn identity_diagnostic_isolates_positions(seed in any::<u64>(), len in 2usize..7) {
        let m = small_model(seed, 2);
        let mut r = rng::stream(seed, 4);
        let toks: Vec<usize> = (0..len).map(|_| r.random_range(0..17)).collect();
        let x = m.embed(&toks, &vec![0; len]).unwrap();
        let diag = Diagnostics { identity_attention: true, zero_ffn: true, ..Diagnostics::default() };
        for j in 0..len {
            let jac = model::jacobian_embeddings(&m, &x, 1, j, &diag).unwrap();
            let d = m.config.dim;
            for i in (0..len).filter(|&i| i != j) {
                prop_assert_eq!(jac.col_block(i * d, d).max_abs(), 0.0);
            }
        }
        let a = model::forward_embeddings(&m, &x, &Diagnostics::default()).unwrap();
        let b = model::forward_embeddings(&m, &x, &Diagnostics::default()).unwrap();
        prop_assert!(a.hidden.iter().zip(&b.hidden).all(|(p, q): (&Matrix, &Matrix)| p.as_slice().iter().zip(q.as_slice()).all(|(u, v)| u.to_bits() == v.to_bits())));
    }
}
