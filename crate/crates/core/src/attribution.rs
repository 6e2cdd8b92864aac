// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hidden token attribution: normalized gradient norms of hidden embeddings
//! with respect to the input embeddings, plus summary statistics.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{layer_jacobians, Diagnostics, Model};

/// `c[l][j][i]`, the share of input `i` in the embedding of position `j`
/// at layer `l`. Layer 0 is the input itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionTensor {
    layers: usize,
    seq_len: usize,
    data: Vec<f64>,
}

impl AttributionTensor {
    /// Builds a tensor from raw contributions, indexed `[l][j][i]` for
    /// `l = 0..=layers`, checking normalization and sign.
    pub fn new(layers: usize, seq_len: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != (layers + 1) * seq_len * seq_len {
            return Err(Error::Shape(format!(
                "attribution data has {} entries, expected {}",
                data.len(),
                (layers + 1) * seq_len * seq_len
            )));
        }
        let t = Self { layers, seq_len, data };
        t.check()?;
        Ok(t)
    }

    fn check(&self) -> Result<()> {
        for l in 0..=self.layers {
            for j in 0..self.seq_len {
                let row = self.row(l, j);
                if row.iter().any(|&v| !(-1e-12..=1.0 + 1e-12).contains(&v)) {
                    return Err(Error::Invalid(format!("contribution out of [0, 1] at layer {l}, position {j}")));
                }
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(Error::Invalid(format!("contributions at layer {l}, position {j} sum to {s}")));
                }
            }
        }
        Ok(())
    }

    /// Exact identity attribution (`c[l][j][i] = δ_ij`).
    pub fn identity(layers: usize, seq_len: usize) -> Self {
        let mut data = vec![0.0; (layers + 1) * seq_len * seq_len];
        for l in 0..=layers {
            for j in 0..seq_len {
                data[(l * seq_len + j) * seq_len + j] = 1.0;
            }
        }
        Self { layers, seq_len, data }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn get(&self, l: usize, j: usize, i: usize) -> f64 {
        self.data[(l * self.seq_len + j) * self.seq_len + i]
    }

    pub fn row(&self, l: usize, j: usize) -> &[f64] {
        let start = (l * self.seq_len + j) * self.seq_len;
        &self.data[start..start + self.seq_len]
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..=self.layers)
            .flat_map(|l| (0..self.seq_len).map(move |j| (l, j)))
            .map(|(l, j)| (self.row(l, j).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Turns full layer Jacobians (see [`layer_jacobians`]) into contributions.
pub fn from_jacobians(jacobians: &[Matrix], seq_len: usize, dim: usize) -> Result<AttributionTensor> {
    if jacobians.is_empty() {
        return Err(Error::Invalid("no Jacobians given".into()));
    }
    let n = seq_len * dim;
    let layers = jacobians.len() - 1;
    let mut data = Vec::with_capacity(jacobians.len() * seq_len * seq_len);
    for (l, jac) in jacobians.iter().enumerate() {
        if jac.shape() != (n, n) {
            return Err(Error::Shape(format!("layer {l} Jacobian is {:?}, expected {n}x{n}", jac.shape())));
        }
        for j in 0..seq_len {
            let mut norms = vec![0.0; seq_len];
            for m in 0..dim {
                let row = jac.row(j * dim + m);
                for (i, slot) in norms.iter_mut().enumerate() {
                    *slot += row[i * dim..(i + 1) * dim].iter().map(|v| v * v).sum::<f64>();
                }
            }
            norms.iter_mut().for_each(|v| *v = v.sqrt());
            let total: f64 = norms.iter().sum();
            if !(total > 0.0) || !total.is_finite() {
                return Err(Error::DegenerateAttribution { layer: l, position: j });
            }
            data.extend(norms.into_iter().map(|v| v / total));
        }
    }
    AttributionTensor::new(layers, seq_len, data)
}

pub fn attribute(model: &Model, tokens: &[usize], segments: &[usize]) -> Result<AttributionTensor> {
    let x = model.embed(tokens, segments)?;
    attribute_embeddings(model, &x, &Diagnostics::default())
}

pub fn attribute_embeddings(model: &Model, x: &Matrix, diag: &Diagnostics) -> Result<AttributionTensor> {
    let jacs = layer_jacobians(model, x, model.config.layers, diag)?;
    from_jacobians(&jacs, x.rows(), x.cols())
}

/// Box-plot summary with 1.5·IQR whiskers; quartiles by linear interpolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxStats {
    pub n: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl BoxStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let (q1, median, q3) = (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75));
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let whisker_low = v.iter().copied().find(|&x| x >= lo_fence).unwrap_or(q1);
        let whisker_high = v.iter().rev().copied().find(|&x| x <= hi_fence).unwrap_or(q3);
        Some(Self { n: v.len(), median, q1, q3, whisker_low, whisker_high })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfContribution {
    pub layer: usize,
    /// `None` for the ungrouped row.
    pub group: Option<String>,
    pub stats: BoxStats,
}

/// Box-plot statistics of `c[l][j][j]` for layers `1..=L` pooled over all
/// given tensors, plus one row per label when `labels` is given. Labels are
/// per position, one slice per tensor.
pub fn self_contribution_stats(
    tensors: &[AttributionTensor],
    labels: Option<&[Vec<String>]>,
) -> Result<Vec<SelfContribution>> {
    if let Some(lab) = labels {
        if lab.len() != tensors.len() || lab.iter().zip(tensors).any(|(l, t)| l.len() != t.seq_len) {
            return Err(Error::Shape("one label per position is required".into()));
        }
    }
    let layers = tensors.iter().map(|t| t.layers).min().unwrap_or(0);
    let mut out = Vec::new();
    for l in 1..=layers {
        let mut all = Vec::new();
        let mut grouped: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for (ti, t) in tensors.iter().enumerate() {
            for j in 0..t.seq_len {
                let v = t.get(l, j, j);
                all.push(v);
                if let Some(lab) = labels {
                    grouped.entry(lab[ti][j].as_str()).or_default().push(v);
                }
            }
        }
        if let Some(stats) = BoxStats::from_values(&all) {
            out.push(SelfContribution { layer: l, group: None, stats });
        }
        for (g, vals) in grouped {
            if let Some(stats) = BoxStats::from_values(&vals) {
                out.push(SelfContribution { layer: l, group: Some(g.to_string()), stats });
            }
        }
    }
    Ok(out)
}

/// Fraction of positions whose own input is not the largest contributor,
/// for layers `0..=L`. Ties go to the diagonal.
pub fn non_max_fraction(at: &AttributionTensor) -> Vec<f64> {
    (0..=at.layers)
        .map(|l| {
            if at.seq_len == 0 {
                return 0.0;
            }
            let miss = (0..at.seq_len)
                .filter(|&j| {
                    let row = at.row(l, j);
                    row.iter().any(|&v| v > row[j])
                })
                .count();
            miss as f64 / at.seq_len as f64
        })
        .collect()
}

/// Neighbour-distance bucket; `max = None` means unbounded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OffsetGroup {
    pub name: String,
    pub min: usize,
    pub max: Option<usize>,
}

impl OffsetGroup {
    pub fn new(name: &str, min: usize, max: Option<usize>) -> Self {
        Self { name: name.to_string(), min, max }
    }

    fn contains(&self, offset: usize) -> bool {
        offset >= self.min && self.max.is_none_or(|m| offset <= m)
    }
}

/// The six standard buckets: 1, 2, 3, 4–5, 6–10, 11+.
pub fn default_groups() -> Vec<OffsetGroup> {
    vec![
        OffsetGroup::new("1st", 1, Some(1)),
        OffsetGroup::new("2nd", 2, Some(2)),
        OffsetGroup::new("3rd", 3, Some(3)),
        OffsetGroup::new("4th-5th", 4, Some(5)),
        OffsetGroup::new("6th-10th", 6, Some(10)),
        OffsetGroup::new("11th+", 11, None),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffsetCurvePoint {
    pub layer: usize,
    pub offset: i64,
    pub value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalityProfile {
    pub groups: Vec<OffsetGroup>,
    /// `raw[l − 1][g]`: mean group contribution at layer `l`, `None` if no
    /// target has a neighbour in the group.
    pub raw: Vec<Vec<Option<f64>>>,
    /// `share[l − 1][g]`: `raw` normalized so each group sums to 1 over layers.
    pub share: Vec<Vec<Option<f64>>>,
    /// Number of targets contributing to each group.
    pub counts: Vec<usize>,
    /// Normalized contribution per signed offset for layers 1, ⌈L/2⌉ and L.
    pub curves: Vec<OffsetCurvePoint>,
}

impl LocalityProfile {
    pub fn share_of(&self, layer: usize, group: &str) -> Option<f64> {
        let g = self.groups.iter().position(|x| x.name == group)?;
        self.share.get(layer.checked_sub(1)?)?[g]
    }
}

/// Per target, each offset contributes the mean of its available left and
/// right neighbours; offsets in a group are summed; targets lacking the
/// group are skipped. Means are pooled over all tensors.
pub fn locality_profile(tensors: &[AttributionTensor], groups: &[OffsetGroup]) -> Result<LocalityProfile> {
    let layers = tensors.iter().map(|t| t.layers).min().unwrap_or(0);
    let mut raw = vec![vec![None; groups.len()]; layers];
    let mut counts = vec![0usize; groups.len()];
    for (gi, g) in groups.iter().enumerate() {
        for l in 1..=layers {
            let (mut total, mut n) = (0.0, 0usize);
            for t in tensors {
                for j in 0..t.seq_len {
                    let mut acc = 0.0;
                    let mut any = false;
                    for off in (g.min.max(1)..t.seq_len).filter(|&o| g.contains(o)) {
                        let mut sides = Vec::with_capacity(2);
                        if j >= off {
                            sides.push(t.get(l, j, j - off));
                        }
                        if j + off < t.seq_len {
                            sides.push(t.get(l, j, j + off));
                        }
                        if !sides.is_empty() {
                            acc += sides.iter().sum::<f64>() / sides.len() as f64;
                            any = true;
                        }
                    }
                    if any {
                        total += acc;
                        n += 1;
                    }
                }
            }
            if n > 0 {
                raw[l - 1][gi] = Some(total / n as f64);
            }
            if l == 1 {
                counts[gi] = n;
            }
        }
    }
    let mut share = vec![vec![None; groups.len()]; layers];
    for gi in 0..groups.len() {
        let sum: f64 = raw.iter().filter_map(|r| r[gi]).sum();
        if sum > 0.0 {
            for l in 0..layers {
                share[l][gi] = raw[l][gi].map(|v| v / sum);
            }
        }
    }
    let mut curve_layers = vec![1, layers.div_ceil(2), layers];
    curve_layers.retain(|&l| l >= 1);
    curve_layers.dedup();
    let max_len = tensors.iter().map(|t| t.seq_len).max().unwrap_or(0) as i64;
    let mut curves = Vec::new();
    for l in curve_layers {
        let mut points = Vec::new();
        for off in -(max_len - 1)..=(max_len - 1) {
            let (mut total, mut n) = (0.0, 0usize);
            for t in tensors {
                for j in 0..t.seq_len as i64 {
                    let i = j + off;
                    if (0..t.seq_len as i64).contains(&i) {
                        total += t.get(l, j as usize, i as usize);
                        n += 1;
                    }
                }
            }
            if n > 0 {
                points.push(OffsetCurvePoint { layer: l, offset: off, value: total / n as f64, count: n });
            }
        }
        let norm: f64 = points.iter().map(|p| p.value).sum();
        if norm > 0.0 {
            points.iter_mut().for_each(|p| p.value /= norm);
        }
        curves.extend(points);
    }
    Ok(LocalityProfile { groups: groups.to_vec(), raw, share, counts, curves })
}

/// Rows `c[l][j][·]` for `l = 1..=L`, as an `L × d_s` matrix.
pub fn track_token(at: &AttributionTensor, position: usize) -> Result<Matrix> {
    if position >= at.seq_len {
        return Err(Error::Invalid(format!("position {position} out of range (length {})", at.seq_len)));
    }
    Ok(Matrix::from_fn(at.layers, at.seq_len, |r, i| at.get(r + 1, position, i)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{jacobian_fd_embeddings, ModelConfig};

    fn uniform(layers: usize, ds: usize) -> AttributionTensor {
        AttributionTensor::new(layers, ds, vec![1.0 / ds as f64; (layers + 1) * ds * ds]).unwrap()
    }

    fn model(seed: u64) -> Model {
        let mut m =
            Model::init(ModelConfig { layers: 2, heads: 2, dim: 16, ff_dim: 32, vocab: 20, max_len: 12, seed }).unwrap();
        for s in m.slices_mut() {
            s.iter_mut().for_each(|v| *v *= 25.0);
        }
        m
    }

    #[test]
    fn pass_through_is_identity() {
        let m = Model::init(ModelConfig { layers: 0, ..ModelConfig::default() }).unwrap();
        let at = attribute(&m, &[1, 2, 3, 4], &[0; 4]).unwrap();
        assert_eq!(at, AttributionTensor::identity(0, 4));
    }

    #[test]
    fn identity_diagnostic_is_exact() {
        let m = model(1);
        let x = m.embed(&[1, 2, 3, 4, 5], &[0; 5]).unwrap();
        let diag = Diagnostics { identity_attention: true, zero_ffn: true, ..Diagnostics::default() };
        let at = attribute_embeddings(&m, &x, &diag).unwrap();
        assert_eq!(at, AttributionTensor::identity(2, 5));
        assert_eq!(non_max_fraction(&at), vec![0.0; 3]);
    }

    #[test]
    fn matches_finite_difference_attribution() {
        let m = model(2);
        let x = m.embed(&[1, 7, 3, 12, 5, 9], &[0; 6]).unwrap();
        let diag = Diagnostics::default();
        let at = attribute_embeddings(&m, &x, &diag).unwrap();
        let mut jacs = vec![Matrix::identity(96)];
        for l in 1..=2 {
            let mut full = Matrix::zeros(96, 96);
            for j in 0..6 {
                let jac = jacobian_fd_embeddings(&m, &x, l, j, 1e-5, &diag).unwrap();
                for r in 0..16 {
                    full.row_mut(j * 16 + r).copy_from_slice(jac.row(r));
                }
            }
            jacs.push(full);
        }
        let fd = from_jacobians(&jacs, 6, 16).unwrap();
        for l in 0..=2 {
            for j in 0..6 {
                for i in 0..6 {
                    assert!((at.get(l, j, i) - fd.get(l, j, i)).abs() <= 1e-4);
                }
            }
        }
        assert!(at.max_row_sum_error() <= 1e-12 && at.min_entry() >= 0.0);
    }

    #[test]
    fn zero_gradient_is_degenerate() {
        let jacs = vec![Matrix::identity(4), Matrix::zeros(4, 4)];
        assert!(matches!(
            from_jacobians(&jacs, 2, 2),
            Err(Error::DegenerateAttribution { layer: 1, position: 0 })
        ));
    }

    #[test]
    fn tensor_validation() {
        assert!(AttributionTensor::new(0, 2, vec![0.5, 0.5, 0.2, 0.2]).is_err());
        assert!(AttributionTensor::new(0, 2, vec![1.5, -0.5, 0.5, 0.5]).is_err());
        assert!(AttributionTensor::new(0, 2, vec![1.0]).is_err());
    }

    #[test]
    fn self_contribution_examples() {
        let stats = self_contribution_stats(&[AttributionTensor::identity(3, 6)], None).unwrap();
        assert_eq!(stats.len(), 3);
        assert!(stats.iter().all(|s| s.stats.median == 1.0));
        let stats = self_contribution_stats(&[uniform(2, 8)], None).unwrap();
        assert!(stats.iter().all(|s| s.stats.median == 0.125));
        let labels = vec![vec!["a".to_string(), "b".to_string(), "a".to_string()]];
        let stats = self_contribution_stats(&[AttributionTensor::identity(1, 3)], Some(&labels)).unwrap();
        let groups: Vec<_> = stats.iter().map(|s| (s.group.clone(), s.stats.n)).collect();
        assert_eq!(groups, vec![(None, 3), (Some("a".into()), 2), (Some("b".into()), 1)]);
        let bad = vec![vec!["a".to_string()]];
        assert!(self_contribution_stats(&[AttributionTensor::identity(1, 3)], Some(&bad)).is_err());
    }

    #[test]
    fn box_stats_whiskers_drop_outliers() {
        let s = BoxStats::from_values(&[1.0, 2.0, 3.0, 4.0, 100.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (2.0, 3.0, 4.0));
        assert_eq!((s.whisker_low, s.whisker_high), (1.0, 4.0));
        assert!(BoxStats::from_values(&[]).is_none());
    }

    fn shifted(layers: usize, ds: usize, shift: usize) -> AttributionTensor {
        let mut data = vec![0.0; (layers + 1) * ds * ds];
        for l in 0..=layers {
            for j in 0..ds {
                data[(l * ds + j) * ds + (j + shift) % ds] = 1.0;
            }
        }
        AttributionTensor::new(layers, ds, data).unwrap()
    }

    #[test]
    fn non_max_examples() {
        assert_eq!(non_max_fraction(&AttributionTensor::identity(2, 4)), vec![0.0; 3]);
        assert_eq!(non_max_fraction(&shifted(1, 4, 1)), vec![1.0, 1.0]);
        // tie with the diagonal counts as self
        let at = AttributionTensor::new(0, 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(non_max_fraction(&at), vec![0.0]);
    }

    #[test]
    fn locality_uniform_is_flat() {
        let p = locality_profile(&[uniform(4, 16)], &default_groups()).unwrap();
        for l in 1..=4 {
            for g in &p.groups {
                assert!((p.share_of(l, &g.name).unwrap() - 0.25).abs() <= 1e-12);
            }
        }
        for g in 0..6 {
            let s: f64 = (0..4).map(|l| p.share[l][g].unwrap()).sum();
            assert!((s - 1.0).abs() <= 1e-10);
        }
        for l in [1, 2, 4] {
            let total: f64 = p.curves.iter().filter(|c| c.layer == l).map(|c| c.value).sum();
            assert!((total - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn locality_neighbour_concentration() {
        let ds = 14;
        let mut data = vec![0.0; 4 * ds * ds];
        for l in 0..4 {
            for j in 0..ds {
                let target = if l == 1 { if j + 1 < ds { j + 1 } else { j - 1 } } else { j };
                data[(l * ds + j) * ds + target] = 1.0;
            }
        }
        let at = AttributionTensor::new(3, ds, data).unwrap();
        let p = locality_profile(&[at], &default_groups()).unwrap();
        assert_eq!(p.share_of(1, "1st"), Some(1.0));
        assert_eq!(p.share_of(2, "1st"), Some(0.0));
        assert_eq!(p.share_of(3, "1st"), Some(0.0));
        assert_eq!(p.share_of(1, "2nd"), None);
    }

    #[test]
    fn locality_short_sequence_marks_absent() {
        let p = locality_profile(&[uniform(2, 6)], &default_groups()).unwrap();
        assert_eq!(p.counts[5], 0);
        assert!(p.raw.iter().all(|r| r[5].is_none()));
        assert!(p.share_of(1, "1st").is_some());
    }

    #[test]
    fn track_token_rows() {
        let t = track_token(&AttributionTensor::identity(3, 5), 2).unwrap();
        assert_eq!(t.shape(), (3, 5));
        for r in 0..3 {
            assert_eq!(t.row(r), &[0.0, 0.0, 1.0, 0.0, 0.0]);
        }
        assert!(track_token(&AttributionTensor::identity(3, 5), 5).is_err());
    }
}
