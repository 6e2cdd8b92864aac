// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token identifiability probes: map hidden embeddings back to the input
//! space and check whether the nearest input vector within the sentence
//! is the right one.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::model::{gelu, gelu_derivative, ForwardTrace};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// What the probe should recover from the layer-`l` embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProbeTarget {
    /// The input embeddings `x_i`.
    Input,
    /// The embeddings of layer `l − 1`.
    PreviousLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ProbeKind {
    /// Identity map, no training.
    Naive,
    /// `y = s·W`, no bias.
    Linear,
    /// One hidden gelu layer with biases.
    Mlp,
    /// Always outputs the same vector; a chance-level reference.
    Constant,
}

impl ProbeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::Naive => "naive",
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "mlp",
            ProbeKind::Constant => "constant",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Metric {
    Cosine,
    L2,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
        }
    }

    /// `1 − cos` (zero vectors count as orthogonal) or squared distance.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::Cosine => {
                let na = dot(a, a).sqrt();
                let nb = dot(b, b).sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot(a, b) / (na * nb)
                }
            }
            Metric::L2 => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        }
    }
}

/// One sentence's pairs. Candidates for the nearest-neighbour lookup are
/// the target vectors at every position of the sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct SentencePairs {
    pub sentence: usize,
    pub split: Split,
    /// Source vectors, one row per pair.
    pub sources: Matrix,
    /// Target vectors at all positions, `d_s × d`.
    pub candidates: Matrix,
    /// Candidate index of the correct target for each pair.
    pub target_pos: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub dim: usize,
    pub layer: usize,
    pub target: ProbeTarget,
    pub offset: i64,
    pub sentences: Vec<SentencePairs>,
}

impl ProbeDataset {
    pub fn pair_count(&self) -> usize {
        self.sentences.iter().map(|s| s.target_pos.len()).sum()
    }

    pub fn split_pairs(&self, split: Split) -> usize {
        self.sentences.iter().filter(|s| s.split == split).map(|s| s.target_pos.len()).sum()
    }

    fn pairs(&self, split: Split) -> Vec<(usize, usize)> {
        self.sentences
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .flat_map(|(si, s)| (0..s.target_pos.len()).map(move |p| (si, p)))
            .collect()
    }

    fn target_vec(&self, si: usize, p: usize) -> &[f64] {
        let s = &self.sentences[si];
        s.candidates.row(s.target_pos[p])
    }
}

/// Deterministic sentence-level 70/15/15 assignment.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, 5));
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let mut out = vec![Split::Test; n];
    for (rank, &s) in order.iter().enumerate() {
        out[s] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Validation
        } else {
            Split::Test
        };
    }
    out
}

/// Pairs `(e_i^l, target_{i+k})` for every trace; positions without the
/// offset neighbour are dropped. Layer 0 means the input embeddings.
pub fn build_dataset(
    traces: &[ForwardTrace],
    source_layer: usize,
    target: ProbeTarget,
    offset: i64,
    split_seed: u64,
) -> Result<ProbeDataset> {
    let first = traces.first().ok_or_else(|| Error::Invalid("no traces given".into()))?;
    let dim = first.x.cols();
    let min_len = traces.iter().map(ForwardTrace::seq_len).min().unwrap_or(0);
    if offset.unsigned_abs() as usize >= min_len {
        return Err(Error::Invalid(format!("offset {offset} not below shortest sequence length {min_len}")));
    }
    if target == ProbeTarget::PreviousLayer && source_layer == 0 {
        return Err(Error::Invalid("layer 0 has no previous layer".into()));
    }
    let splits = assign_splits(traces.len(), split_seed);
    let mut sentences = Vec::with_capacity(traces.len());
    for (id, t) in traces.iter().enumerate() {
        if t.x.cols() != dim || t.hidden.len() < source_layer {
            return Err(Error::Shape(format!("trace {id} does not match the first trace")));
        }
        let src = t.layer(source_layer);
        let candidates = match target {
            ProbeTarget::Input => t.x.clone(),
            ProbeTarget::PreviousLayer => t.layer(source_layer - 1).clone(),
        };
        let ds = t.seq_len() as i64;
        let positions: Vec<usize> = (0..ds).filter(|i| (0..ds).contains(&(i + offset))).map(|i| i as usize).collect();
        let sources = Matrix::from_fn(positions.len(), dim, |r, c| src.get(positions[r], c));
        let target_pos = positions.iter().map(|&i| (i as i64 + offset) as usize).collect();
        sentences.push(SentencePairs { sentence: id, split: splits[id], sources, candidates, target_pos });
    }
    let ds = ProbeDataset { dim, layer: source_layer, target, offset, sentences };
    for split in [Split::Train, Split::Validation, Split::Test] {
        if ds.split_pairs(split) == 0 {
            return Err(Error::Invalid(format!("{split:?} split is empty ({} sentences)", traces.len())));
        }
    }
    Ok(ds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeHyper {
    pub learn_rate: f64,
    pub batch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    /// `None` means `min(1000, 4d)`.
    pub hidden_dim: Option<usize>,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        Self { learn_rate: 1e-4, batch: 256, patience: 20, max_epochs: 200, hidden_dim: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeModel {
    pub kind: ProbeKind,
    pub metric: Metric,
    pub layer: usize,
    /// Linear: `[W]`. Mlp: `[W1, b1 (1×h), W2, b2 (1×d)]`. Constant: `[c (1×d)]`.
    pub weights: Vec<Matrix>,
    pub epochs_run: usize,
    pub best_validation_loss: Option<f64>,
}

impl ProbeModel {
    pub fn naive(metric: Metric, layer: usize) -> Self {
        Self { kind: ProbeKind::Naive, metric, layer, weights: Vec::new(), epochs_run: 0, best_validation_loss: None }
    }

    pub fn constant(value: Vec<f64>, metric: Metric, layer: usize) -> Result<Self> {
        let d = value.len();
        Ok(Self {
            kind: ProbeKind::Constant,
            metric,
            layer,
            weights: vec![Matrix::new(1, d, value)?],
            epochs_run: 0,
            best_validation_loss: None,
        })
    }

    pub fn apply(&self, source: &[f64]) -> Vec<f64> {
        match self.kind {
            ProbeKind::Naive => source.to_vec(),
            ProbeKind::Constant => self.weights[0].row(0).to_vec(),
            ProbeKind::Linear => vec_mat(source, &self.weights[0]),
            ProbeKind::Mlp => {
                let mut h = vec_mat(source, &self.weights[0]);
                for (v, b) in h.iter_mut().zip(self.weights[1].row(0)) {
                    *v = gelu(*v + b);
                }
                let mut y = vec_mat(&h, &self.weights[2]);
                for (v, b) in y.iter_mut().zip(self.weights[3].row(0)) {
                    *v += b;
                }
                y
            }
        }
    }
}

fn vec_mat(v: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (k, &a) in v.iter().enumerate() {
        for (o, b) in out.iter_mut().zip(m.row(k)) {
            *o += a * b;
        }
    }
    out
}

/// Per-pair loss and its gradient with respect to the probe output.
fn loss_grad(metric: Metric, y: &[f64], t: &[f64]) -> (f64, Vec<f64>) {
    match metric {
        Metric::L2 => {
            let g: Vec<f64> = y.iter().zip(t).map(|(a, b)| 2.0 * (a - b)).collect();
            (metric.distance(y, t), g)
        }
        Metric::Cosine => {
            let ny = dot(y, y).sqrt();
            let nt = dot(t, t).sqrt();
            if ny == 0.0 || nt == 0.0 {
                return (1.0, vec![0.0; y.len()]);
            }
            let cos = dot(y, t) / (ny * nt);
            let g = y.iter().zip(t).map(|(a, b)| -(b / (ny * nt) - cos * a / (ny * ny))).collect();
            (1.0 - cos, g)
        }
    }
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamState {
    fn new(weights: &[Matrix]) -> Self {
        let z: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.as_slice().len()]).collect();
        Self { m: z.clone(), v: z, t: 0 }
    }

    fn step(&mut self, weights: &mut [Matrix], grads: &mut [Vec<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - 0.9f64.powi(self.t);
        let c2 = 1.0 - 0.999f64.powi(self.t);
        for (wi, w) in weights.iter_mut().enumerate() {
            let (m, v, g) = (&mut self.m[wi], &mut self.v[wi], &mut grads[wi]);
            for (i, p) in w.as_mut_slice().iter_mut().enumerate() {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + 1e-8);
                g[i] = 0.0;
            }
        }
    }
}

/// Accumulates the gradient of one pair into `grads`; returns its loss.
fn backprop_pair(probe: &ProbeModel, s: &[f64], t: &[f64], scale: f64, grads: &mut [Vec<f64>]) -> f64 {
    match probe.kind {
        ProbeKind::Linear => {
            let y = vec_mat(s, &probe.weights[0]);
            let (loss, gy) = loss_grad(probe.metric, &y, t);
            let d = gy.len();
            for (k, &a) in s.iter().enumerate() {
                for (o, g) in grads[0][k * d..(k + 1) * d].iter_mut().zip(&gy) {
                    *o += scale * a * g;
                }
            }
            loss
        }
        ProbeKind::Mlp => {
            let w = &probe.weights;
            let mut z = vec_mat(s, &w[0]);
            for (v, b) in z.iter_mut().zip(w[1].row(0)) {
                *v += b;
            }
            let h: Vec<f64> = z.iter().map(|&v| gelu(v)).collect();
            let mut y = vec_mat(&h, &w[2]);
            for (v, b) in y.iter_mut().zip(w[3].row(0)) {
                *v += b;
            }
            let (loss, gy) = loss_grad(probe.metric, &y, t);
            let d = gy.len();
            let hd = h.len();
            let mut gz = vec![0.0; hd];
            for (k, &hv) in h.iter().enumerate() {
                let row = w[2].row(k);
                gz[k] = dot(row, &gy) * gelu_derivative(z[k]);
                for (o, g) in grads[2][k * d..(k + 1) * d].iter_mut().zip(&gy) {
                    *o += scale * hv * g;
                }
            }
            for (o, g) in grads[3].iter_mut().zip(&gy) {
                *o += scale * g;
            }
            for (k, &a) in s.iter().enumerate() {
                for (o, g) in grads[0][k * hd..(k + 1) * hd].iter_mut().zip(&gz) {
                    *o += scale * a * g;
                }
            }
            for (o, g) in grads[1].iter_mut().zip(&gz) {
                *o += scale * g;
            }
            loss
        }
        ProbeKind::Naive | ProbeKind::Constant => loss_grad(probe.metric, &probe.apply(s), t).0,
    }
}

/// Mean per-pair loss on one split.
pub fn split_loss(probe: &ProbeModel, ds: &ProbeDataset, split: Split) -> f64 {
    let pairs = ds.pairs(split);
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|&(si, p)| {
            let y = probe.apply(ds.sentences[si].sources.row(p));
            loss_grad(probe.metric, &y, ds.target_vec(si, p)).0
        })
        .sum();
    total / pairs.len() as f64
}

/// Adam on the per-pair loss with early stopping on validation loss; the
/// weights of the best validation epoch are returned.
pub fn train_probe(ds: &ProbeDataset, kind: ProbeKind, metric: Metric, hyper: &ProbeHyper) -> Result<ProbeModel> {
    if matches!(kind, ProbeKind::Naive | ProbeKind::Constant) {
        return Err(Error::Invalid(format!("{} probes are not trained", kind.name())));
    }
    if hyper.batch == 0 || !(hyper.learn_rate > 0.0) {
        return Err(Error::Invalid(format!("bad probe hyperparameters {hyper:?}")));
    }
    let d = ds.dim;
    let mut r = rng::stream(hyper.seed, 6);
    let weights = match kind {
        ProbeKind::Linear => vec![rng::gaussian_matrix(&mut r, d, d, 1.0 / (d as f64).sqrt())],
        _ => {
            let h = hyper.hidden_dim.unwrap_or((4 * d).min(1000)).max(1);
            vec![
                rng::gaussian_matrix(&mut r, d, h, 1.0 / (d as f64).sqrt()),
                Matrix::zeros(1, h),
                rng::gaussian_matrix(&mut r, h, d, 1.0 / (h as f64).sqrt()),
                Matrix::zeros(1, d),
            ]
        }
    };
    let mut probe = ProbeModel { kind, metric, layer: ds.layer, weights, epochs_run: 0, best_validation_loss: None };
    let mut best = (split_loss(&probe, ds, Split::Validation), probe.weights.clone());
    let mut adam = AdamState::new(&probe.weights);
    let mut grads: Vec<Vec<f64>> = probe.weights.iter().map(|w| vec![0.0; w.as_slice().len()]).collect();
    let mut train = ds.pairs(Split::Train);
    let mut stale = 0;
    for epoch in 0..hyper.max_epochs {
        train.shuffle(&mut r);
        for batch in train.chunks(hyper.batch) {
            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            for &(si, p) in batch {
                loss += backprop_pair(&probe, ds.sentences[si].sources.row(p), ds.target_vec(si, p), scale, &mut grads);
            }
            if !loss.is_finite() {
                return Err(Error::Diverged { step: epoch });
            }
            adam.step(&mut probe.weights, &mut grads, hyper.learn_rate);
        }
        probe.epochs_run = epoch + 1;
        let val = split_loss(&probe, ds, Split::Validation);
        if !val.is_finite() {
            return Err(Error::Diverged { step: epoch });
        }
        if val < best.0 {
            best = (val, probe.weights.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= hyper.patience {
                break;
            }
        }
    }
    probe.weights = best.1;
    probe.best_validation_loss = Some(best.0);
    Ok(probe)
}

/// Index of the nearest candidate row; ties go to the lowest index.
pub fn nearest(metric: Metric, query: &[f64], candidates: &Matrix) -> usize {
    let mut best = (0, f64::INFINITY);
    for i in 0..candidates.rows() {
        let dist = metric.distance(query, candidates.row(i));
        if dist < best.1 {
            best = (i, dist);
        }
    }
    best.0
}

/// Fraction of pairs whose mapped source has the correct target as its
/// nearest neighbour within the sentence.
pub fn identifiability_rate(probe: &ProbeModel, ds: &ProbeDataset, split: Split) -> Result<f64> {
    rate_with(ds, split, probe.metric, |s| probe.apply(s))
}

/// As [`identifiability_rate`] with an arbitrary map applied to the sources.
pub fn rate_with(ds: &ProbeDataset, split: Split, metric: Metric, map: impl Fn(&[f64]) -> Vec<f64>) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for s in ds.sentences.iter().filter(|s| s.split == split) {
        for (p, &want) in s.target_pos.iter().enumerate() {
            let y = map(s.sources.row(p));
            if y.len() != ds.dim {
                return Err(Error::Shape(format!("probe output has {} dims, dataset {}", y.len(), ds.dim)));
            }
            hit += usize::from(nearest(metric, &y, &s.candidates) == want);
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { hit as f64 / total as f64 })
}

/// Test-split rate of one probe on datasets of several layers.
pub fn cross_layer_eval(probe: &ProbeModel, datasets: &[ProbeDataset], split: Split) -> Result<Vec<f64>> {
    datasets.iter().map(|ds| identifiability_rate(probe, ds, split)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub layer: usize,
    pub kind: ProbeKind,
    pub metric: Metric,
    pub rate_train: f64,
    pub rate_test: f64,
}

/// Train and test rates for every layer, kind and metric, averaged over
/// `folds` random sentence splits.
pub fn rate_profile(
    traces: &[ForwardTrace],
    layers: &[usize],
    kinds: &[ProbeKind],
    metrics: &[Metric],
    folds: usize,
    hyper: &ProbeHyper,
) -> Result<Vec<RateRow>> {
    let folds = folds.max(1);
    let mut rows = Vec::new();
    for &layer in layers {
        let datasets: Vec<ProbeDataset> = (0..folds)
            .map(|f| build_dataset(traces, layer, ProbeTarget::Input, 0, hyper.seed.wrapping_add(f as u64)))
            .collect::<Result<_>>()?;
        for &kind in kinds {
            for &metric in metrics {
                let (mut tr, mut te) = (0.0, 0.0);
                for (f, ds) in datasets.iter().enumerate() {
                    let probe = match kind {
                        ProbeKind::Naive => ProbeModel::naive(metric, layer),
                        ProbeKind::Constant => ProbeModel::constant(vec![1.0; ds.dim], metric, layer)?,
                        _ => train_probe(ds, kind, metric, &ProbeHyper { seed: hyper.seed.wrapping_add(f as u64), ..*hyper })?,
                    };
                    tr += identifiability_rate(&probe, ds, Split::Train)?;
                    te += identifiability_rate(&probe, ds, Split::Test)?;
                }
                rows.push(RateRow {
                    layer,
                    kind,
                    metric,
                    rate_train: tr / folds as f64,
                    rate_test: te / folds as f64,
                });
            }
        }
    }
    Ok(rows)
}
