// SPDX-License-Identifier: MIT OR Apache-2.0

//! A small post-norm BERT-style encoder with hand-written backward passes.
//!
//! The forward pass records per-layer hidden states, per-head attention and
//! [`HeadSnapshot`]s. The backward pass is exact reverse accumulation, used
//! both for Jacobians of hidden states with respect to the summed input
//! embeddings and for masked-token training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head_geometry::HeadSnapshot;
use crate::linalg::{softmax_in_place, Matrix};
use crate::rng;

/// Layer-norm variance epsilon, as in BERT.
pub const LN_EPS: f64 = 1e-12;

/// Standard deviation of the Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.dim == 0 || self.ff_dim == 0 || self.vocab == 0 || self.max_len == 0 {
            return Err(Error::Invalid(format!("all model dimensions must be >= 1: {self:?}")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Invalid(format!(
                "heads ({}) must divide the model dimension ({})",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { layers: 2, heads: 2, dim: 16, ff_dim: 64, vocab: 67, max_len: 32, seed: 0 }
    }
}

/// Parameters of one encoder block. Attention projections are stored fused:
/// head `h` owns columns `h·d_v..(h+1)·d_v` of `wq`, `wk`, `wv` and rows
/// `h·d_v..(h+1)·d_v` of `wo` (its `H` slice).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
}

impl LayerParams {
    fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let zv = |v: &[f64]| vec![0.0; v.len()];
        Self {
            wq: z(&self.wq),
            wk: z(&self.wk),
            wv: z(&self.wv),
            wo: z(&self.wo),
            ln1_gain: zv(&self.ln1_gain),
            ln1_bias: zv(&self.ln1_bias),
            w1: z(&self.w1),
            b1: zv(&self.b1),
            w2: z(&self.w2),
            b2: zv(&self.b2),
            ln2_gain: zv(&self.ln2_gain),
            ln2_bias: zv(&self.ln2_bias),
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.wq.as_mut_slice(),
            self.wk.as_mut_slice(),
            self.wv.as_mut_slice(),
            self.wo.as_mut_slice(),
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub token_emb: Matrix,
    pub pos_emb: Matrix,
    pub seg_emb: Matrix,
    pub layers: Vec<LayerParams>,
    /// Output bias of the tied masked-token decoder.
    pub mlm_bias: Vec<f64>,
}

impl Model {
    /// Gaussian `N(0, 0.02²)` weights, zero biases and unit layer-norm gains.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut r = rng::stream(config.seed, 0);
        let mut g = |rows, cols| rng::gaussian_matrix(&mut r, rows, cols, INIT_STD);
        let token_emb = g(config.vocab, d);
        let pos_emb = g(config.max_len, d);
        let seg_emb = g(2, d);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: g(d, d),
                wk: g(d, d),
                wv: g(d, d),
                wo: g(d, d),
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                w1: g(d, config.ff_dim),
                b1: vec![0.0; config.ff_dim],
                w2: g(config.ff_dim, d),
                b2: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
            })
            .collect();
        Ok(Self { config, token_emb, pos_emb, seg_emb, layers, mlm_bias: vec![0.0; config.vocab] })
    }

    pub(crate) fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            config: self.config,
            token_emb: z(&self.token_emb),
            pos_emb: z(&self.pos_emb),
            seg_emb: z(&self.seg_emb),
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            mlm_bias: vec![0.0; self.mlm_bias.len()],
        }
    }

    /// Every parameter buffer in a fixed order.
    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.token_emb.as_mut_slice(),
            self.pos_emb.as_mut_slice(),
            self.seg_emb.as_mut_slice(),
        ];
        for l in &mut self.layers {
            out.extend(l.slices_mut());
        }
        out.push(&mut self.mlm_bias);
        out
    }

    pub fn head_dim(&self) -> usize {
        self.config.head_dim()
    }

    /// Query projection of one head, `d × d_v`.
    pub fn wq_head(&self, layer: usize, head: usize) -> Matrix {
        let dv = self.head_dim();
        self.layers[layer].wq.col_block(head * dv, dv)
    }

    pub fn wk_head(&self, layer: usize, head: usize) -> Matrix {
        let dv = self.head_dim();
        self.layers[layer].wk.col_block(head * dv, dv)
    }

    pub fn wv_head(&self, layer: usize, head: usize) -> Matrix {
        let dv = self.head_dim();
        self.layers[layer].wv.col_block(head * dv, dv)
    }

    /// Output-projection slice `H` of one head, `d_v × d`.
    pub fn h_head(&self, layer: usize, head: usize) -> Matrix {
        let dv = self.head_dim();
        self.layers[layer].wo.row_block(head * dv, dv)
    }

    /// `X[i] = token_emb[t_i] + pos_emb[i] + seg_emb[s_i]`.
    pub fn embed(&self, tokens: &[usize], segments: &[usize]) -> Result<Matrix> {
        if tokens.len() != segments.len() {
            return Err(Error::Invalid(format!(
                "{} tokens but {} segment ids",
                tokens.len(),
                segments.len()
            )));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::Invalid(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        let d = self.config.dim;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, (&t, &s)) in tokens.iter().zip(segments).enumerate() {
            if t >= self.config.vocab {
                return Err(Error::Invalid(format!("token id {t} out of range (vocab {})", self.config.vocab)));
            }
            if s >= 2 {
                return Err(Error::Invalid(format!("segment id {s} out of range")));
            }
            let (tr, pr, sr) = (self.token_emb.row(t), self.pos_emb.row(i), self.seg_emb.row(s));
            for (k, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = tr[k] + pr[k] + sr[k];
            }
        }
        Ok(x)
    }
}

/// Replaces one head's attention by a fixed matrix, bypassing softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOverride {
    /// 1-based layer.
    pub layer: usize,
    pub head: usize,
    pub attention: Matrix,
}

/// Diagnostic switches for the forward and backward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    /// Every head attends only to its own position (`A = I`).
    pub identity_attention: bool,
    /// Layer norms and gelu become the identity.
    pub linear: bool,
    /// The feed-forward sublayer outputs zero.
    pub zero_ffn: bool,
    pub attention_override: Option<AttentionOverride>,
}

/// Recorded activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Summed input embeddings, `d_s × d`.
    pub x: Matrix,
    /// Output of block `l` at index `l − 1`.
    pub hidden: Vec<Matrix>,
    /// `attention[l − 1][h]`.
    pub attention: Vec<Vec<Matrix>>,
    pub snapshots: Vec<HeadSnapshot>,
}

impl ForwardTrace {
    /// Embeddings at layer `l`, where layer 0 is the input `X`.
    pub fn layer(&self, l: usize) -> &Matrix {
        if l == 0 {
            &self.x
        } else {
            &self.hidden[l - 1]
        }
    }

    pub fn seq_len(&self) -> usize {
        self.x.rows()
    }
}

struct NormCache {
    xhat: Matrix,
    rstd: Vec<f64>,
}

/// Activations of one block kept for the backward pass.
pub(crate) struct LayerCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    attention: Vec<Matrix>,
    /// Whether each head's attention came from softmax (and so depends on the input).
    softmax: Vec<bool>,
    concat: Matrix,
    ln1: NormCache,
    n1: Matrix,
    z1: Matrix,
    g1: Matrix,
    ln2: NormCache,
    output: Matrix,
}

fn add_bias(m: &mut Matrix, bias: &[f64]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], linear: bool) -> (Matrix, NormCache) {
    let (rows, cols) = x.shape();
    if linear {
        return (x.clone(), NormCache { xhat: x.clone(), rstd: vec![1.0; rows] });
    }
    let mut xhat = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        for c in 0..cols {
            let h = (row[c] - mean) * rs;
            xhat.set(r, c, h);
            out.set(r, c, gain[c] * h + bias[c]);
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Backward of layer norm; accumulates gain/bias gradients when given.
fn layer_norm_backward(
    dy: &Matrix,
    cache: &NormCache,
    gain: &[f64],
    linear: bool,
    grads: Option<(&mut [f64], &mut [f64])>,
) -> Matrix {
    if linear {
        return dy.clone();
    }
    let (rows, cols) = dy.shape();
    if let Some((dg, db)) = grads {
        for r in 0..rows {
            for c in 0..cols {
                dg[c] += dy.get(r, c) * cache.xhat.get(r, c);
                db[c] += dy.get(r, c);
            }
        }
    }
    let mut dx = Matrix::zeros(rows, cols);
    let n = cols as f64;
    for r in 0..rows {
        let xh = cache.xhat.row(r);
        let dyr = dy.row(r);
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for c in 0..cols {
            let dxh = dyr[c] * gain[c];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[c];
        }
        mean_dxh /= n;
        mean_dxh_xh /= n;
        let rs = cache.rstd[r];
        for (c, out) in dx.row_mut(r).iter_mut().enumerate() {
            *out = rs * (dyr[c] * gain[c] - mean_dxh - xh[c] * mean_dxh_xh);
        }
    }
    dx
}

/// Exact gelu `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

fn layer_forward(model: &Model, layer: usize, input: &Matrix, diag: &Diagnostics) -> LayerCache {
    let p = &model.layers[layer];
    let ds = input.rows();
    let dv = model.head_dim();
    let q = input.mul_unchecked(&p.wq);
    let k = input.mul_unchecked(&p.wk);
    let v = input.mul_unchecked(&p.wv);
    let scale = 1.0 / (dv as f64).sqrt();
    let mut attention = Vec::with_capacity(model.config.heads);
    let mut softmax = Vec::with_capacity(model.config.heads);
    let mut concat = Matrix::zeros(ds, model.config.dim);
    for h in 0..model.config.heads {
        let off = h * dv;
        let a = match &diag.attention_override {
            Some(o) if o.layer == layer + 1 && o.head == h => {
                softmax.push(false);
                o.attention.clone()
            }
            _ if diag.identity_attention => {
                softmax.push(false);
                Matrix::identity(ds)
            }
            _ => {
                softmax.push(true);
                let mut s = Matrix::zeros(ds, ds);
                for i in 0..ds {
                    let qi = &q.row(i)[off..off + dv];
                    for j in 0..ds {
                        let kj = &k.row(j)[off..off + dv];
                        s.set(i, j, crate::linalg::dot(qi, kj) * scale);
                    }
                    softmax_in_place(s.row_mut(i));
                }
                s
            }
        };
        for i in 0..ds {
            let out = &mut concat.row_mut(i)[off..off + dv];
            for j in 0..ds {
                let w = a.get(i, j);
                if w == 0.0 {
                    continue;
                }
                for (o, x) in out.iter_mut().zip(&v.row(j)[off..off + dv]) {
                    *o += w * x;
                }
            }
        }
        attention.push(a);
    }
    let attn_out = concat.mul_unchecked(&p.wo);
    let r1 = input.zip_map(&attn_out, |a, b| a + b);
    let (n1, ln1) = layer_norm(&r1, &p.ln1_gain, &p.ln1_bias, diag.linear);
    let (z1, g1, r2) = if diag.zero_ffn {
        let z = Matrix::zeros(ds, model.config.ff_dim);
        (z.clone(), z, n1.clone())
    } else {
        let mut z1 = n1.mul_unchecked(&p.w1);
        add_bias(&mut z1, &p.b1);
        let g1 = if diag.linear { z1.clone() } else { z1.map(gelu) };
        let mut f = g1.mul_unchecked(&p.w2);
        add_bias(&mut f, &p.b2);
        let r2 = n1.zip_map(&f, |a, b| a + b);
        (z1, g1, r2)
    };
    let (output, ln2) = layer_norm(&r2, &p.ln2_gain, &p.ln2_bias, diag.linear);
    LayerCache { input: input.clone(), q, k, v, attention, softmax, concat, ln1, n1, z1, g1, ln2, output }
}

/// Reverse pass through one block: maps `∂/∂output` to `∂/∂input`,
/// accumulating parameter gradients into `grads` when given.
fn layer_backward(
    model: &Model,
    layer: usize,
    cache: &LayerCache,
    d_out: &Matrix,
    diag: &Diagnostics,
    mut grads: Option<&mut LayerParams>,
) -> Matrix {
    let p = &model.layers[layer];
    let ds = d_out.rows();
    let dv = model.head_dim();

    let d_r2 = layer_norm_backward(
        d_out,
        &cache.ln2,
        &p.ln2_gain,
        diag.linear,
        grads.as_deref_mut().map(|g| (g.ln2_gain.as_mut_slice(), g.ln2_bias.as_mut_slice())),
    );
    let mut d_n1 = d_r2.clone();
    if !diag.zero_ffn {
        let d_g1 = d_r2.mul_transposed(&p.w2);
        let d_z1 = if diag.linear {
            d_g1
        } else {
            d_g1.zip_map(&cache.z1, |g, z| g * gelu_derivative(z))
        };
        if let Some(g) = grads.as_deref_mut() {
            accumulate(&mut g.w2, &cache.g1.transposed_mul(&d_r2));
            accumulate_col_sums(&mut g.b2, &d_r2);
            accumulate(&mut g.w1, &cache.n1.transposed_mul(&d_z1));
            accumulate_col_sums(&mut g.b1, &d_z1);
        }
        let back = d_z1.mul_transposed(&p.w1);
        d_n1 = d_n1.zip_map(&back, |a, b| a + b);
    }
    let d_r1 = layer_norm_backward(
        &d_n1,
        &cache.ln1,
        &p.ln1_gain,
        diag.linear,
        grads.as_deref_mut().map(|g| (g.ln1_gain.as_mut_slice(), g.ln1_bias.as_mut_slice())),
    );
    let mut d_in = d_r1.clone();
    let d_concat = d_r1.mul_transposed(&p.wo);
    if let Some(g) = grads.as_deref_mut() {
        accumulate(&mut g.wo, &cache.concat.transposed_mul(&d_r1));
    }

    let scale = 1.0 / (dv as f64).sqrt();
    let d = model.config.dim;
    let mut dq = Matrix::zeros(ds, d);
    let mut dk = Matrix::zeros(ds, d);
    let mut dvm = Matrix::zeros(ds, d);
    for h in 0..model.config.heads {
        let off = h * dv;
        let a = &cache.attention[h];
        // dV_h = Aᵀ·dO_h
        for j in 0..ds {
            for i in 0..ds {
                let w = a.get(i, j);
                if w == 0.0 {
                    continue;
                }
                let src = &d_concat.row(i)[off..off + dv];
                let dst = &mut dvm.row_mut(j)[off..off + dv];
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += w * x;
                }
            }
        }
        if !cache.softmax[h] {
            continue;
        }
        // dA = dO_h·V_hᵀ, then through softmax row by row
        let mut ds_row = vec![0.0; ds];
        for i in 0..ds {
            let doi = &d_concat.row(i)[off..off + dv];
            let ai = a.row(i);
            let mut inner = 0.0;
            for (j, slot) in ds_row.iter_mut().enumerate() {
                let da = crate::linalg::dot(doi, &cache.v.row(j)[off..off + dv]);
                *slot = da;
                inner += da * ai[j];
            }
            for (j, slot) in ds_row.iter_mut().enumerate() {
                *slot = ai[j] * (*slot - inner) * scale;
            }
            let qi = &cache.q.row(i)[off..off + dv];
            for (j, &g) in ds_row.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let kj = &cache.k.row(j)[off..off + dv];
                for (o, x) in dq.row_mut(i)[off..off + dv].iter_mut().zip(kj) {
                    *o += g * x;
                }
                for (o, x) in dk.row_mut(j)[off..off + dv].iter_mut().zip(qi) {
                    *o += g * x;
                }
            }
        }
    }
    if let Some(g) = grads.as_deref_mut() {
        accumulate(&mut g.wq, &cache.input.transposed_mul(&dq));
        accumulate(&mut g.wk, &cache.input.transposed_mul(&dk));
        accumulate(&mut g.wv, &cache.input.transposed_mul(&dvm));
    }
    for (dm, w) in [(&dq, &p.wq), (&dk, &p.wk), (&dvm, &p.wv)] {
        let back = dm.mul_transposed(w);
        d_in = d_in.zip_map(&back, |a, b| a + b);
    }
    d_in
}

fn accumulate(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += s;
    }
}

fn accumulate_col_sums(dst: &mut [f64], src: &Matrix) {
    for r in 0..src.rows() {
        for (d, s) in dst.iter_mut().zip(src.row(r)) {
            *d += s;
        }
    }
}

/// Forward through the first `depth` blocks starting from embeddings `x`.
pub(crate) fn run_layers(model: &Model, x: &Matrix, depth: usize, diag: &Diagnostics) -> Vec<LayerCache> {
    let mut caches: Vec<LayerCache> = Vec::with_capacity(depth);
    for l in 0..depth {
        let input = caches.last().map_or(x, |c| &c.output);
        let cache = layer_forward(model, l, input, diag);
        caches.push(cache);
    }
    caches
}

/// Reverse pass from `∂/∂e^depth` down to `∂/∂X`.
pub(crate) fn backward_to_input(
    model: &Model,
    caches: &[LayerCache],
    d_top: Matrix,
    diag: &Diagnostics,
    mut grads: Option<&mut Model>,
) -> Matrix {
    let mut d = d_top;
    for l in (0..caches.len()).rev() {
        let g = grads.as_deref_mut().map(|m| &mut m.layers[l]);
        d = layer_backward(model, l, &caches[l], &d, diag, g);
    }
    d
}

fn trace_from_caches(model: &Model, x: Matrix, caches: Vec<LayerCache>) -> ForwardTrace {
    let mut snapshots = Vec::new();
    let mut hidden = Vec::with_capacity(caches.len());
    let mut attention = Vec::with_capacity(caches.len());
    for (l, c) in caches.into_iter().enumerate() {
        for (h, a) in c.attention.iter().enumerate() {
            snapshots.push(HeadSnapshot {
                layer: l + 1,
                head: h,
                e: c.input.clone(),
                wv: model.wv_head(l, h),
                h: model.h_head(l, h),
                a: a.clone(),
            });
        }
        hidden.push(c.output);
        attention.push(c.attention);
    }
    ForwardTrace { x, hidden, attention, snapshots }
}

pub fn forward(model: &Model, tokens: &[usize], segments: &[usize]) -> Result<ForwardTrace> {
    forward_with(model, tokens, segments, &Diagnostics::default())
}

pub fn forward_with(model: &Model, tokens: &[usize], segments: &[usize], diag: &Diagnostics) -> Result<ForwardTrace> {
    let x = model.embed(tokens, segments)?;
    forward_embeddings(model, &x, diag)
}

/// Forward pass from precomputed input embeddings.
pub fn forward_embeddings(model: &Model, x: &Matrix, diag: &Diagnostics) -> Result<ForwardTrace> {
    if x.cols() != model.config.dim || x.rows() > model.config.max_len {
        return Err(Error::Shape(format!(
            "input embeddings {}x{} do not fit model (d = {}, max_len = {})",
            x.rows(),
            x.cols(),
            model.config.dim,
            model.config.max_len
        )));
    }
    if let Some(o) = &diag.attention_override {
        if o.layer == 0 || o.layer > model.config.layers || o.head >= model.config.heads {
            return Err(Error::Invalid(format!("override target layer {} head {} out of range", o.layer, o.head)));
        }
        if o.attention.shape() != (x.rows(), x.rows()) {
            return Err(Error::Shape("override attention must be d_s x d_s".into()));
        }
    }
    let caches = run_layers(model, x, model.config.layers, diag);
    Ok(trace_from_caches(model, x.clone(), caches))
}

fn check_target(model: &Model, seq_len: usize, layer: usize, position: usize) -> Result<()> {
    if layer > model.config.layers {
        return Err(Error::Invalid(format!("layer {layer} out of range (model has {})", model.config.layers)));
    }
    if position >= seq_len {
        return Err(Error::Invalid(format!("position {position} out of range (length {seq_len})")));
    }
    Ok(())
}

/// Jacobian of `e_j^l` with respect to all input embeddings:
/// `J[m, i·d + k] = ∂e_j^l[m] / ∂x_i[k]`. Layer 0 is the input itself.
pub fn jacobian(model: &Model, tokens: &[usize], segments: &[usize], layer: usize, position: usize) -> Result<Matrix> {
    let x = model.embed(tokens, segments)?;
    jacobian_embeddings(model, &x, layer, position, &Diagnostics::default())
}

pub fn jacobian_embeddings(model: &Model, x: &Matrix, layer: usize, position: usize, diag: &Diagnostics) -> Result<Matrix> {
    let ds = x.rows();
    check_target(model, ds, layer, position)?;
    let caches = run_layers(model, x, layer, diag);
    Ok(jacobian_from_caches(model, &caches, ds, position, diag))
}

pub(crate) fn jacobian_from_caches(
    model: &Model,
    caches: &[LayerCache],
    ds: usize,
    position: usize,
    diag: &Diagnostics,
) -> Matrix {
    let d = model.config.dim;
    let mut jac = Matrix::zeros(d, ds * d);
    for m in 0..d {
        let mut seed = Matrix::zeros(ds, d);
        seed.set(position, m, 1.0);
        let dx = backward_to_input(model, caches, seed, diag, None);
        jac.row_mut(m).copy_from_slice(dx.as_slice());
    }
    jac
}

/// Jacobians of every layer with respect to the whole input, `∂E^l/∂X` for
/// `l = 0..=depth`, as `(d_s·d) × (d_s·d)` matrices with row `j·d + m` and
/// column `i·d + k`. Built by chaining single-block Jacobians, so each block
/// is reverse-differentiated only `d_s·d` times.
pub fn layer_jacobians(model: &Model, x: &Matrix, depth: usize, diag: &Diagnostics) -> Result<Vec<Matrix>> {
    check_target(model, x.rows().max(1), depth, 0)?;
    let (ds, d) = x.shape();
    let n = ds * d;
    let caches = run_layers(model, x, depth, diag);
    let mut out = vec![Matrix::identity(n)];
    let mut seed = Matrix::zeros(ds, d);
    for (l, cache) in caches.iter().enumerate() {
        let mut local = Matrix::zeros(n, n);
        for r in 0..n {
            seed.as_mut_slice()[r] = 1.0;
            let row = layer_backward(model, l, cache, &seed, diag, None);
            seed.as_mut_slice()[r] = 0.0;
            local.row_mut(r).copy_from_slice(row.as_slice());
        }
        let full = if l == 0 { local } else { local.mul_unchecked(&out[l]) };
        out.push(full);
    }
    Ok(out)
}

/// Central-difference Jacobian with the same layout as [`jacobian`].
pub fn jacobian_fd(
    model: &Model,
    tokens: &[usize],
    segments: &[usize],
    layer: usize,
    position: usize,
    step: f64,
) -> Result<Matrix> {
    let x = model.embed(tokens, segments)?;
    jacobian_fd_embeddings(model, &x, layer, position, step, &Diagnostics::default())
}

pub fn jacobian_fd_embeddings(
    model: &Model,
    x: &Matrix,
    layer: usize,
    position: usize,
    step: f64,
    diag: &Diagnostics,
) -> Result<Matrix> {
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let ds = x.rows();
    check_target(model, ds, layer, position)?;
    let d = model.config.dim;
    let eval = |xp: &Matrix| -> Vec<f64> {
        let caches = run_layers(model, xp, layer, diag);
        caches.last().map_or(xp, |c| &c.output).row(position).to_vec()
    };
    let mut jac = Matrix::zeros(d, ds * d);
    let mut xp = x.clone();
    for col in 0..ds * d {
        let orig = xp.as_slice()[col];
        xp.as_mut_slice()[col] = orig + step;
        let plus = eval(&xp);
        xp.as_mut_slice()[col] = orig - step;
        let minus = eval(&xp);
        xp.as_mut_slice()[col] = orig;
        for m in 0..d {
            jac.set(m, col, (plus[m] - minus[m]) / (2.0 * step));
        }
    }
    Ok(jac)
}

/// Gradient of the masked-token loss: accumulates into `grads` and returns
/// the summed cross-entropy over the masked positions.
pub(crate) fn mlm_loss_and_grad(
    model: &Model,
    tokens: &[usize],
    segments: &[usize],
    targets: &[(usize, usize)],
    weight: f64,
    grads: &mut Model,
) -> Result<f64> {
    let diag = Diagnostics::default();
    let x = model.embed(tokens, segments)?;
    let caches = run_layers(model, &x, model.config.layers, &diag);
    let top = caches.last().map_or(&x, |c| &c.output);
    let (ds, d) = top.shape();
    let vocab = model.config.vocab;
    let mut d_top = Matrix::zeros(ds, d);
    let mut loss = 0.0;
    let mut logits = vec![0.0; vocab];
    for &(pos, target) in targets {
        let h = top.row(pos);
        for (v, slot) in logits.iter_mut().enumerate() {
            *slot = crate::linalg::dot(h, model.token_emb.row(v)) + model.mlm_bias[v];
        }
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - logits[target];
        // dlogits = softmax − onehot
        for (v, &l) in logits.iter().enumerate() {
            let p = (l - lse).exp() - if v == target { 1.0 } else { 0.0 };
            let g = p * weight;
            if g == 0.0 {
                continue;
            }
            grads.mlm_bias[v] += g;
            let emb = model.token_emb.row(v);
            for (o, e) in d_top.row_mut(pos).iter_mut().zip(emb) {
                *o += g * e;
            }
            for (o, hv) in grads.token_emb.row_mut(v).iter_mut().zip(h) {
                *o += g * hv;
            }
        }
    }
    if weight == 0.0 {
        return Ok(loss);
    }
    let dx = backward_to_input(model, &caches, d_top, &diag, Some(grads));
    for (i, (&t, &s)) in tokens.iter().zip(segments).enumerate() {
        let row = dx.row(i);
        for (o, v) in grads.token_emb.row_mut(t).iter_mut().zip(row) {
            *o += v;
        }
        for (o, v) in grads.pos_emb.row_mut(i).iter_mut().zip(row) {
            *o += v;
        }
        for (o, v) in grads.seg_emb.row_mut(s).iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(loss)
}
