// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tensor bundles, CSV tables and key=value configuration files.
//!
//! Bundle layout (all integers little-endian):
//!
//! ```text
//! "ATNT" | u16 version | u32 manifest length | manifest (UTF-8 JSON) | payload
//! ```
//!
//! Each manifest entry gives a tensor's name, rank, dims and the byte offset
//! of its row-major `f64` data from the start of the payload.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head_geometry::HeadSnapshot;
use crate::linalg::Matrix;
use crate::model::{ForwardTrace, LayerParams, Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"ATNT";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub format_version: u16,
    pub creator: String,
    pub seed: Option<u64>,
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}

impl Default for BundleMeta {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            creator: concat!("attn-ident ", env!("CARGO_PKG_VERSION")).to_string(),
            seed: None,
            model: None,
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorBundle {
    pub meta: BundleMeta,
    tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rank: usize,
    dims: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata: BundleMeta,
    tensors: Vec<ManifestEntry>,
}

impl TensorBundle {
    pub fn new(meta: BundleMeta) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if self.get(name).is_some() {
            return Err(Error::Invalid(format!("duplicate tensor name {name:?}")));
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!("tensor {name:?}: dims {dims:?} but {} values", data.len())));
        }
        self.tensors.push(NamedTensor { name: name.to_string(), dims, data });
        Ok(())
    }

    pub fn insert_matrix(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.insert(name, vec![m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn insert_vector(&mut self, name: &str, v: &[f64]) -> Result<()> {
        self.insert(name, vec![v.len()], v.to_vec())
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix> {
        let t = self.get(name).ok_or_else(|| Error::Invalid(format!("bundle has no tensor {name:?}")))?;
        match t.dims[..] {
            [r, c] => Matrix::new(r, c, t.data.clone()),
            _ => Err(Error::Shape(format!("tensor {name:?} has rank {}, expected 2", t.dims.len()))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let t = self.get(name).ok_or_else(|| Error::Invalid(format!("bundle has no tensor {name:?}")))?;
        if t.dims.len() != 1 {
            return Err(Error::Shape(format!("tensor {name:?} has rank {}, expected 1", t.dims.len())));
        }
        Ok(t.data.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|t| {
                let e = ManifestEntry { name: t.name.clone(), rank: t.dims.len(), dims: t.dims.clone(), offset };
                offset += 8 * t.data.len() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest { metadata: self.meta.clone(), tensors: entries })
            .map_err(|e| Error::Invalid(format!("manifest encoding failed: {e}")))?;
        let manifest_len = u32::try_from(manifest.len()).map_err(|_| Error::Invalid("manifest too large".into()))?;
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&manifest_len.to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let parse = |offset: usize, msg: String| Error::Parse { offset: offset as u64, msg };
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(parse(0, "bad magic, expected \"ATNT\"".into()));
        }
        if bytes.len() < 6 {
            return Err(parse(4, "truncated before format version".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(parse(4, format!("unsupported format version {version}")));
        }
        if bytes.len() < HEADER_LEN {
            return Err(parse(6, "truncated before manifest length".into()));
        }
        let manifest_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let payload_start = HEADER_LEN + manifest_len;
        if bytes.len() < payload_start {
            return Err(parse(bytes.len(), format!("truncated manifest, declared {manifest_len} bytes")));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
            .map_err(|e| parse(HEADER_LEN, format!("invalid manifest: {e}")))?;
        let mut bundle = TensorBundle::new(manifest.metadata);
        let mut names = BTreeSet::new();
        let mut expected_offset = 0u64;
        for e in manifest.tensors {
            if !names.insert(e.name.clone()) {
                return Err(parse(HEADER_LEN, format!("duplicate tensor name {:?}", e.name)));
            }
            if e.rank != e.dims.len() {
                return Err(parse(HEADER_LEN, format!("tensor {:?}: rank {} but {} dims", e.name, e.rank, e.dims.len())));
            }
            if e.offset != expected_offset {
                return Err(parse(
                    payload_start.saturating_add(e.offset as usize),
                    format!("tensor {:?} offset {} does not follow the previous tensor", e.name, e.offset),
                ));
            }
            let count = e.dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let start = payload_start + expected_offset as usize;
            let end = count.and_then(|c| c.checked_mul(8)).and_then(|n| start.checked_add(n));
            let (count, end) = match (count, end) {
                (Some(c), Some(end)) if end <= bytes.len() => (c, end),
                _ => return Err(parse(bytes.len(), format!("truncated payload for tensor {:?}", e.name))),
            };
            let data = bytes[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            expected_offset += 8 * count as u64;
            bundle.tensors.push(NamedTensor { name: e.name, dims: e.dims, data });
        }
        let end = payload_start + expected_offset as usize;
        if bytes.len() != end {
            return Err(parse(end, format!("{} trailing bytes after payload", bytes.len() - end)));
        }
        Ok(bundle)
    }
}

pub fn save_bundle(bundle: &TensorBundle, path: &Path) -> Result<()> {
    fs::write(path, bundle.to_bytes()?)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<TensorBundle> {
    TensorBundle::from_bytes(&fs::read(path)?)
}

fn layer_names(l: usize) -> [String; 12] {
    let p = format!("layer{}", l + 1);
    [
        format!("{p}.wq"),
        format!("{p}.wk"),
        format!("{p}.wv"),
        format!("{p}.wo"),
        format!("{p}.ln1_gain"),
        format!("{p}.ln1_bias"),
        format!("{p}.w1"),
        format!("{p}.b1"),
        format!("{p}.w2"),
        format!("{p}.b2"),
        format!("{p}.ln2_gain"),
        format!("{p}.ln2_bias"),
    ]
}

pub fn model_to_bundle(model: &Model) -> Result<TensorBundle> {
    let meta = BundleMeta { seed: Some(model.config.seed), model: Some(model.config), ..BundleMeta::default() };
    let mut b = TensorBundle::new(meta);
    b.insert_matrix("token_emb", &model.token_emb)?;
    b.insert_matrix("pos_emb", &model.pos_emb)?;
    b.insert_matrix("seg_emb", &model.seg_emb)?;
    for (l, p) in model.layers.iter().enumerate() {
        let n = layer_names(l);
        b.insert_matrix(&n[0], &p.wq)?;
        b.insert_matrix(&n[1], &p.wk)?;
        b.insert_matrix(&n[2], &p.wv)?;
        b.insert_matrix(&n[3], &p.wo)?;
        b.insert_vector(&n[4], &p.ln1_gain)?;
        b.insert_vector(&n[5], &p.ln1_bias)?;
        b.insert_matrix(&n[6], &p.w1)?;
        b.insert_vector(&n[7], &p.b1)?;
        b.insert_matrix(&n[8], &p.w2)?;
        b.insert_vector(&n[9], &p.b2)?;
        b.insert_vector(&n[10], &p.ln2_gain)?;
        b.insert_vector(&n[11], &p.ln2_bias)?;
    }
    b.insert_vector("mlm_bias", &model.mlm_bias)?;
    Ok(b)
}

pub fn model_from_bundle(b: &TensorBundle) -> Result<Model> {
    let config = b.meta.model.ok_or_else(|| Error::Invalid("bundle has no model config".into()))?;
    config.validate()?;
    let (d, f) = (config.dim, config.ff_dim);
    let shaped = |name: &str, r: usize, c: usize| -> Result<Matrix> {
        let m = b.matrix(name)?;
        if m.shape() != (r, c) {
            return Err(Error::Shape(format!("{name}: {:?}, expected {r}x{c}", m.shape())));
        }
        Ok(m)
    };
    let vector = |name: &str, n: usize| -> Result<Vec<f64>> {
        let v = b.vector(name)?;
        if v.len() != n {
            return Err(Error::Shape(format!("{name}: length {}, expected {n}", v.len())));
        }
        Ok(v)
    };
    let layers = (0..config.layers)
        .map(|l| {
            let n = layer_names(l);
            Ok(LayerParams {
                wq: shaped(&n[0], d, d)?,
                wk: shaped(&n[1], d, d)?,
                wv: shaped(&n[2], d, d)?,
                wo: shaped(&n[3], d, d)?,
                ln1_gain: vector(&n[4], d)?,
                ln1_bias: vector(&n[5], d)?,
                w1: shaped(&n[6], d, f)?,
                b1: vector(&n[7], f)?,
                w2: shaped(&n[8], f, d)?,
                b2: vector(&n[9], d)?,
                ln2_gain: vector(&n[10], d)?,
                ln2_bias: vector(&n[11], d)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Model {
        config,
        token_emb: shaped("token_emb", config.vocab, d)?,
        pos_emb: shaped("pos_emb", config.max_len, d)?,
        seg_emb: shaped("seg_emb", 2, d)?,
        layers,
        mlm_bias: vector("mlm_bias", config.vocab)?,
    })
}

/// `X`, `E{l}` for every layer, `A{l}.{h}` for every head, and the value
/// and output slices `Wv{l}.{h}`, `H{l}.{h}`.
pub fn trace_to_bundle(trace: &ForwardTrace, meta: BundleMeta) -> Result<TensorBundle> {
    let mut b = TensorBundle::new(meta);
    b.insert_matrix("X", &trace.x)?;
    for (l, e) in trace.hidden.iter().enumerate() {
        b.insert_matrix(&format!("E{}", l + 1), e)?;
    }
    for s in &trace.snapshots {
        b.insert_matrix(&format!("A{}.{}", s.layer, s.head), &s.a)?;
        b.insert_matrix(&format!("Wv{}.{}", s.layer, s.head), &s.wv)?;
        b.insert_matrix(&format!("H{}.{}", s.layer, s.head), &s.h)?;
    }
    Ok(b)
}

/// Head snapshots stored in a bundle. Accepts either a single head given
/// as tensors `E`, `Wv`, `H`, `A`, or a trace bundle (see [`trace_to_bundle`]).
pub fn snapshots_from_bundle(b: &TensorBundle) -> Result<Vec<HeadSnapshot>> {
    if b.get("A").is_some() {
        return Ok(vec![HeadSnapshot::new(1, 0, b.matrix("E")?, b.matrix("Wv")?, b.matrix("H")?, b.matrix("A")?)?]);
    }
    let mut out = Vec::new();
    for t in b.tensors() {
        let Some(key) = t.name.strip_prefix('A') else { continue };
        let Some((l, h)) = key.split_once('.') else { continue };
        let (Ok(layer), Ok(head)) = (l.parse::<usize>(), h.parse::<usize>()) else { continue };
        let e = if layer == 1 { b.matrix("X")? } else { b.matrix(&format!("E{}", layer - 1))? };
        out.push(HeadSnapshot::new(
            layer,
            head,
            e,
            b.matrix(&format!("Wv{layer}.{head}"))?,
            b.matrix(&format!("H{layer}.{head}"))?,
            b.matrix(&t.name)?,
        )?);
    }
    if out.is_empty() {
        return Err(Error::Invalid("bundle holds no attention heads".into()));
    }
    Ok(out)
}

/// A rectangular table of already formatted cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) -> Result<()> {
        if row.len() != self.header.len() {
            return Err(Error::Shape(format!("row has {} cells, header has {}", row.len(), self.header.len())));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// 17 significant digits, enough to round-trip any binary64.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

/// Absent values become empty cells.
pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn emit_csv(table: &Table, path: &Path) -> Result<()> {
    fs::write(path, table.to_csv_bytes()?)?;
    Ok(())
}

/// Parses `key = value` lines; `#` starts a comment line.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() && !trimmed.starts_with('#') {
            let (k, v) = trimmed.split_once('=').ok_or_else(|| Error::Parse {
                offset: offset as u64,
                msg: format!("expected key=value, got {trimmed:?}"),
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(Error::Parse { offset: offset as u64, msg: "empty key".into() });
            }
            out.insert(key.to_string(), v.trim().to_string());
        }
        offset += line.len();
    }
    Ok(out)
}
