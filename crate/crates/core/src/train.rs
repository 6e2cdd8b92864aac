// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic corpus and masked-token training for the toy encoder.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mlm_loss_and_grad, Model};
use crate::rng;

/// Number of reserved ids after the ordinary symbols: CLS, SEP, MASK.
pub const SPECIAL_TOKENS: usize = 3;

/// Token ids of the special symbols for a vocabulary of size `vocab`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub cls: usize,
    pub sep: usize,
    pub mask: usize,
}

impl Specials {
    pub fn for_vocab(vocab: usize) -> Result<Self> {
        if vocab <= SPECIAL_TOKENS {
            return Err(Error::Invalid(format!("vocab {vocab} leaves no room for ordinary symbols")));
        }
        let n = vocab - SPECIAL_TOKENS;
        Ok(Self { cls: n, sep: n + 1, mask: n + 2 })
    }

    pub fn is_special(&self, t: usize) -> bool {
        t == self.cls || t == self.sep || t == self.mask
    }
}

/// Second-order Markov chain with sparse transitions. Each symbol `b` has a
/// small successor set; the symbol before it, `a`, picks the weights over
/// that set. Both neighbours therefore carry information about a token.
#[derive(Debug, Clone)]
pub struct MarkovCorpus {
    symbols: usize,
    /// For context `(a, b)` at index `a·symbols + b`: successor ids and cumulative weights.
    table: Vec<Vec<(usize, f64)>>,
    pub specials: Specials,
}

impl MarkovCorpus {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Result<Self> {
        let specials = Specials::for_vocab(vocab)?;
        let symbols = vocab - SPECIAL_TOKENS;
        let branching = branching.clamp(1, symbols);
        let mut r = rng::stream(seed, 1);
        let all: Vec<usize> = (0..symbols).collect();
        let successors: Vec<Vec<usize>> =
            (0..symbols).map(|_| all.choose_multiple(&mut r, branching).copied().collect()).collect();
        let mut table = Vec::with_capacity(symbols * symbols);
        for _a in 0..symbols {
            for succ in &successors {
                // cubing sharpens the weights so the second-order context matters
                let weights: Vec<f64> = (0..branching).map(|_| r.random::<f64>().powi(3) + 0.01).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                table.push(
                    succ.iter()
                        .zip(weights)
                        .map(|(&s, w)| {
                            acc += w / total;
                            (s, acc)
                        })
                        .collect(),
                );
            }
        }
        Ok(Self { symbols, table, specials })
    }

    /// `CLS s_1 … s_{len−2} SEP`.
    pub fn sample(&self, len: usize, r: &mut rng::Stream) -> Result<Vec<usize>> {
        if len < 4 {
            return Err(Error::Invalid(format!("sequence length {len} too short (need >= 4)")));
        }
        let mut seq = Vec::with_capacity(len);
        seq.push(self.specials.cls);
        seq.push(r.random_range(0..self.symbols));
        seq.push(r.random_range(0..self.symbols));
        while seq.len() < len - 1 {
            let n = seq.len();
            let row = &self.table[seq[n - 2] * self.symbols + seq[n - 1]];
            let u: f64 = r.random();
            let next = row.iter().find(|(_, c)| u < *c).unwrap_or(&row[row.len() - 1]).0;
            seq.push(next);
        }
        seq.push(self.specials.sep);
        Ok(seq)
    }

    pub fn generate(&self, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let mut r = rng::stream(seed, 2);
        (0..count).map(|_| self.sample(len, &mut r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub mask_prob: f64,
    pub learn_rate: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, mask_prob: 0.15, learn_rate: 1e-3, batch: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean masked-token loss per step.
    pub losses: Vec<f64>,
    /// Loss on a fixed masked evaluation set before and after training.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
}

/// Picks masked positions among the ordinary symbols: each with probability
/// `mask_prob`, and at least one.
fn choose_masks(seq: &[usize], specials: &Specials, mask_prob: f64, r: &mut rng::Stream) -> Vec<usize> {
    let candidates: Vec<usize> = (0..seq.len()).filter(|&i| !specials.is_special(seq[i])).collect();
    if candidates.is_empty() {
        return Vec::new();
    }
    let mut picked: Vec<usize> = candidates.iter().copied().filter(|_| r.random::<f64>() < mask_prob).collect();
    if picked.is_empty() {
        picked.push(candidates[r.random_range(0..candidates.len())]);
    }
    picked
}

struct Masked {
    tokens: Vec<usize>,
    targets: Vec<(usize, usize)>,
}

fn mask_sequence(seq: &[usize], specials: &Specials, mask_prob: f64, r: &mut rng::Stream) -> Masked {
    let positions = choose_masks(seq, specials, mask_prob, r);
    let mut tokens = seq.to_vec();
    let targets = positions
        .into_iter()
        .map(|p| {
            tokens[p] = specials.mask;
            (p, seq[p])
        })
        .collect();
    Masked { tokens, targets }
}

/// Mean masked-token loss on a fixed, seeded masking of `corpus`.
pub fn eval_loss(model: &Model, corpus: &[Vec<usize>], mask_prob: f64, seed: u64) -> Result<f64> {
    let specials = Specials::for_vocab(model.config.vocab)?;
    let mut r = rng::stream(seed, 3);
    let mut scratch = model.zeros_like();
    let (mut total, mut count) = (0.0, 0usize);
    for seq in corpus {
        let m = mask_sequence(seq, &specials, mask_prob, &mut r);
        let segs = vec![0; seq.len()];
        total += mlm_loss_and_grad(model, &m.tokens, &segs, &m.targets, 0.0, &mut scratch)?;
        count += m.targets.len();
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

struct Adam {
    m: Model,
    v: Model,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &Model) -> Self {
        Self { m: model.zeros_like(), v: model.zeros_like(), t: 0 }
    }

    fn step(&mut self, model: &mut Model, grads: &mut Model, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let params = model.slices_mut();
        let gs = grads.slices_mut();
        let ms = self.m.slices_mut();
        let vs = self.v.slices_mut();
        for (((p, g), m), v) in params.into_iter().zip(gs).zip(ms).zip(vs) {
            for i in 0..p.len() {
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * g[i];
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                g[i] = 0.0;
            }
        }
    }
}

/// Adam on masked-token cross-entropy. Sequences are drawn from `corpus`
/// with replacement; all randomness comes from `cfg.seed`.
pub fn train_mlm(model: &Model, corpus: &[Vec<usize>], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    if cfg.batch == 0 || !(cfg.learn_rate > 0.0) || !(0.0..=1.0).contains(&cfg.mask_prob) {
        return Err(Error::Invalid(format!("bad training config {cfg:?}")));
    }
    let specials = Specials::for_vocab(model.config.vocab)?;
    let eval_set = &corpus[..corpus.len().min(64)];
    let initial_eval_loss = eval_loss(model, eval_set, cfg.mask_prob, cfg.seed)?;
    let mut model = model.clone();
    let mut grads = model.zeros_like();
    let mut adam = Adam::new(&model);
    let mut r = rng::stream(cfg.seed, 4);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Masked> = (0..cfg.batch)
            .map(|_| {
                let seq = &corpus[r.random_range(0..corpus.len())];
                mask_sequence(seq, &specials, cfg.mask_prob, &mut r)
            })
            .collect();
        let n_targets: usize = batch.iter().map(|m| m.targets.len()).sum();
        let weight = 1.0 / n_targets.max(1) as f64;
        let mut loss = 0.0;
        for m in &batch {
            let segs = vec![0; m.tokens.len()];
            loss += mlm_loss_and_grad(&model, &m.tokens, &segs, &m.targets, weight, &mut grads)?;
        }
        let loss = loss * weight;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(loss);
        adam.step(&mut model, &mut grads, cfg.learn_rate);
    }
    let final_eval_loss = eval_loss(&model, eval_set, cfg.mask_prob, cfg.seed)?;
    Ok((model, TrainReport { losses, initial_eval_loss, final_eval_loss }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig { layers: 1, heads: 2, dim: 16, ff_dim: 32, vocab: 19, max_len: 12, seed: 1 }
    }

    #[test]
    fn corpus_shape_and_determinism() {
        let c = MarkovCorpus::new(67, 3, 5).unwrap();
        let a = c.generate(10, 24, 9).unwrap();
        assert_eq!(a, c.generate(10, 24, 9).unwrap());
        for s in &a {
            assert_eq!(s.len(), 24);
            assert_eq!(s[0], 64);
            assert_eq!(s[23], 65);
            assert!(s[1..23].iter().all(|&t| t < 64));
        }
        assert!(c.sample(3, &mut rng::stream(0, 0)).is_err());
        assert!(MarkovCorpus::new(3, 3, 0).is_err());
    }

    #[test]
    fn corpus_respects_sparse_transitions() {
        let c = MarkovCorpus::new(67, 2, 5).unwrap();
        let seqs = c.generate(200, 20, 1).unwrap();
        let mut seen = std::collections::BTreeMap::<(usize, usize), std::collections::BTreeSet<usize>>::new();
        for s in &seqs {
            for w in s[1..s.len() - 1].windows(3) {
                seen.entry((w[0], w[1])).or_default().insert(w[2]);
            }
        }
        assert!(seen.values().all(|s| s.len() <= 2));
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let m = Model::init(cfg()).unwrap();
        let corpus = MarkovCorpus::new(19, 2, 0).unwrap().generate(4, 10, 0).unwrap();
        let (out, rep) = train_mlm(&m, &corpus, &TrainConfig { steps: 0, ..TrainConfig::default() }).unwrap();
        assert_eq!(out, m);
        assert!(rep.losses.is_empty());
        assert_eq!(rep.initial_eval_loss, rep.final_eval_loss);
        assert!(train_mlm(&m, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn training_reduces_loss_deterministically() {
        let m = Model::init(cfg()).unwrap();
        let corpus = MarkovCorpus::new(19, 2, 0).unwrap().generate(64, 10, 0).unwrap();
        let tc = TrainConfig { steps: 150, learn_rate: 3e-3, batch: 4, ..TrainConfig::default() };
        let (a, rep) = train_mlm(&m, &corpus, &tc).unwrap();
        assert!(rep.final_eval_loss < rep.initial_eval_loss, "{rep:?}");
        let (b, _) = train_mlm(&m, &corpus, &tc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_is_reported() {
        let m = Model::init(cfg()).unwrap();
        let corpus = MarkovCorpus::new(19, 2, 0).unwrap().generate(8, 10, 0).unwrap();
        let tc = TrainConfig { steps: 5, learn_rate: f64::MAX, batch: 2, ..TrainConfig::default() };
        match train_mlm(&m, &corpus, &tc) {
            Err(Error::Diverged { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {:?}", other.map(|r| r.1)),
        }
    }
}
