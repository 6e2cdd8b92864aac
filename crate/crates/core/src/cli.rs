// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end. `run_cli` returns the process exit code:
//! 0 on success, 1 when an analysis fails, 2 on usage errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::acceptance;
use crate::attribution;
use crate::effective::{correlation_profile, decompose, token_group_aggregate, AttentionDecomposition};
use crate::error::Error;
use crate::head_geometry::{compute_t, nullspace_report, HeadSnapshot};
use crate::io::{self, num, opt_num, BundleMeta, Table, TensorBundle};
use crate::model::{self, ForwardTrace, Model, ModelConfig};
use crate::probe::{self, Metric, ProbeHyper, ProbeKind, ProbeTarget, Split};
use crate::simplex::{perturb_attention, verify_equivalence, DEFAULT_SCALE};
use crate::train::{train_mlm, MarkovCorpus, TrainConfig};

const BRANCHING: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "attn-ident", version, about = "Identifiability analyses of self-attention")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Default, Args)]
struct Common {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Rank tolerance; default max(m, n)·ε·s₁.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Fraction of the largest feasible perturbation step, in (0, 1].
    #[arg(long, global = true)]
    scale: Option<f64>,
    /// Random sentence splits averaged by `probe`.
    #[arg(long, global = true)]
    folds: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    /// Model width d.
    #[arg(long, global = true)]
    dim: Option<usize>,
    /// Head width d_v; sets the width to heads·dv when --dim is absent.
    #[arg(long, global = true)]
    dv: Option<usize>,
    #[arg(long, global = true)]
    dff: Option<usize>,
    #[arg(long, global = true)]
    vocab: Option<usize>,
    /// Sequence length.
    #[arg(long, global = true)]
    len: Option<usize>,
    /// Number of sentences to sample.
    #[arg(long, global = true)]
    sentences: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// key=value file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Model bundle written by `train`; a fresh model is initialized otherwise.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the toy encoder on a synthetic corpus.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Write one trace bundle per sampled sentence.
    Forward,
    /// Null-space dimensions for every head.
    Nullspace(Source),
    /// Effective attention, correlation profile and token-group aggregates.
    Effective {
        #[command(flatten)]
        source: Source,
        /// One label per position, whitespace or comma separated.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Build an alternative attention matrix with identical head output.
    Perturb {
        #[command(flatten)]
        source: Source,
        /// 1-based layer of the head.
        #[arg(long, default_value_t = 1)]
        at_layer: usize,
        #[arg(long, default_value_t = 0)]
        at_head: usize,
    },
    /// Hidden token attribution and its statistics.
    Attribute {
        /// One label per position, whitespace or comma separated.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Token identifiability probes.
    Probe {
        /// Comma-separated probe kinds: naive, linear, mlp, constant.
        #[arg(long, default_value = "naive,linear")]
        kinds: String,
        /// Comma-separated metrics: cosine, l2.
        #[arg(long, default_value = "cosine,l2")]
        metrics: String,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the acceptance suite twice and compare the outputs.
    Verify {
        /// Run only these criteria, once (comma separated, e.g. A1,A5).
        #[arg(long)]
        only: Option<String>,
    },
}

#[derive(Debug, Clone, Args)]
struct Source {
    /// Bundle holding E/Wv/H/A per head, or a trace bundle from `forward`.
    #[arg(long)]
    bundle: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Analysis(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Analysis(e)
    }
}

type Run<T = ()> = std::result::Result<T, Failure>;

/// Settings after merging the config file under the flags.
#[derive(Debug, Clone)]
struct Settings {
    seed: u64,
    tol: Option<f64>,
    scale: f64,
    folds: usize,
    model: ModelConfig,
    len: usize,
    sentences: Option<usize>,
    out: PathBuf,
    model_path: Option<PathBuf>,
    file: BTreeMap<String, String>,
}

impl Settings {
    fn resolve(c: &Common) -> Run<Self> {
        let file = match &c.config {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", p.display())))?;
                io::parse_config(&text).map_err(|e| Failure::Usage(e.to_string()))?
            }
            None => BTreeMap::new(),
        };
        let known = [
            "seed", "tol", "scale", "folds", "layers", "heads", "dim", "dv", "dff", "vocab", "len", "sentences", "out",
            "model", "steps", "lr", "batch", "epochs",
        ];
        if let Some(k) = file.keys().find(|k| !known.contains(&k.as_str())) {
            return Err(Failure::Usage(format!("unknown config key {k:?}")));
        }
        let base = ModelConfig::default();
        let heads = pick(c.heads, &file, "heads")?.unwrap_or(base.heads);
        let dv = pick(c.dv, &file, "dv")?;
        let dim = match (pick(c.dim, &file, "dim")?, dv) {
            (Some(d), Some(v)) if d != heads * v => {
                return Err(Failure::Usage(format!("--dim {d} disagrees with --heads {heads} x --dv {v}")))
            }
            (Some(d), _) => d,
            (None, Some(v)) => heads * v,
            (None, None) => base.dim,
        };
        let len = pick(c.len, &file, "len")?.unwrap_or(24);
        let seed = pick(c.seed, &file, "seed")?.unwrap_or(0);
        let model = ModelConfig {
            layers: pick(c.layers, &file, "layers")?.unwrap_or(base.layers),
            heads,
            dim,
            ff_dim: pick(c.dff, &file, "dff")?.unwrap_or(base.ff_dim),
            vocab: pick(c.vocab, &file, "vocab")?.unwrap_or(base.vocab),
            max_len: base.max_len.max(len),
            seed,
        };
        model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        let scale = pick(c.scale, &file, "scale")?.unwrap_or(DEFAULT_SCALE);
        if !(scale > 0.0 && scale <= 1.0) {
            return Err(Failure::Usage(format!("--scale must lie in (0, 1], got {scale}")));
        }
        if len < 4 {
            return Err(Failure::Usage("--len must be at least 4".into()));
        }
        Ok(Self {
            seed,
            tol: pick(c.tol, &file, "tol")?,
            scale,
            folds: pick(c.folds, &file, "folds")?.unwrap_or(3),
            model,
            len,
            sentences: pick(c.sentences, &file, "sentences")?,
            out: pick(c.out.clone(), &file, "out")?.unwrap_or_else(|| PathBuf::from("out")),
            model_path: pick(c.model.clone(), &file, "model")?,
            file,
        })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Run<Option<T>> {
        pick(flag, &self.file, key)
    }

    fn load_model(&self) -> Run<Model> {
        match &self.model_path {
            Some(p) => Ok(io::model_from_bundle(&io::load_bundle(p)?)?),
            None => Ok(Model::init(self.model)?),
        }
    }

    fn sample_sentences(&self, model: &Model, default_count: usize) -> Run<Vec<Vec<usize>>> {
        let count = self.sentences.unwrap_or(default_count);
        if count == 0 {
            return Err(Failure::Usage("--sentences must be positive".into()));
        }
        if self.len > model.config.max_len {
            return Err(Failure::Usage(format!("--len {} exceeds the model's maximum {}", self.len, model.config.max_len)));
        }
        let corpus = MarkovCorpus::new(model.config.vocab, BRANCHING, self.seed)?;
        Ok(corpus.generate(count, self.len, self.seed ^ 0x5eed)?)
    }

    fn traces(&self, model: &Model, default_count: usize) -> Run<Vec<ForwardTrace>> {
        let segs = vec![0; self.len];
        Ok(self
            .sample_sentences(model, default_count)?
            .iter()
            .map(|toks| model::forward(model, toks, &segs))
            .collect::<crate::Result<_>>()?)
    }

    fn meta(&self, model: Option<ModelConfig>) -> BundleMeta {
        BundleMeta { seed: Some(self.seed), model, ..BundleMeta::default() }
    }

    fn write(&self, name: &str, table: &Table) -> Run {
        fs::create_dir_all(&self.out).map_err(Error::from)?;
        let path = self.out.join(name);
        io::emit_csv(table, &path)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn save(&self, name: &str, bundle: &TensorBundle) -> Run {
        fs::create_dir_all(&self.out).map_err(Error::from)?;
        let path = self.out.join(name);
        io::save_bundle(bundle, &path)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    /// Head snapshots from `--bundle`, or from a forward pass of the model.
    fn snapshots(&self, source: &Source) -> Run<Vec<HeadSnapshot>> {
        match &source.bundle {
            Some(p) => Ok(io::snapshots_from_bundle(&io::load_bundle(p)?)?),
            None => {
                let model = self.load_model()?;
                Ok(self.traces(&model, 1)?.into_iter().flat_map(|t| t.snapshots).collect())
            }
        }
    }
}

fn pick<T: FromStr>(flag: Option<T>, file: &BTreeMap<String, String>, key: &str) -> Run<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match file.get(key) {
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| Failure::Usage(format!("config key {key}: cannot parse {v:?}"))),
        None => Ok(None),
    }
}

fn read_labels(path: &Path) -> Run<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).map(str::to_string).collect())
}

fn parse_list<T>(text: &str, parse: impl Fn(&str) -> Option<T>) -> Run<Vec<T>> {
    text.split(',')
        .map(|s| parse(s.trim()).ok_or_else(|| Failure::Usage(format!("unrecognized value {s:?}"))))
        .collect()
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            2
        }
        Err(Failure::Analysis(e)) => {
            eprintln!("analysis failed: {e}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Run<i32> {
    let s = Settings::resolve(&cli.common)?;
    match cli.command {
        Command::Train { steps, lr, batch } => train(&s, steps, lr, batch),
        Command::Forward => forward(&s),
        Command::Nullspace(src) => nullspace(&s, &src),
        Command::Effective { source, labels } => effective(&s, &source, labels.as_deref()),
        Command::Perturb { source, at_layer, at_head } => perturb(&s, &source, at_layer, at_head),
        Command::Attribute { labels } => attribute(&s, labels.as_deref()),
        Command::Probe { kinds, metrics, epochs } => run_probe(&s, &kinds, &metrics, epochs),
        Command::Verify { only } => verify(&s, only.as_deref()),
    }
}

fn train(s: &Settings, steps: Option<usize>, lr: Option<f64>, batch: Option<usize>) -> Run<i32> {
    let base = TrainConfig::default();
    let cfg = TrainConfig {
        steps: s.get(steps, "steps")?.unwrap_or(base.steps),
        learn_rate: s.get(lr, "lr")?.unwrap_or(base.learn_rate),
        batch: s.get(batch, "batch")?.unwrap_or(base.batch),
        seed: s.seed,
        ..base
    };
    let model = s.load_model()?;
    let corpus = MarkovCorpus::new(model.config.vocab, BRANCHING, s.seed)?.generate(
        s.sentences.unwrap_or(2000),
        s.len,
        s.seed,
    )?;
    let (trained, report) = train_mlm(&model, &corpus, &cfg)?;
    let mut losses = Table::new(&["step", "loss"]);
    for (i, l) in report.losses.iter().enumerate() {
        losses.push(vec![(i + 1).to_string(), num(*l)])?;
    }
    s.write("train_loss.csv", &losses)?;
    let mut summary = Table::new(&["initial_eval_loss", "final_eval_loss"]);
    summary.push(vec![num(report.initial_eval_loss), num(report.final_eval_loss)])?;
    s.write("train_summary.csv", &summary)?;
    s.save("model.atnt", &io::model_to_bundle(&trained)?)?;
    println!("eval loss {:.4} -> {:.4}", report.initial_eval_loss, report.final_eval_loss);
    Ok(0)
}

fn forward(s: &Settings) -> Run<i32> {
    let model = s.load_model()?;
    let traces = s.traces(&model, 1)?;
    for (n, t) in traces.iter().enumerate() {
        s.save(&format!("trace{n}.atnt"), &io::trace_to_bundle(t, s.meta(Some(model.config)))?)?;
    }
    Ok(0)
}

fn nullspace(s: &Settings, src: &Source) -> Run<i32> {
    let mut table = Table::new(&[
        "layer",
        "head",
        "d_s",
        "d",
        "d_v",
        "rank_t",
        "dim_ln_t",
        "dim_ln_t1",
        "lower_bound_ln_t",
        "lower_bound_ln_t1",
    ]);
    for snap in s.snapshots(src)? {
        let r = nullspace_report(&snap, s.tol)?;
        table.push(
            [r.layer, r.head, r.d_s, r.d, r.d_v, r.rank_t, r.dim_ln_t, r.dim_ln_t1, r.lower_bound_ln_t, r.lower_bound_ln_t1]
                .iter()
                .map(ToString::to_string)
                .collect(),
        )?;
    }
    s.write("nullspace.csv", &table)?;
    Ok(0)
}

fn effective(s: &Settings, src: &Source, labels: Option<&Path>) -> Run<i32> {
    let decomps = s
        .snapshots(src)?
        .iter()
        .map(|snap| decompose(snap, s.tol))
        .collect::<crate::Result<Vec<AttentionDecomposition>>>()?;
    let profile = correlation_profile(&decomps, true);
    let mut table = Table::new(&["d_s", "n", "mean_pearson"]);
    for r in &profile.rows {
        table.push(vec![r.d_s.to_string(), r.n.to_string(), num(r.mean_pearson)])?;
    }
    s.write("correlation_profile.csv", &table)?;
    let mut heads = Table::new(&["layer", "head", "d_s", "null_dim", "pearson"]);
    for d in &decomps {
        let r = crate::effective::raw_effective_correlation(d).ok();
        heads.push(vec![d.layer.to_string(), d.head.to_string(), d.seq_len().to_string(), d.null_dim.to_string(), opt_num(r)])?;
    }
    s.write("effective_heads.csv", &heads)?;
    let mut triplets = Table::new(&["layer", "head", "row", "col", "raw", "effective", "null"]);
    for d in &decomps {
        let (raw, eff, null) = d.triplet();
        for r in 0..raw.rows() {
            for c in 0..raw.cols() {
                triplets.push(vec![
                    d.layer.to_string(),
                    d.head.to_string(),
                    r.to_string(),
                    c.to_string(),
                    num(raw.get(r, c)),
                    num(eff.get(r, c)),
                    num(null.get(r, c)),
                ])?;
            }
        }
    }
    s.write("effective_triplets.csv", &triplets)?;
    if let Some(path) = labels {
        let labels = read_labels(path)?;
        let mut groups = Table::new(&["layer", "head", "kind", "group", "members", "mean"]);
        for d in &decomps {
            let (raw, eff, null) = d.triplet();
            for (kind, m) in [("raw", raw), ("effective", eff), ("null", null)] {
                for g in token_group_aggregate(m, &labels, &[])? {
                    groups.push(vec![
                        d.layer.to_string(),
                        d.head.to_string(),
                        kind.into(),
                        g.group,
                        g.members.to_string(),
                        opt_num(g.mean),
                    ])?;
                }
            }
        }
        s.write("effective_groups.csv", &groups)?;
    }
    if !profile.undefined.is_empty() {
        eprintln!("{} heads have an undefined correlation (constant attention)", profile.undefined.len());
    }
    Ok(0)
}

fn perturb(s: &Settings, src: &Source, at_layer: usize, at_head: usize) -> Run<i32> {
    let snaps = s.snapshots(src)?;
    let snap = snaps
        .iter()
        .find(|h| h.layer == at_layer && h.head == at_head)
        .ok_or_else(|| Failure::Usage(format!("no head {at_head} in layer {at_layer}")))?;
    let res = perturb_attention(snap, s.seed, s.scale, s.tol)?;
    let t = compute_t(snap)?;
    let tol = 1e-9 * crate::linalg::spectral_norm(&t)?;
    let rep = verify_equivalence(&snap.a, &res.a_alt, &t, tol)?;
    let mut rows = Table::new(&["row", "lambda_used", "lambda_max", "confined"]);
    for r in 0..snap.seq_len() {
        rows.push(vec![
            r.to_string(),
            num(res.lambda_used[r]),
            num(res.lambda_max[r]),
            res.confined_rows.contains(&r).to_string(),
        ])?;
    }
    s.write("perturb_rows.csv", &rows)?;
    let mut table = Table::new(&["layer", "head", "max_output_diff", "max_row_sum_err", "min_entry", "max_attention_diff", "passed"]);
    table.push(vec![
        at_layer.to_string(),
        at_head.to_string(),
        num(rep.max_output_diff),
        num(rep.max_row_sum_err),
        num(rep.min_entry),
        num(rep.max_attention_diff),
        rep.passed.to_string(),
    ])?;
    s.write("equivalence.csv", &table)?;
    let mut bundle = TensorBundle::new(s.meta(None));
    bundle.insert_matrix("A", &snap.a)?;
    bundle.insert_matrix("A_alt", &res.a_alt)?;
    bundle.insert_matrix("direction", &res.direction)?;
    s.save("perturb.atnt", &bundle)?;
    println!(
        "max output diff {:.3e}, max attention change {:.3e}: {}",
        rep.max_output_diff,
        rep.max_attention_diff,
        if rep.passed { "equivalent" } else { "NOT equivalent" }
    );
    Ok(if rep.passed { 0 } else { 1 })
}

fn attribute(s: &Settings, labels: Option<&Path>) -> Run<i32> {
    let model = s.load_model()?;
    let segs = vec![0; s.len];
    let tensors = s
        .sample_sentences(&model, 1)?
        .iter()
        .map(|toks| attribution::attribute(&model, toks, &segs))
        .collect::<crate::Result<Vec<_>>>()?;
    let mut bundle = TensorBundle::new(s.meta(Some(model.config)));
    for (n, t) in tensors.iter().enumerate() {
        let data: Vec<f64> = (0..=t.layers()).flat_map(|l| (0..t.seq_len()).flat_map(move |j| t.row(l, j).to_vec())).collect();
        bundle.insert(&format!("C{n}"), vec![t.layers() + 1, t.seq_len(), t.seq_len()], data)?;
    }
    s.save("attribution.atnt", &bundle)?;

    let label_sets = match labels {
        Some(p) => {
            let l = read_labels(p)?;
            if l.len() != s.len {
                return Err(Failure::Usage(format!("{} labels for sequences of length {}", l.len(), s.len)));
            }
            Some(vec![l; tensors.len()])
        }
        None => None,
    };
    let mut table = Table::new(&["layer", "group", "n", "median", "q1", "q3", "whisker_low", "whisker_high"]);
    for st in attribution::self_contribution_stats(&tensors, label_sets.as_deref())? {
        let b = &st.stats;
        table.push(vec![
            st.layer.to_string(),
            st.group.unwrap_or_default(),
            b.n.to_string(),
            num(b.median),
            num(b.q1),
            num(b.q3),
            num(b.whisker_low),
            num(b.whisker_high),
        ])?;
    }
    s.write("self_contribution.csv", &table)?;

    let mut table = Table::new(&["sentence", "layer", "non_max_fraction"]);
    for (n, t) in tensors.iter().enumerate() {
        for (l, p) in attribution::non_max_fraction(t).iter().enumerate() {
            table.push(vec![n.to_string(), l.to_string(), num(*p)])?;
        }
    }
    s.write("non_max_fraction.csv", &table)?;

    let profile = attribution::locality_profile(&tensors, &attribution::default_groups())?;
    let mut table = Table::new(&["layer", "group", "targets", "raw", "share"]);
    for l in 1..=model.config.layers {
        for (g, group) in profile.groups.iter().enumerate() {
            table.push(vec![
                l.to_string(),
                group.name.clone(),
                profile.counts[g].to_string(),
                opt_num(profile.raw[l - 1][g]),
                opt_num(profile.share[l - 1][g]),
            ])?;
        }
    }
    s.write("locality.csv", &table)?;
    let mut table = Table::new(&["layer", "offset", "value", "count"]);
    for p in &profile.curves {
        table.push(vec![p.layer.to_string(), p.offset.to_string(), num(p.value), p.count.to_string()])?;
    }
    s.write("offset_curves.csv", &table)?;

    let mut table = Table::new(&["sentence", "layer", "source", "contribution"]);
    for (n, t) in tensors.iter().enumerate() {
        let track = attribution::track_token(t, 0)?;
        for l in 0..track.rows() {
            for i in 0..track.cols() {
                table.push(vec![n.to_string(), (l + 1).to_string(), i.to_string(), num(track.get(l, i))])?;
            }
        }
    }
    s.write("track_first_token.csv", &table)?;
    Ok(0)
}

fn run_probe(s: &Settings, kinds: &str, metrics: &str, epochs: Option<usize>) -> Run<i32> {
    let kinds = parse_list(kinds, |k| match k {
        "naive" => Some(ProbeKind::Naive),
        "linear" => Some(ProbeKind::Linear),
        "mlp" => Some(ProbeKind::Mlp),
        "constant" => Some(ProbeKind::Constant),
        _ => None,
    })?;
    let metrics = parse_list(metrics, |m| match m {
        "cosine" => Some(Metric::Cosine),
        "l2" => Some(Metric::L2),
        _ => None,
    })?;
    let hyper = ProbeHyper {
        max_epochs: s.get(epochs, "epochs")?.unwrap_or(ProbeHyper::default().max_epochs),
        seed: s.seed,
        ..ProbeHyper::default()
    };
    let model = s.load_model()?;
    let traces = s.traces(&model, 200)?;
    let layers: Vec<usize> = (0..=model.config.layers).collect();
    let mut table = Table::new(&["layer", "kind", "metric", "rate_train", "rate_test"]);
    for r in probe::rate_profile(&traces, &layers, &kinds, &metrics, s.folds, &hyper)? {
        table.push(vec![r.layer.to_string(), r.kind.name().into(), r.metric.name().into(), num(r.rate_train), num(r.rate_test)])?;
    }
    s.write("probe_rates.csv", &table)?;

    // probes trained on one layer, tested on every layer
    let datasets = layers
        .iter()
        .map(|&l| probe::build_dataset(&traces, l, ProbeTarget::Input, 0, s.seed))
        .collect::<crate::Result<Vec<_>>>()?;
    let mut table = Table::new(&["train_layer", "eval_layer", "rate_test"]);
    for (ds, &l) in datasets.iter().zip(&layers) {
        let p = probe::train_probe(ds, ProbeKind::Linear, Metric::Cosine, &hyper)?;
        for (&m, rate) in layers.iter().zip(probe::cross_layer_eval(&p, &datasets, Split::Test)?) {
            table.push(vec![l.to_string(), m.to_string(), num(rate)])?;
        }
    }
    s.write("probe_cross_layer.csv", &table)?;
    Ok(0)
}

fn verify(s: &Settings, only: Option<&str>) -> Run<i32> {
    let print = |r: &acceptance::CriterionResult| {
        println!("{} {} ({:.1}s): {}", r.id, if r.passed { "PASS" } else { "FAIL" }, r.seconds, r.detail);
    };
    let results = match only {
        Some(list) => {
            let ids: Vec<&str> = list.split(',').map(str::trim).collect();
            if let Some(bad) = ids.iter().find(|id| !acceptance::CRITERIA.contains(id)) {
                return Err(Failure::Usage(format!("unknown criterion {bad:?}")));
            }
            let cfg = acceptance::SuiteConfig { seed: s.seed, tol: s.tol, scale: s.scale, out_dir: s.out.clone() };
            acceptance::run_selected(&cfg, &ids, print)?
        }
        None => acceptance::verify(&s.out, s.seed, s.tol, s.scale, print)?,
    };
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    Ok(if failed == 0 { 0 } else { 1 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "# run settings\nseed = 7\nheads = 4\ndv = 8\nlen=10\n").unwrap();
        let cli = Cli::try_parse_from(["attn-ident", "--config", cfg.to_str().unwrap(), "--seed", "3", "forward"]).unwrap();
        let s = Settings::resolve(&cli.common).unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.model.dim, 32);
        assert_eq!(s.len, 10);
    }

    #[test]
    fn conflicting_width_is_usage_error() {
        let cli = Cli::try_parse_from(["attn-ident", "--dim", "16", "--dv", "4", "--heads", "2", "forward"]).unwrap();
        assert!(matches!(Settings::resolve(&cli.common), Err(Failure::Usage(_))));
    }
}
