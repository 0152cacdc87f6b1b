//! The `ctsr` command line: corpus generation, training, indexing, querying,
//! evaluation, template sweeps and timing benchmarks.
//!
//! Every command writes one JSON run manifest next to its main output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::Error;
use crate::eval::{evaluate_baseline, evaluate_queries, Judge, Metric, MetricsReport};
use crate::index::{
    build_exact_index, measure_query_time, nn_descent_build, query_pairwise_scan, Baseline,
    FeatureIndex, NnDescentParams, QueryResult, DEFAULT_CANDIDATES,
};
use crate::models::{Model, ModelKind, DEFAULT_TEMPLATES, TEMPLATE_GRID};
use crate::training::{train_with_progress, CheckpointRecord, TrainConfig};
use crate::ts_core::{
    load_tsv_series, make_synthetic_splits, save_tsv, LabeledCollection, Preprocess, Split, SynthConfig, TimeSeries,
    DEFAULT_NOISE,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 for usage problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(_) => 1,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "ctsr", version, about = "Content-based time-series retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a labeled synthetic corpus as train/val/test TSV files.
    Synth(SynthArgs),
    /// Train a model and keep the best epoch by validation NDCG@10.
    Train(TrainArgs),
    /// Embed a corpus with a trained encoder and write a CTSX index.
    Index(IndexArgs),
    /// Print the top-k items for each query series.
    Query(QueryArgs),
    /// Score a labeled query split and write a metrics report.
    Evaluate(EvaluateArgs),
    /// Train and test the template encoder once per template count.
    SweepTemplates(SweepArgs),
    /// Time the retrieval modes and count trunk evaluations.
    Bench(BenchArgs),
}

fn ser_display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Exact,
    Ann,
    Pairwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineArg {
    Ed,
    Dtw,
}

impl From<BaselineArg> for Baseline {
    fn from(b: BaselineArg) -> Self {
        match b {
            BaselineArg::Ed => Baseline::Euclidean,
            BaselineArg::Dtw => Baseline::Dtw,
        }
    }
}

/// Preprocessing shared by commands that read TSV corpora.
#[derive(Debug, Clone, Args, Serialize)]
pub struct PrepArgs {
    /// Resampling length for every series
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    /// Skip z-normalization at ingestion
    #[arg(long)]
    pub no_znorm: bool,
}

impl PrepArgs {
    fn preprocess(&self) -> Preprocess {
        Preprocess {
            length: self.length,
            znorm: !self.no_znorm,
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Training items per class
    #[arg(long, default_value_t = 200)]
    pub per_class: usize,
    /// Validation items per class [default: per-class / 4, at least 1]
    #[arg(long)]
    pub val_per_class: Option<usize>,
    /// Test items per class [default: per-class / 4, at least 1]
    #[arg(long)]
    pub test_per_class: Option<usize>,
    #[arg(long, default_value_t = 64)]
    pub length: usize,
    #[arg(long, default_value_t = DEFAULT_NOISE)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainOpts {
    #[arg(long, default_value = "rn2dwt")]
    #[serde(serialize_with = "ser_display")]
    pub model: ModelKind,
    #[arg(long, default_value_t = DEFAULT_TEMPLATES)]
    pub templates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().epochs)]
    pub epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().steps_per_epoch)]
    pub steps_per_epoch: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().lr)]
    pub lr: f64,
    #[arg(long, default_value_t = TrainConfig::default().weight_decay)]
    pub weight_decay: f64,
}

impl TrainOpts {
    fn config(&self, length: usize) -> TrainConfig {
        TrainConfig {
            model_kind: self.model,
            batch_size: self.batch_size,
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            lr: self.lr,
            weight_decay: self.weight_decay,
            n_templates: self.templates,
            series_length: length,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Training corpus (TSV)
    #[arg(long)]
    pub train: PathBuf,
    /// Validation corpus (TSV), ranked against the training corpus
    #[arg(long)]
    pub val: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: TrainOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub prep: PrepArgs,
    /// Checkpoint path; the epoch log goes to <out>.log.tsv
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GraphOpts {
    /// Attach an NN-descent k-NN graph
    #[arg(long)]
    pub graph: bool,
    #[arg(long, default_value_t = 20)]
    pub k_graph: usize,
    #[arg(long, default_value_t = 0.5)]
    pub sample_rate: f64,
    #[arg(long, default_value_t = 0.001)]
    pub delta: f64,
    #[arg(long, default_value_t = 10)]
    pub max_iters: usize,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct IndexArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus to index (TSV)
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    #[serde(flatten)]
    pub graph: GraphOpts,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_znorm: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct QueryArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Query series (TSV)
    #[arg(long)]
    pub queries: PathBuf,
    /// Index for exact and ann modes
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Database corpus (TSV); needed for pairwise mode and --dump-series
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Exact)]
    pub mode: Mode,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Search pool size in ann mode
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    pub candidates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_znorm: bool,
    /// Write each query and its retrieved series as <dir>/query_<i>.tsv
    #[arg(long)]
    pub dump_series: Option<PathBuf>,
    /// Also write the results here; the manifest goes to <out>.manifest.json
    /// (standard error when absent)
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    /// Labeled query split (TSV)
    #[arg(long)]
    pub queries: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Database corpus (TSV) for pairwise mode and baselines
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Exact)]
    pub mode: Mode,
    /// Score a training-free distance instead of a model
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Cutoffs, as `A..B` (inclusive), a list `5,10` or one value
    #[arg(long, default_value = "10")]
    pub k_grid: String,
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    pub candidates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    #[serde(flatten)]
    pub prep: PrepArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Template counts, comma separated
    #[arg(long, default_value = "8,16,24,32,40,48")]
    pub grid: String,
    #[command(flatten)]
    #[serde(flatten)]
    pub opts: TrainOpts,
    #[command(flatten)]
    #[serde(flatten)]
    pub prep: PrepArgs,
    /// JSON report; checkpoints go to <out>.k<K>.ckpt
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long)]
    pub queries: PathBuf,
    /// Embedding checkpoint for exact and ann modes
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Pairwise (rn2d) checkpoint for pairwise mode
    #[arg(long)]
    pub pairwise_checkpoint: Option<PathBuf>,
    /// Database corpus (TSV) for pairwise mode
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Modes to time, comma separated
    #[arg(long, default_value = "exact,ann,pairwise")]
    pub modes: String,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Number of query rows used
    #[arg(long, default_value_t = 10)]
    pub n_queries: usize,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long, default_value_t = DEFAULT_CANDIDATES)]
    pub candidates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub no_znorm: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings_s: BTreeMap<String, f64>,
}

impl RunManifest {
    fn new(command: &str, seed: u64, config: &impl Serialize) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            seed,
            config: serde_json::to_value(config).map_err(|e| Error::format(e.to_string()))?,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_s: BTreeMap::new(),
        })
    }

    fn input(&mut self, key: &str, p: &Path) {
        self.inputs.insert(key.into(), p.display().to_string());
    }

    fn output(&mut self, key: &str, p: &Path) {
        self.outputs.insert(key.into(), p.display().to_string());
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    fn write(&self, path: &Path) -> CliResult<()> {
        write_text(path, &(self.to_json() + "\n"))
    }
}

/// `<path>.<suffix>` next to `path`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Core(Error::io(path, e)))
}

/// Parses `A..B` (inclusive), `a,b,c` or a single integer.
pub fn parse_k_grid(s: &str) -> CliResult<Vec<usize>> {
    let bad = || usage(format!("bad --k-grid {s:?}; expected A..B, a list, or one integer"));
    let grid: Vec<usize> = if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        s.split(',')
            .map(|t| t.trim().parse().map_err(|_| bad()))
            .collect::<CliResult<_>>()?
    };
    if grid.is_empty() || grid.contains(&0) {
        return Err(bad());
    }
    Ok(grid)
}

fn parse_list<T: std::str::FromStr>(s: &str, flag: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| usage(format!("bad {flag} entry {t:?}"))))
        .collect()
}

fn load_split(path: &Path, prep: Preprocess, split: Split) -> CliResult<LabeledCollection> {
    Ok(prep.collection(&load_tsv_series(path, false)?, split)?)
}

fn load_checkpoint(path: &Path) -> CliResult<(CheckpointRecord, Model, String)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let rec = CheckpointRecord::from_bytes(&bytes)?;
    let model = rec.model()?;
    let hash = rec.hash()?;
    Ok((rec, model, hash))
}

fn load_index_for(path: &Path, hash: &str) -> CliResult<FeatureIndex> {
    let idx = FeatureIndex::load(path)?;
    if idx.checkpoint_hash() != hash {
        return Err(usage(format!(
            "index {} was built from checkpoint {}, not the one given ({hash})",
            path.display(),
            idx.checkpoint_hash()
        )));
    }
    Ok(idx)
}

fn require<'a>(opt: &'a Option<PathBuf>, flag: &str, why: &str) -> CliResult<&'a Path> {
    opt.as_deref().ok_or_else(|| usage(format!("{flag} is required {why}")))
}

/// Parses `args` (program name first) and runs the command, writing
/// results meant for standard output to `stdout`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| usage(e.to_string()))?;
    run_command(&cli.command, stdout)
}

pub fn run_command(cmd: &Command, stdout: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a, stdout),
        Command::Index(a) => cmd_index(a),
        Command::Query(a) => cmd_query(a, stdout),
        Command::Evaluate(a) => cmd_evaluate(a, stdout),
        Command::SweepTemplates(a) => cmd_sweep_templates(a, stdout),
        Command::Bench(a) => cmd_bench(a, stdout),
    }
}

pub fn cmd_synth(a: &SynthArgs) -> CliResult<()> {
    let t = Instant::now();
    let held_out = (a.per_class / 4).max(1);
    let val_pc = a.val_per_class.unwrap_or(held_out);
    let test_pc = a.test_per_class.unwrap_or(held_out);
    let cfg = SynthConfig::new(a.classes, a.length, a.noise, a.seed);
    let splits = make_synthetic_splits(&cfg, a.per_class, val_pc, test_pc).map_err(|e| match e {
        Error::Parameter(m) => usage(m),
        e => e.into(),
    })?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let resolved = json!({
        "classes": a.classes, "per_class": a.per_class, "val_per_class": val_pc,
        "test_per_class": test_pc, "length": a.length, "noise": a.noise, "seed": a.seed,
        "out": a.out,
    });
    let mut man = RunManifest::new("synth", a.seed, &resolved)?;
    for (name, c) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        let p = a.out.join(format!("{name}.tsv"));
        save_tsv(c.items(), &p)?;
        man.output(name, &p);
    }
    let mp = a.out.join("manifest.json");
    man.output("manifest", &mp);
    man.timings_s.insert("total".into(), t.elapsed().as_secs_f64());
    man.write(&mp)
}

pub fn cmd_train(a: &TrainArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let t = Instant::now();
    let prep = a.prep.preprocess();
    let train = load_split(&a.train, prep, Split::Train)?;
    let val = load_split(&a.val, prep, Split::Validation)?;
    let cfg = a.opts.config(a.prep.length);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let out = train_with_progress(&train, &val, &cfg, |l| {
        let _ = writeln!(stdout, "epoch {}\tloss {:.6}\tval_ndcg10 {:.6}", l.epoch, l.train_loss, l.val_ndcg10);
    })?;
    out.checkpoint.save(&a.out)?;
    let mut log = String::from("epoch\ttrain_loss\tval_ndcg10\n");
    for l in &out.log {
        log.push_str(&format!("{}\t{:?}\t{:?}\n", l.epoch, l.train_loss, l.val_ndcg10));
    }
    let log_path = sidecar(&a.out, "log.tsv");
    write_text(&log_path, &log)?;
    let mut man = RunManifest::new("train", a.opts.seed, a)?;
    man.input("train", &a.train);
    man.input("val", &a.val);
    man.output("checkpoint", &a.out);
    man.output("log", &log_path);
    man.timings_s.insert("total".into(), t.elapsed().as_secs_f64());
    let mp = sidecar(&a.out, "manifest.json");
    man.output("manifest", &mp);
    man.write(&mp)?;
    writeln!(
        stdout,
        "best epoch {}\tval_ndcg10 {:.6}\tcheckpoint {}",
        out.checkpoint.epoch,
        out.checkpoint.best_val_ndcg10,
        a.out.display()
    )
    .map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

pub fn cmd_index(a: &IndexArgs) -> CliResult<()> {
    let t = Instant::now();
    let (rec, model, hash) = load_checkpoint(&a.checkpoint)?;
    if !model.kind().is_embedding() {
        return Err(Error::ModelKind(format!(
            "cannot index with a {} checkpoint; pairwise models are used by scanning",
            model.kind()
        ))
        .into());
    }
    let prep = Preprocess {
        length: rec.config.series_length,
        znorm: !a.no_znorm,
    };
    let corpus = load_split(&a.corpus, prep, Split::Train)?;
    let mut idx = build_exact_index(&corpus, &model, &hash)?;
    let t_embed = t.elapsed().as_secs_f64();
    if a.graph.graph {
        let params = NnDescentParams {
            k_graph: a.graph.k_graph,
            sample_rate: a.graph.sample_rate,
            delta: a.graph.delta,
            max_iters: a.graph.max_iters,
            seed: a.seed,
        };
        let g = nn_descent_build(&idx, &params)?;
        idx.set_graph(g)?;
    }
    idx.save(&a.out)?;
    let mut man = RunManifest::new("index", a.seed, a)?;
    man.config["series_length"] = json!(prep.length);
    man.input("checkpoint", &a.checkpoint);
    man.input("corpus", &a.corpus);
    man.output("index", &a.out);
    man.timings_s.insert("embed".into(), t_embed);
    man.timings_s.insert("total".into(), t.elapsed().as_secs_f64());
    let mp = sidecar(&a.out, "manifest.json");
    man.output("manifest", &mp);
    man.write(&mp)
}

/// Query-side access to one retrieval mode.
struct Searcher<'a> {
    mode: Mode,
    model: &'a Model,
    index: Option<&'a FeatureIndex>,
    corpus: Option<&'a LabeledCollection>,
    candidates: usize,
    seed: u64,
}

impl Searcher<'_> {
    fn check(&self) -> CliResult<()> {
        let kind = self.model.kind();
        match self.mode {
            Mode::Exact | Mode::Ann if !kind.is_embedding() => Err(usage(format!(
                "mode {:?} needs an embedding checkpoint, got {kind}; use --mode pairwise",
                self.mode
            ))),
            Mode::Pairwise if kind != ModelKind::Rn2d => {
                Err(usage(format!("mode pairwise needs an rn2d checkpoint, got {kind}")))
            }
            Mode::Ann if self.index.and_then(|i| i.graph()).is_none() => {
                Err(usage("mode ann needs an index built with --graph"))
            }
            _ => Ok(()),
        }
    }

    fn search(&self, q: &[f64], k: usize) -> crate::Result<QueryResult> {
        match self.mode {
            Mode::Exact => self.index.expect("checked").query_exact(self.model, q, k),
            Mode::Ann => {
                let t = Instant::now();
                let idx = self.index.expect("checked");
                let e = self.model.embed(q)?;
                let k = k.min(idx.len());
                let mut r = idx.query_ann(&e, k, self.candidates.clamp(k, idx.len()), self.seed)?;
                r.elapsed_s = t.elapsed().as_secs_f64();
                Ok(r)
            }
            Mode::Pairwise => query_pairwise_scan(self.corpus.expect("checked"), q, k, self.model),
        }
    }

    fn judge(&self) -> Judge {
        match self.mode {
            Mode::Pairwise => Judge::from_collection(self.corpus.expect("checked")),
            _ => Judge::from_index(self.index.expect("checked")),
        }
    }

    fn id_label(&self, pos: usize) -> (&str, &str) {
        match self.mode {
            Mode::Pairwise => {
                let c = self.corpus.expect("checked");
                (c.items()[pos].id(), c.label(pos))
            }
            _ => {
                let i = self.index.expect("checked");
                (&i.ids()[pos], &i.labels()[pos])
            }
        }
    }
}

struct Loaded {
    model: Model,
    index: Option<FeatureIndex>,
    corpus: Option<LabeledCollection>,
    length: usize,
}

fn load_for_mode(
    mode: Mode,
    checkpoint: &Path,
    index: &Option<PathBuf>,
    corpus: &Option<PathBuf>,
    znorm: bool,
    need_corpus: bool,
) -> CliResult<Loaded> {
    let (rec, model, hash) = load_checkpoint(checkpoint)?;
    let length = rec.config.series_length;
    let prep = Preprocess { length, znorm };
    let index = match mode {
        Mode::Exact | Mode::Ann => Some(load_index_for(require(index, "--index", "in exact and ann modes")?, &hash)?),
        Mode::Pairwise => None,
    };
    let corpus = if mode == Mode::Pairwise || need_corpus {
        let p = require(corpus, "--corpus", "in pairwise mode and with --dump-series")?;
        let c = load_split(p, prep, Split::Train)?;
        if let Some(idx) = &index {
            if c.len() != idx.len() || c.items().iter().zip(idx.ids()).any(|(s, id)| s.id() != id) {
                return Err(usage("--corpus does not match the items of --index"));
            }
        }
        Some(c)
    } else {
        None
    };
    Ok(Loaded {
        model,
        index,
        corpus,
        length,
    })
}

pub fn cmd_query(a: &QueryArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let t = Instant::now();
    let loaded = load_for_mode(a.mode, &a.checkpoint, &a.index, &a.corpus, !a.no_znorm, a.dump_series.is_some())?;
    let searcher = Searcher {
        mode: a.mode,
        model: &loaded.model,
        index: loaded.index.as_ref(),
        corpus: loaded.corpus.as_ref(),
        candidates: a.candidates,
        seed: a.seed,
    };
    searcher.check()?;
    if a.k == 0 {
        return Err(usage("--k must be >= 1"));
    }
    let prep = Preprocess {
        length: loaded.length,
        znorm: !a.no_znorm,
    };
    let queries = load_tsv_series(&a.queries, false)?
        .iter()
        .map(|s| prep.apply(s))
        .collect::<crate::Result<Vec<_>>>()?;
    if let Some(dir) = &a.dump_series {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = String::new();
    for (qi, q) in queries.iter().enumerate() {
        let r = searcher.search(q.values(), a.k)?;
        text.push_str(&format!("# query\t{}\n", q.id()));
        for (rank, h) in r.hits.iter().enumerate() {
            let (id, label) = searcher.id_label(h.position);
            text.push_str(&format!("{}\t{}\t{}\t{:?}\n", rank + 1, id, label, h.score));
        }
        if let (Some(dir), Some(c)) = (&a.dump_series, &loaded.corpus) {
            let mut rows: Vec<TimeSeries> = vec![q.clone()];
            rows.extend(r.hits.iter().map(|h| c.items()[h.position].clone()));
            save_tsv(&rows, dir.join(format!("query_{qi}.tsv")))?;
        }
    }
    stdout.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    let mut man = RunManifest::new("query", a.seed, a)?;
    man.config["series_length"] = json!(loaded.length);
    man.input("checkpoint", &a.checkpoint);
    man.input("queries", &a.queries);
    if let Some(p) = &a.index {
        man.input("index", p);
    }
    if let Some(p) = &a.corpus {
        man.input("corpus", p);
    }
    if let Some(p) = &a.dump_series {
        man.output("dump_series", p);
    }
    man.timings_s.insert("total".into(), t.elapsed().as_secs_f64());
    match &a.out {
        Some(p) => {
            write_text(p, &text)?;
            man.output("results", p);
            let mp = sidecar(p, "manifest.json");
            man.output("manifest", &mp);
            man.write(&mp)
        }
        None => {
            eprintln!("{}", man.to_json());
            Ok(())
        }
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let t = Instant::now();
    let grid = parse_k_grid(&a.k_grid)?;
    let mut man = RunManifest::new("evaluate", a.seed, a)?;
    man.config["k_grid"] = json!(grid);
    man.input("queries", &a.queries);
    let report = if let Some(b) = a.baseline {
        let prep = a.prep.preprocess();
        let db_path = require(&a.corpus, "--corpus", "with --baseline")?;
        let db = load_split(db_path, prep, Split::Train)?;
        let queries = load_split(&a.queries, prep, Split::Test)?;
        man.input("corpus", db_path);
        evaluate_baseline(b.into(), &db, &queries, &grid)?
    } else {
        let ck = require(&a.checkpoint, "--checkpoint", "unless --baseline is given")?;
        let loaded = load_for_mode(a.mode, ck, &a.index, &a.corpus, !a.prep.no_znorm, false)?;
        let searcher = Searcher {
            mode: a.mode,
            model: &loaded.model,
            index: loaded.index.as_ref(),
            corpus: loaded.corpus.as_ref(),
            candidates: a.candidates,
            seed: a.seed,
        };
        searcher.check()?;
        let prep = Preprocess {
            length: loaded.length,
            znorm: !a.prep.no_znorm,
        };
        man.config["length"] = json!(loaded.length);
        man.input("checkpoint", ck);
        if let Some(p) = &a.index {
            man.input("index", p);
        }
        if let Some(p) = &a.corpus {
            man.input("corpus", p);
        }
        let queries = load_split(&a.queries, prep, Split::Test)?;
        evaluate_queries(&queries, &searcher.judge(), |q, k| searcher.search(q.values(), k), &grid)?
    };
    write_text(&a.out, &(report.to_json()? + "\n"))?;
    print_means(stdout, &report)?;
    man.output("report", &a.out);
    man.timings_s.insert("total".into(), t.elapsed().as_secs_f64());
    let mp = sidecar(&a.out, "manifest.json");
    man.output("manifest", &mp);
    man.write(&mp)
}

fn print_means(stdout: &mut dyn Write, r: &MetricsReport) -> CliResult<()> {
    let mut s = String::from("k\tprec\tap\tndcg\n");
    for (i, k) in r.k_grid.iter().enumerate() {
        s.push_str(&format!("{k}\t{:.6}\t{:.6}\t{:.6}\n", r.means.prec[i], r.means.ap[i], r.means.ndcg[i]));
    }
    s.push_str(&format!("queries {}\tmean query time {:.6} s\n", r.n_queries, r.mean_query_time_s));
    stdout.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e).into())
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SweepRow {
    pub templates: usize,
    pub best_epoch: usize,
    pub val_ndcg10: f64,
    pub prec10: f64,
    pub ap10: f64,
    pub ndcg10: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// max - min over the rows, per metric
    pub spread: BTreeMap<String, f64>,
}

impl SweepReport {
    pub fn from_rows(rows: Vec<SweepRow>) -> Self {
        let spread_of = |f: fn(&SweepRow) -> f64| {
            let (lo, hi) = rows
                .iter()
                .map(f)
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        };
        let spread = BTreeMap::from([
            ("prec10".to_string(), spread_of(|r| r.prec10)),
            ("ap10".to_string(), spread_of(|r| r.ap10)),
            ("ndcg10".to_string(), spread_of(|r| r.ndcg10)),
        ]);
        Self { rows, spread }
    }

    pub fn table(&self) -> String {
        let mut s = String::from("templates\tbest_epoch\tval_ndcg10\tprec10\tap10\tndcg10\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
                r.templates, r.best_epoch, r.val_ndcg10, r.prec10, r.ap10, r.ndcg10
            ));
        }
        s.push_str(&format!(
            "spread\t\t\t{:.6}\t{:.6}\t{:.6}\n",
            self.spread["prec10"], self.spread["ap10"], self.spread["ndcg10"]
        ));
        s
    }
}

pub fn cmd_sweep_templates(a: &SweepArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let t = Instant::now();
    let grid: Vec<usize> = parse_list(&a.grid, "--grid")?;
    if grid.is_empty() {
        return Err(usage("--grid is empty"));
    }
    for &k in &grid {
        if !TEMPLATE_GRID.contains(&k) {
            return Err(usage(format!("template count {k} is not one of {TEMPLATE_GRID:?}")));
        }
    }
    if a.opts.model != ModelKind::Rn2dwt {
        return Err(usage("sweep-templates trains rn2dwt models only"));
    }
    let prep = a.prep.preprocess();
    let train = load_split(&a.train, prep, Split::Train)?;
    let val = load_split(&a.val, prep, Split::Validation)?;
    let test = load_split(&a.test, prep, Split::Test)?;
    let mut man = RunManifest::new("sweep-templates", a.opts.seed, a)?;
    man.input("train", &a.train);
    man.input("val", &a.val);
    man.input("test", &a.test);
    let mut rows = Vec::new();
    for &k in &grid {
        let tk = Instant::now();
        let cfg = TrainConfig {
            n_templates: k,
            ..a.opts.config(a.prep.length)
        };
        let out = train_with_progress(&train, &val, &cfg, |_| {})?;
        let ck = sidecar(&a.out, &format!("k{k}.ckpt"));
        out.checkpoint.save(&ck)?;
        man.output(&format!("checkpoint_k{k}"), &ck);
        let model = out.checkpoint.model()?;
        let idx = build_exact_index(&train, &model, &out.checkpoint.hash()?)?;
        let judge = Judge::from_index(&idx);
        let r = evaluate_queries(&test, &judge, |q, kk| idx.query_exact(&model, q.values(), kk), &[10])?;
        rows.push(SweepRow {
            templates: k,
            best_epoch: out.checkpoint.epoch,
            val_ndcg10: out.checkpoint.best_val_ndcg10,
            prec10: r.mean(Metric::Prec, 10)?,
            ap10: r.mean(Metric::Ap, 10)?,
            ndcg10: r.mean(Metric::Ndcg, 10)?,
        });
        man.timings_s.insert(format!("k{k}"), tk.elapsed().as_secs_f64());
    }
    let report = SweepReport::from_rows(rows);
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::format(e.to_string()))?;
    write_text(&a.out, &(json + "\n"))?;
    stdout
        .write_all(report.table().as_bytes())
        .map_err(|e| Error::io("<stdout>", e))?;
    man.output("report", &a.out);
    man.timings_s.insert("total".into(), t.elapsed().as_secs_f64());
    let mp = sidecar(&a.out, "manifest.json");
    man.output("manifest", &mp);
    man.write(&mp)
}

#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct BenchRow {
    pub mode: String,
    pub n_items: usize,
    pub n_queries: usize,
    /// Mean seconds per query, query embedding included.
    pub mean_query_s: f64,
    pub trunk_calls_per_query: f64,
}

pub fn cmd_bench(a: &BenchArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let t = Instant::now();
    let modes: Vec<Mode> = a
        .modes
        .split(',')
        .map(|m| Mode::from_str(m.trim(), true).map_err(|_| usage(format!("unknown mode {m:?}"))))
        .collect::<CliResult<_>>()?;
    if a.n_queries == 0 || a.repetitions == 0 || a.k == 0 {
        return Err(usage("--n-queries, --repetitions and --k must be >= 1"));
    }
    let mut man = RunManifest::new("bench", a.seed, a)?;
    man.input("queries", &a.queries);
    let raw = load_tsv_series(&a.queries, false)?;
    let mut rows = Vec::new();
    for mode in modes {
        let ck = match mode {
            Mode::Pairwise => require(&a.pairwise_checkpoint, "--pairwise-checkpoint", "for pairwise timing")?,
            _ => require(&a.checkpoint, "--checkpoint", "for exact and ann timing")?,
        };
        let loaded = load_for_mode(mode, ck, &a.index, &a.corpus, !a.no_znorm, false)?;
        let searcher = Searcher {
            mode,
            model: &loaded.model,
            index: loaded.index.as_ref(),
            corpus: loaded.corpus.as_ref(),
            candidates: a.candidates,
            seed: a.seed,
        };
        searcher.check()?;
        let prep = Preprocess {
            length: loaded.length,
            znorm: !a.no_znorm,
        };
        let queries = raw
            .iter()
            .take(a.n_queries)
            .map(|s| prep.apply(s))
            .collect::<crate::Result<Vec<_>>>()?;
        let n_items = match mode {
            Mode::Pairwise => loaded.corpus.as_ref().map_or(0, |c| c.len()),
            _ => loaded.index.as_ref().map_or(0, |i| i.len()),
        };
        loaded.model.reset_trunk_calls();
        let mean = measure_query_time(&queries, a.repetitions, |q| searcher.search(q.values(), a.k).map(|_| ()))?;
        let calls = loaded.model.trunk_calls() as f64 / (queries.len() * a.repetitions) as f64;
        rows.push(BenchRow {
            mode: format!("{mode:?}").to_lowercase(),
            n_items,
            n_queries: queries.len(),
            mean_query_s: mean,
            trunk_calls_per_query: calls,
        });
    }
    let mut s = String::from("mode\tn_items\tmean_query_s\ttrunk_calls_per_query\n");
    for r in &rows {
        s.push_str(&format!("{}\t{}\t{:.6e}\t{}\n", r.mode, r.n_items, r.mean_query_s, r.trunk_calls_per_query));
    }
    stdout.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
    let json = serde_json::to_string_pretty(&json!({ "rows": rows })).map_err(|e| Error::format(e.to_string()))?;
    write_text(&a.out, &(json + "\n"))?;
    man.output("report", &a.out);
    for p in [&a.checkpoint, &a.index, &a.pairwise_checkpoint, &a.corpus].into_iter().flatten() {
        let key = p.display().to_string();
        man.inputs.insert(key.clone(), key);
    }
    man.timings_s.insert("total".into(), t.elapsed().as_secs_f64());
    let mp = sidecar(&a.out, "manifest.json");
    man.output("manifest", &mp);
    man.write(&mp)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_grid_forms() {
        assert_eq!(parse_k_grid("5..15").unwrap().len(), 11);
        assert_eq!(parse_k_grid("5..15").unwrap()[0], 5);
        assert_eq!(parse_k_grid("10").unwrap(), vec![10]);
        assert_eq!(parse_k_grid("1,5,10").unwrap(), vec![1, 5, 10]);
        assert!(parse_k_grid("9..3").is_err());
        assert!(parse_k_grid("0..3").is_err());
        assert!(parse_k_grid("x").is_err());
    }

    #[test]
    fn sidecar_appends_suffix() {
        assert_eq!(sidecar(Path::new("a/m.ckpt"), "log.tsv"), PathBuf::from("a/m.ckpt.log.tsv"));
    }

    #[test]
    fn sweep_spread_is_max_minus_min() {
        let row = |k, v| SweepRow {
            templates: k,
            best_epoch: 1,
            val_ndcg10: v,
            prec10: v,
            ap10: v,
            ndcg10: v,
        };
        let r = SweepReport::from_rows(vec![row(8, 0.9), row(16, 0.95), row(32, 0.92)]);
        assert!((r.spread["ndcg10"] - 0.05).abs() < 1e-12);
        assert_eq!(r.table().lines().count(), 5);
    }

    #[test]
    fn unknown_subcommand_is_usage_error() {
        let mut out = Vec::new();
        let e = run(["ctsr", "frobnicate"], &mut out).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
