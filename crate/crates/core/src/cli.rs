//! Command-line front end: one subcommand per pipeline stage.
//!
//! Exit codes follow `sysexits.h` where one applies:
//!
//! | code | meaning |
//! |------|---------|
//! | 0    | success |
//! | 1    | pipeline failure (e.g. training diverged) |
//! | 2    | `verify`: at least one inconsistent constraint |
//! | 3    | `verify`: stale references, no inconsistency |
//! | 64   | usage error |
//! | 65   | malformed input (netlist, library, model, corpus, bins) |
//! | 74   | I/O error |

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde_json::json;

use crate::circuit_graph::{build_graph, CircuitGraph, PromotedPorts};
use crate::constraints::{ConstraintSet, SCHEMA_VERSION};
use crate::dataset::{self, CorpusSpec, PerturbKind, Split, CORPUS_VERSION};
use crate::error::{Error, Result};
use crate::ged_exact::{ged_exact, GedOptions, SimilarityBins};
use crate::ged_gnn::{self, EmbeddingCache, GedModel, GnnScorer, ModelConfig, Sample, TrainConfig, MODEL_FORMAT};
use crate::netlist::{identify_supply_nets, parse_netlist, Design};
use crate::primitive::{collapse, match_primitives, Library, LIBRARY_VERSION};
use crate::symmetry::{self, ApproxMode, BlockScorer, DetectOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_INCONSISTENT: i32 = 2;
pub const EXIT_STALE: i32 = 3;
pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_IO: i32 = 74;

#[derive(Parser, Debug)]
#[command(name = "hiersym", about = "Symmetry, matching and array constraints for analog netlists", disable_version_flag = true)]
struct Cli {
    /// Print crate, schema and model format versions.
    #[arg(long)]
    version: bool,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Seed for every random choice (corpus generation, model init).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    cmd: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Extract constraints from a netlist.
    Detect(DetectArgs),
    /// Exact graph edit distance between two subcircuits.
    Ged(GedArgs),
    /// Train the learned GED model on a corpus.
    Train(TrainArgs),
    /// Generate a labelled pair corpus as JSON lines.
    GenDataset(GenArgs),
    /// Embed every subcircuit of a netlist (or one, with `file:subckt`).
    Embed(EmbedArgs),
    /// Predicted similarity of two subcircuits.
    Score(ScoreArgs),
    /// Re-check a constraint file against a netlist.
    Verify(VerifyArgs),
    /// Print the circuit graph of a subcircuit as JSON.
    DumpGraph(DumpArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Approx {
    Off,
    Gnn,
    Exact,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Structural,
    TerminalSwap,
}

#[derive(Args, Debug)]
struct MatchArgs {
    /// Primitive library extending the builtin one.
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Approx::Exact)]
    approx: Approx,
    /// Minimum similarity for an approximate match.
    #[arg(long)]
    bound: Option<f64>,
    /// Similarity bins as JSON (`{"edges": [...], "scores": [...]}`).
    #[arg(long)]
    bins: Option<PathBuf>,
    /// Trained model, required by `--approx gnn`.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Additional supply net name; repeatable.
    #[arg(long = "supply")]
    supply: Vec<String>,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Netlist file; `-` or absent reads stdin.
    netlist: Option<PathBuf>,
    #[command(flatten)]
    m: MatchArgs,
    /// Also emit symmetric net pairs.
    #[arg(long)]
    emit_nets: bool,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GedArgs {
    /// `file` or `file:subckt`.
    a: String,
    b: String,
    /// Include the edit path.
    #[arg(long)]
    path: bool,
    /// Collapse library primitives before comparing.
    #[arg(long)]
    collapse: bool,
    /// Compare device parameters too.
    #[arg(long)]
    params: bool,
    /// Search node budget; lifts the size limit.
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long)]
    bins: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Corpus written by `gen-dataset`.
    corpus: PathBuf,
    /// Hyperparameters as JSON (`{"lr": .., "epochs": ..}`); flags override.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Ignore terminal labels on edges.
    #[arg(long)]
    label_blind: bool,
    /// Training log CSV; stdout when absent.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Model file to write.
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Number of random base circuits.
    #[arg(long, default_value_t = 40)]
    random: usize,
    #[arg(long, default_value_t = 8)]
    pairs_per_base: usize,
    #[arg(long, default_value_t = dataset::MAX_EDITS)]
    max_edits: usize,
    #[arg(long, value_enum, default_value_t = Kind::Structural)]
    kind: Kind,
    /// Extra netlist whose subcircuits become bases; repeatable.
    #[arg(long = "base")]
    bases: Vec<PathBuf>,
    #[arg(long)]
    budget: Option<u64>,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long)]
    bins: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EmbedArgs {
    reference: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    a: String,
    b: String,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    netlist: PathBuf,
    constraints: PathBuf,
    #[command(flatten)]
    m: MatchArgs,
    /// Report file; stdout when absent.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DumpArgs {
    reference: String,
    #[arg(long)]
    collapse: bool,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

/// Settings shared by `detect` and `verify`, checked before any work starts.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub inputs: Vec<PathBuf>,
    pub library: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub approx: ApproxMode,
    pub bound: Option<f64>,
    pub bins: Option<PathBuf>,
    pub supply: Vec<String>,
    pub seed: u64,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.approx == ApproxMode::Gnn && self.model.is_none() {
            return Err("--approx gnn requires --model".into());
        }
        if let Some(b) = self.bound {
            if !(0.0..=1.0).contains(&b) {
                return Err(format!("--bound must lie in [0, 1], got {b}"));
            }
        }
        if self.threads == Some(0) {
            return Err("--threads must be at least 1".into());
        }
        Ok(())
    }
}

enum Failure {
    Usage(String),
    Pipeline(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Pipeline(Error::Io(e))
    }
}

type Outcome = std::result::Result<i32, Failure>;

fn exit_code_of(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Netlist(_)
        | Error::Library(_)
        | Error::Model(_)
        | Error::Bins(_)
        | Error::Json(_)
        | Error::UnknownScope(_)
        | Error::ModelVersion { .. }
        | Error::EmptyGraphs
        | Error::GedSizeLimit { .. }
        | Error::TooFewPairs(_) => EXIT_DATA,
        Error::NonFiniteLoss { .. } => EXIT_FAILURE,
    }
}

/// Run the CLI on `args` (including the program name) and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if cli.version {
        println!("{}", version_text());
        return EXIT_OK;
    }
    let Some(cmd) = cli.cmd else {
        eprintln!("error: a subcommand is required (see --help)");
        return EXIT_USAGE;
    };
    if cli.threads == Some(0) {
        eprintln!("error: --threads must be at least 1");
        return EXIT_USAGE;
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.threads.unwrap_or(0)).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start worker pool: {e}");
            return EXIT_FAILURE;
        }
    };
    let (seed, threads) = (cli.seed, cli.threads);
    match pool.install(|| dispatch(cmd, seed, threads)) {
        Ok(code) => code,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e}");
            exit_code_of(&e)
        }
    }
}

fn version_text() -> String {
    format!(
        "hiersym {}\nconstraint schema {SCHEMA_VERSION}\nmodel format {MODEL_FORMAT}\ncorpus version {CORPUS_VERSION}\nprimitive library {LIBRARY_VERSION}",
        env!("CARGO_PKG_VERSION")
    )
}

fn dispatch(cmd: Command, seed: u64, threads: Option<usize>) -> Outcome {
    match cmd {
        Command::Detect(a) => detect(a, seed, threads),
        Command::Ged(a) => ged(a),
        Command::Train(a) => train(a, seed),
        Command::GenDataset(a) => gen_dataset(a, seed),
        Command::Embed(a) => embed(a),
        Command::Score(a) => score(a),
        Command::Verify(a) => verify(a, seed, threads),
        Command::DumpGraph(a) => dump_graph(a),
    }
}

fn read_input(path: Option<&Path>) -> Result<String> {
    match path {
        Some(p) if p != Path::new("-") => Ok(std::fs::read_to_string(p)?),
        _ => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s)?;
            Ok(s)
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            let mut out = std::io::stdout().lock();
            match writeln!(out, "{}", text.trim_end()).and_then(|_| out.flush()) {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                r => r?,
            }
        }
    }
    Ok(())
}

fn load_library(path: Option<&Path>) -> Result<Library> {
    match path {
        Some(p) => Library::extended(Library::from_json(&std::fs::read_to_string(p)?)?),
        None => Ok(Library::builtin()),
    }
}

fn load_bins(path: Option<&Path>) -> Result<SimilarityBins> {
    match path {
        Some(p) => {
            let b: SimilarityBins =
                serde_json::from_str(&std::fs::read_to_string(p)?).map_err(|e| Error::Bins(e.to_string()))?;
            b.validate()?;
            Ok(b)
        }
        None => Ok(SimilarityBins::default()),
    }
}

/// `file` or `file:subckt`. A path that exists is never split.
fn split_reference(r: &str) -> (PathBuf, Option<String>) {
    if !Path::new(r).exists() {
        if let Some((file, scope)) = r.rsplit_once(':') {
            if !file.is_empty() && !scope.is_empty() {
                return (PathBuf::from(file), Some(scope.to_string()));
            }
        }
    }
    (PathBuf::from(r), None)
}

fn load_reference(r: &str) -> Result<(Design, String)> {
    let (file, scope) = split_reference(r);
    let design = parse_netlist(&std::fs::read_to_string(&file)?)?;
    let scope = scope.unwrap_or_else(|| design.top.clone());
    if design.subckt(&scope).is_none() {
        return Err(Error::UnknownScope(scope));
    }
    Ok((design, scope))
}

fn scope_graph(design: &Design, scope: &str, lib: &Library, collapsed: bool) -> CircuitGraph {
    let supply = identify_supply_nets(design, &[]);
    let def = design.subckt(scope).expect("scope checked on load");
    let raw = build_graph(def, design, &supply, &PromotedPorts::new());
    if collapsed {
        let raw = raw.remove_inert_dummies();
        collapse(&raw, &match_primitives(&raw, lib))
    } else {
        raw
    }
}

impl MatchArgs {
    fn run_config(&self, input: PathBuf, seed: u64, threads: Option<usize>, output: Option<PathBuf>) -> RunConfig {
        RunConfig {
            inputs: vec![input],
            library: self.library.clone(),
            model: self.model.clone(),
            approx: match self.approx {
                Approx::Off => ApproxMode::Off,
                Approx::Gnn => ApproxMode::Gnn,
                Approx::Exact => ApproxMode::Exact,
            },
            bound: self.bound,
            bins: self.bins.clone(),
            supply: self.supply.clone(),
            seed,
            threads,
            output,
        }
    }
}

struct Prepared {
    design: Design,
    lib: Library,
    opts: DetectOptions,
    scorer: Option<GnnScorer>,
}

fn prepare(cfg: &RunConfig, emit_nets: bool) -> std::result::Result<Prepared, Failure> {
    cfg.validate().map_err(Failure::Usage)?;
    if cfg.model.is_some() && cfg.approx != ApproxMode::Gnn {
        warn!("--model is only used with --approx gnn; ignoring it");
    }
    let design = parse_netlist(&read_input(cfg.inputs.first().map(PathBuf::as_path))?)?;
    let lib = load_library(cfg.library.as_deref())?;
    let opts = DetectOptions {
        approx: cfg.approx,
        bound: cfg.bound,
        bins: load_bins(cfg.bins.as_deref())?,
        supply_overrides: cfg.supply.clone(),
        emit_nets,
        ..Default::default()
    };
    let scorer = match (&cfg.model, cfg.approx) {
        (Some(p), ApproxMode::Gnn) => Some(GnnScorer { model: GedModel::load(p)?, cache: EmbeddingCache::from_env() }),
        _ => None,
    };
    Ok(Prepared { design, lib, opts, scorer })
}

fn detect(a: DetectArgs, seed: u64, threads: Option<usize>) -> Outcome {
    let input = a.netlist.clone().unwrap_or_else(|| PathBuf::from("-"));
    let cfg = a.m.run_config(input, seed, threads, a.output.clone());
    let p = prepare(&cfg, a.emit_nets)?;
    let scorer = p.scorer.as_ref().map(|s| s as &dyn BlockScorer);
    // Warnings are logged by the detector as they arise.
    let det = symmetry::run_detection(&p.design, &p.lib, &p.opts, scorer)?;
    info!("{} constraints on {} axes", det.constraints.constraints.len(), det.constraints.axes.len());
    emit(cfg.output.as_deref(), &det.constraints.to_json_pretty())?;
    Ok(EXIT_OK)
}

fn verify(a: VerifyArgs, seed: u64, threads: Option<usize>) -> Outcome {
    let cfg = a.m.run_config(a.netlist.clone(), seed, threads, a.output.clone());
    let set = ConstraintSet::from_json(&std::fs::read_to_string(&a.constraints)?)?;
    let p = prepare(&cfg, false)?;
    let scorer = p.scorer.as_ref().map(|s| s as &dyn BlockScorer);
    let report = symmetry::verify(&p.design, &p.lib, &p.opts, scorer, &set)?;
    info!("{} inconsistent, {} stale", report.inconsistent(), report.stale());
    emit(cfg.output.as_deref(), &serde_json::to_string_pretty(&report).map_err(Error::from)?)?;
    Ok(report.exit_code())
}

fn ged(a: GedArgs) -> Outcome {
    let lib = load_library(a.library.as_deref())?;
    let bins = load_bins(a.bins.as_deref())?;
    let (da, sa) = load_reference(&a.a)?;
    let (db, sb) = load_reference(&a.b)?;
    let ga = scope_graph(&da, &sa, &lib, a.collapse).to_labeled_all(a.params);
    let gb = scope_graph(&db, &sb, &lib, a.collapse).to_labeled_all(a.params);
    let opts = GedOptions { budget: a.budget, ..Default::default() };
    let r = ged_exact(&ga, &gb, opts)?;
    let mut out = json!({
        "a": a.a,
        "b": a.b,
        "ged": r.ged,
        "dist": r.dist,
        "gs": bins.to_similarity(r.dist),
        "exact": r.exact,
        "expanded": r.expanded,
    });
    if a.path {
        out["mapping"] = json!(r.mapping);
        out["edit_path"] = json!(r.edit_path);
    }
    emit(a.output.as_deref(), &serde_json::to_string_pretty(&out).map_err(Error::from)?)?;
    Ok(EXIT_OK)
}

fn train(a: TrainArgs, seed: u64) -> Outcome {
    let mut hyper: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?).map_err(Error::from)?,
        None => TrainConfig::default(),
    };
    if let Some(lr) = a.lr {
        hyper.lr = lr;
    }
    if let Some(e) = a.epochs {
        hyper.epochs = e;
    }
    if !(hyper.lr > 0.0 && hyper.lr.is_finite()) {
        return Err(Failure::Usage(format!("learning rate must be positive, got {}", hyper.lr)));
    }
    let records = dataset::from_jsonl(&std::fs::read_to_string(&a.corpus)?)?;
    let mut model = GedModel::new(ModelConfig { use_edge_labels: !a.label_blind, init_seed: seed, ..Default::default() });
    let samples = |split: Split| -> Vec<Sample> {
        records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| Sample { a: model.input(&r.a), b: model.input(&r.b), gs: r.gs })
            .collect()
    };
    let (tr, te) = (samples(Split::Train), samples(Split::Test));
    info!("training on {} pairs, testing on {}", tr.len(), te.len());
    let log = ged_gnn::train(&mut model, &tr, &te, &hyper)?;
    model.save(&a.output, Some(&hyper))?;
    emit(a.log.as_deref(), &ged_gnn::log_csv(&log))?;
    Ok(EXIT_OK)
}

fn gen_dataset(a: GenArgs, seed: u64) -> Outcome {
    let lib = load_library(a.library.as_deref())?;
    let mut bases = dataset::default_bases(seed, a.random);
    for p in &a.bases {
        let name = p.file_stem().map_or_else(|| "base".to_string(), |s| s.to_string_lossy().into_owned());
        bases.extend(dataset::netlist_graphs(&name, &std::fs::read_to_string(p)?, &lib)?);
    }
    let defaults = CorpusSpec::default();
    let spec = CorpusSpec {
        seed,
        pairs_per_base: a.pairs_per_base,
        max_edits: a.max_edits,
        kind: match a.kind {
            Kind::Structural => PerturbKind::Structural,
            Kind::TerminalSwap => PerturbKind::TerminalSwap,
        },
        bins: load_bins(a.bins.as_deref())?,
        budget: a.budget.unwrap_or(defaults.budget),
    };
    let records = dataset::build_corpus(&bases, &spec);
    let n_test = records.iter().filter(|r| r.split == Split::Test).count();
    info!("{} pairs from {} bases ({} test)", records.len(), bases.len(), n_test);
    emit(a.output.as_deref(), &dataset::to_jsonl(&records))?;
    Ok(EXIT_OK)
}

fn embed(a: EmbedArgs) -> Outcome {
    let lib = load_library(a.library.as_deref())?;
    let model = GedModel::load(&a.model)?;
    let cache = EmbeddingCache::from_env();
    let (file, scope) = split_reference(&a.reference);
    let design = parse_netlist(&std::fs::read_to_string(&file)?)?;
    let scopes = match scope {
        Some(s) if design.subckt(&s).is_none() => return Err(Error::UnknownScope(s).into()),
        Some(s) => vec![s],
        None => design.bottom_up_from(&design.top),
    };
    let out: Vec<serde_json::Value> = scopes
        .iter()
        .map(|s| {
            let g = scope_graph(&design, s, &lib, true).to_labeled_all(false);
            json!({"scope": s, "embedding": cache.get_or_embed(&model, &g)})
        })
        .collect();
    info!("embedding cache: {} hits, {} misses", cache.hits(), cache.misses());
    emit(a.output.as_deref(), &serde_json::to_string_pretty(&out).map_err(Error::from)?)?;
    Ok(EXIT_OK)
}

fn score(a: ScoreArgs) -> Outcome {
    let lib = load_library(a.library.as_deref())?;
    let model = GedModel::load(&a.model)?;
    let cache = EmbeddingCache::from_env();
    let mut emb = Vec::new();
    for r in [&a.a, &a.b] {
        let (d, s) = load_reference(r)?;
        emb.push(cache.get_or_embed(&model, &scope_graph(&d, &s, &lib, true).to_labeled_all(false)));
    }
    let ps = model.score(&emb[0], &emb[1])?;
    let out = json!({
        "a": a.a,
        "b": a.b,
        "score": ps,
        "bin": model.config.bins.snap(ps),
        "model_version": model.version(),
    });
    emit(a.output.as_deref(), &serde_json::to_string_pretty(&out).map_err(Error::from)?)?;
    Ok(EXIT_OK)
}

fn dump_graph(a: DumpArgs) -> Outcome {
    let lib = load_library(a.library.as_deref())?;
    let (d, s) = load_reference(&a.reference)?;
    let g = scope_graph(&d, &s, &lib, a.collapse);
    emit(a.output.as_deref(), &serde_json::to_string_pretty(&g.dump()).map_err(Error::from)?)?;
    Ok(EXIT_OK)
}
