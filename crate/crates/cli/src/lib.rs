//! The `ndb` command line.

use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ndb_core::dataset_gen::{generate_dataset, GenConfig, GenError, GeneratedDataset, GeneratedDb};
use ndb_core::eval::{evaluate_dataset, EvalMode};
use ndb_core::fact_store::{Database, FactStoreError};
use ndb_core::retrieval::RetrievalError;
use ndb_core::grammar::{Grammar, DEFAULT_RELATIONS};
use ndb_core::pipeline::{IngestOutcome, Pipeline, PipelineConfig, PipelineError, QueryResult, SsgMode};
use ndb_core::spj::server::SpjServer;
use ndb_core::spj::{OracleSpj, RemoteSpj, SpjError, SpjOperator};
use ndb_core::ssg::{train_action_classifier, ActionClassifier, LabelSource, SsgConfig, SsgError, TrainOptions};
use ndb_core::supervision::label_dataset;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser, Serialize)]
#[command(name = "ndb", version, about = "Natural-language fact database")]
pub struct Cli {
    /// SPJ worker threads [default: $NDB_WORKERS, else one per core]
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic dataset of fact databases and queries
    Gen(GenArgs),
    /// Train the support-set generator
    TrainSsg(TrainArgs),
    /// Attach erasure-found support sets to a dataset
    LabelDistant(LabelArgs),
    /// Answer one query over a fact log
    Query(QueryArgs),
    /// Interactive session: facts and questions, one per line
    Repl(ReplArgs),
    /// Score a dataset
    Eval(EvalArgs),
    /// Serve the oracle SPJ over HTTP
    ServeMockSpj(ServeArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenArgs {
    #[arg(long, default_value_t = 25)]
    pub dbs: usize,
    #[arg(long, default_value_t = 50)]
    pub facts_per_db: usize,
    #[arg(long, default_value_t = 150)]
    pub queries_per_db: usize,
    #[arg(long, default_value_t = 0.15)]
    pub composite_ratio: f64,
    #[arg(long, default_value_t = 3)]
    pub null_probes: usize,
    /// Comma-separated relation names [default: all]
    #[arg(long, value_delimiter = ',')]
    pub relations: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Labels {
    Reference,
    Distant,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Databases to train on, as START..END [default: all]
    #[arg(long, value_parser = parse_range)]
    pub dbs: Option<Range<usize>>,
    #[arg(long, value_enum, default_value_t = Labels::Reference)]
    pub labels: Labels,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 4096)]
    pub dim: usize,
    #[arg(long, default_value_t = 21)]
    pub table_bits: u32,
    #[arg(long, default_value_t = 8)]
    pub negatives: usize,
    #[arg(long, default_value_t = 0)]
    pub hard_negatives: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub tau: f64,
    #[arg(long, default_value_t = 1.0)]
    pub margin: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct LabelArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub max_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SsgChoice {
    Trained,
    Perfect,
    Tfidf,
}

#[derive(Debug, Args, Serialize)]
pub struct SsgArgs {
    #[arg(long, value_enum, default_value_t = SsgChoice::Tfidf)]
    pub ssg: SsgChoice,
    /// Trained action classifier, required with --ssg trained
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Hits kept by --ssg tfidf
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub tau: f64,
    #[arg(long, default_value_t = 3)]
    pub max_depth: usize,
    #[arg(long, default_value_t = 64)]
    pub max_open: usize,
    #[arg(long, default_value_t = 16)]
    pub cap: usize,
    /// Use the approximate MIPS index
    #[arg(long)]
    pub approx: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SpjArgs {
    /// `oracle`, or the URL of a remote SPJ endpoint
    #[arg(long, default_value = "oracle")]
    pub spj: String,
    #[arg(long, default_value_t = 5000)]
    pub spj_timeout_ms: u64,
    #[arg(long, default_value_t = 8)]
    pub spj_max_in_flight: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct QueryArgs {
    /// Fact log (JSONL)
    #[arg(long)]
    pub db: PathBuf,
    /// Logical time of the query [default: the latest fact]
    #[arg(long)]
    pub as_of: Option<u64>,
    /// Print the full result as JSON
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub ssg: SsgArgs,
    #[command(flatten)]
    pub spj: SpjArgs,
    pub query: String,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplArgs {
    /// Fact log to start from; `:save` without a path writes back to it
    #[arg(long)]
    pub db: Option<PathBuf>,
    #[command(flatten)]
    pub ssg: SsgArgs,
    #[command(flatten)]
    pub spj: SpjArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Databases to score, as START..END [default: all]
    #[arg(long, value_parser = parse_range)]
    pub dbs: Option<Range<usize>>,
    /// JSON report
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Plain-text table
    #[arg(long)]
    pub table: Option<PathBuf>,
    #[command(flatten)]
    pub ssg: SsgArgs,
    #[command(flatten)]
    pub spj: SpjArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:0")]
    pub addr: String,
    #[arg(long, default_value_t = 4)]
    pub threads: usize,
}

fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s.split_once("..").ok_or_else(|| format!("expected START..END, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a >= b {
        return Err(format!("empty range {s:?}"));
    }
    Ok(a..b)
}

/// A mistake in how the command was invoked, as opposed to bad data.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn error_kind(e: &anyhow::Error) -> (&'static str, i32) {
    if e.downcast_ref::<UsageError>().is_some() {
        return ("usage", EXIT_USAGE);
    }
    for cause in e.chain() {
        let spj = cause
            .downcast_ref::<SpjError>()
            .or_else(|| match cause.downcast_ref::<PipelineError>() {
                Some(PipelineError::Spj(s)) => Some(s),
                _ => None,
            });
        if let Some(SpjError::OperatorUnavailable(_) | SpjError::ProtocolError(_)) = spj {
            return ("protocol", EXIT_DATA);
        }
        let io = cause.is::<std::io::Error>()
            || matches!(cause.downcast_ref::<FactStoreError>(), Some(FactStoreError::Io(_)))
            || matches!(cause.downcast_ref::<GenError>(), Some(GenError::Io(_)))
            || matches!(cause.downcast_ref::<SsgError>(), Some(SsgError::Io(_)))
            || matches!(cause.downcast_ref::<RetrievalError>(), Some(RetrievalError::Io(_)));
        if io {
            return ("io", EXIT_DATA);
        }
    }
    ("data", EXIT_DATA)
}

/// Console streams, swappable for tests.
pub struct Io<'a> {
    pub input: &'a mut dyn BufRead,
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
    /// Show the REPL prompt.
    pub interactive: bool,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code. Errors are reported on `io.err` as `ndb-error: <kind>: <message>`.
pub fn run<I, T>(argv: I, io: &mut Io<'_>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(io.out, "{e}");
                return EXIT_OK;
            }
            let _ = writeln!(io.err, "ndb-error: usage: {}", e.render().to_string().trim_end());
            return EXIT_USAGE;
        }
    };
    match execute(&cli, io) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let (kind, code) = error_kind(&e);
            let _ = writeln!(io.err, "ndb-error: {kind}: {e:#}");
            code
        }
    }
}

fn workers(cli: &Cli) -> Result<usize> {
    if let Some(w) = cli.workers {
        return Ok(w);
    }
    match std::env::var("NDB_WORKERS") {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("NDB_WORKERS={v:?} is not a number"))),
        Err(_) => Ok(0),
    }
}

fn execute(cli: &Cli, io: &mut Io<'_>) -> Result<()> {
    let workers = workers(cli)?;
    let echo = serde_json::json!({ "workers": workers, "command": &cli.command });
    writeln!(io.err, "ndb-config: {echo}")?;
    match &cli.command {
        Command::Gen(a) => gen(a, io),
        Command::TrainSsg(a) => train(a, io),
        Command::LabelDistant(a) => label(a, io),
        Command::Query(a) => query(a, workers, io),
        Command::Repl(a) => repl(a, workers, io),
        Command::Eval(a) => eval(a, workers, io),
        Command::ServeMockSpj(a) => serve(a, io),
    }
}

fn load_dataset(path: &Path) -> Result<GeneratedDataset> {
    GeneratedDataset::load(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn select_dbs(mut data: GeneratedDataset, range: &Option<Range<usize>>) -> Result<GeneratedDataset> {
    if let Some(r) = range {
        if r.end > data.databases.len() {
            return Err(usage(format!(
                "--dbs {}..{} exceeds the {} databases in the dataset",
                r.start,
                r.end,
                data.databases.len()
            )));
        }
        data.databases = data.databases.drain(r.clone()).collect();
    }
    Ok(data)
}

fn gen(a: &GenArgs, io: &mut Io<'_>) -> Result<()> {
    let relations = if a.relations.is_empty() {
        DEFAULT_RELATIONS.iter().map(|s| s.to_string()).collect()
    } else {
        a.relations.clone()
    };
    let cfg = GenConfig {
        num_dbs: a.dbs,
        facts_per_db: a.facts_per_db,
        relations,
        queries_per_db: a.queries_per_db,
        composite_ratio: a.composite_ratio,
        null_probes_per_db: a.null_probes,
    };
    let data = generate_dataset(&cfg, a.seed)?;
    data.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    writeln!(
        io.out,
        "wrote {} databases, {} queries to {}",
        data.databases.len(),
        data.num_cases(),
        a.out.display()
    )?;
    Ok(())
}

fn train(a: &TrainArgs, io: &mut Io<'_>) -> Result<()> {
    let data = select_dbs(load_dataset(&a.dataset)?, &a.dbs)?;
    let opts = TrainOptions {
        epochs: a.epochs,
        seed: a.seed,
        dim: a.dim,
        table_bits: a.table_bits,
        negatives: a.negatives,
        hard_negatives: a.hard_negatives,
        tau: a.tau,
        margin: a.margin,
        labels: match a.labels {
            Labels::Reference => LabelSource::Reference,
            Labels::Distant => LabelSource::Distant,
        },
    };
    let pairs: Vec<_> = data.databases.iter().map(|d| (&d.database, d.cases.as_slice())).collect();
    let model = train_action_classifier(&pairs, &opts)?;
    model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    writeln!(io.out, "trained on {} databases, model written to {}", pairs.len(), a.out.display())?;
    Ok(())
}

fn label(a: &LabelArgs, io: &mut Io<'_>) -> Result<()> {
    let data = load_dataset(&a.dataset)?;
    let oracle = OracleSpj::new(Grammar::standard());
    let labeled = label_dataset(&data, &oracle, a.seed, a.max_iters)?;
    labeled.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let empty = labeled
        .databases
        .iter()
        .flat_map(|d| &d.cases)
        .filter(|c| c.distant_support_sets.as_ref().is_some_and(Vec::is_empty))
        .count();
    writeln!(
        io.out,
        "labeled {} queries ({} without a distant set) to {}",
        labeled.num_cases(),
        empty,
        a.out.display()
    )?;
    Ok(())
}

fn pipeline(s: &SsgArgs, workers: usize) -> Result<Pipeline> {
    let cfg = PipelineConfig {
        workers,
        ssg: SsgConfig {
            tau: s.tau,
            max_depth: s.max_depth,
            max_open: s.max_open,
            cap: s.cap,
        },
        approx_index: s.approx,
    };
    Pipeline::new(cfg).map_err(|e| usage(e.to_string()))
}

fn load_model(s: &SsgArgs) -> Result<Option<ActionClassifier>> {
    match (s.ssg, &s.model) {
        (SsgChoice::Trained, None) => Err(usage("--ssg trained needs --model")),
        (SsgChoice::Trained, Some(p)) => Ok(Some(
            ActionClassifier::load(p).with_context(|| format!("reading model {}", p.display()))?,
        )),
        _ => Ok(None),
    }
}

/// Support-set mode for free-standing queries, where no reference exists.
fn live_mode<'m>(s: &SsgArgs, model: &'m Option<ActionClassifier>) -> Result<SsgMode<'m>> {
    match (s.ssg, model) {
        (SsgChoice::Trained, Some(m)) => Ok(SsgMode::Trained(m)),
        (SsgChoice::Tfidf, _) => Ok(SsgMode::TfidfTopK(s.k)),
        (SsgChoice::Perfect, _) => Err(usage("--ssg perfect needs reference support sets; use it with eval")),
        (SsgChoice::Trained, None) => Err(usage("--ssg trained needs --model")),
    }
}

fn remote(s: &SpjArgs) -> Result<Option<Arc<RemoteSpj>>> {
    if s.spj == "oracle" {
        return Ok(None);
    }
    if !(s.spj.starts_with("http://") || s.spj.starts_with("https://")) {
        return Err(usage(format!("--spj must be `oracle` or an http(s) URL, got {:?}", s.spj)));
    }
    Ok(Some(Arc::new(RemoteSpj::new(
        s.spj.clone(),
        Duration::from_millis(s.spj_timeout_ms),
        s.spj_max_in_flight,
    ))))
}

fn operator(s: &SpjArgs) -> Result<Arc<dyn SpjOperator>> {
    Ok(match remote(s)? {
        Some(r) => r,
        None => Arc::new(OracleSpj::new(Grammar::standard())),
    })
}

fn print_result(out: &mut dyn Write, db: &Database, r: &QueryResult, json: bool) -> Result<()> {
    if json {
        writeln!(out, "{}", serde_json::to_string(r)?)?;
        return Ok(());
    }
    writeln!(out, "{}", r.answers)?;
    writeln!(out, "  agg: {}", r.agg_used.as_str())?;
    for p in &r.provenance {
        let texts: Vec<String> = p
            .support
            .iter()
            .map(|id| db.get(*id).map_or_else(|| format!("#{id}"), |f| format!("#{id} {:?}", f.text)))
            .collect();
        writeln!(out, "  {} <- {}", serde_json::to_string(&p.result)?, texts.join(", "))?;
    }
    if let Some(w) = &r.warning {
        writeln!(out, "  warning: {w}")?;
    }
    Ok(())
}

fn query(a: &QueryArgs, workers: usize, io: &mut Io<'_>) -> Result<()> {
    let db = Database::load(&a.db).with_context(|| format!("reading fact log {}", a.db.display()))?;
    let model = load_model(&a.ssg)?;
    let mode = live_mode(&a.ssg, &model)?;
    let spj = operator(&a.spj)?;
    let p = pipeline(&a.ssg, workers)?;
    let as_of = a.as_of.or(db.last_timestamp()).unwrap_or(0);
    let r = p.answer_query(&db, a.query.trim(), as_of, mode, spj.as_ref())?;
    print_result(io.out, &db, &r, a.json)
}

const REPL_HELP: &str = "Enter a fact or a question per line. Commands: :facts, :save [PATH], :help, :quit";

fn repl(a: &ReplArgs, workers: usize, io: &mut Io<'_>) -> Result<()> {
    let mut db = match &a.db {
        Some(p) if p.exists() => Database::load(p).with_context(|| format!("reading fact log {}", p.display()))?,
        _ => Database::new(),
    };
    let model = load_model(&a.ssg)?;
    let mode = live_mode(&a.ssg, &model)?;
    let spj = operator(&a.spj)?;
    let p = pipeline(&a.ssg, workers)?;
    let mut now = db.last_timestamp().map_or(0, |t| t + 1);
    let mut line = String::new();
    loop {
        if io.interactive {
            write!(io.out, "ndb> ")?;
            io.out.flush()?;
        }
        line.clear();
        if io.input.read_line(&mut line)? == 0 {
            break;
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(cmd) = text.strip_prefix(':') {
            let mut parts = cmd.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("quit" | "q" | "exit"), _) => break,
                (Some("help"), _) => writeln!(io.out, "{REPL_HELP}")?,
                (Some("facts"), _) => {
                    for f in db.facts() {
                        writeln!(io.out, "#{} @{} {}", f.id, f.timestamp, f.text)?;
                    }
                }
                (Some("save"), path) => {
                    let target = path.map(PathBuf::from).or_else(|| a.db.clone());
                    match target {
                        Some(t) => match db.save(&t) {
                            Ok(()) => writeln!(io.out, "saved {} facts to {}", db.len(), t.display())?,
                            Err(e) => writeln!(io.err, "ndb-error: io: {e}")?,
                        },
                        None => writeln!(io.err, "ndb-error: usage: :save needs a path")?,
                    }
                }
                _ => writeln!(io.err, "ndb-error: usage: unknown command {text:?}; {REPL_HELP}")?,
            }
            continue;
        }
        match p.ingest(&mut db, text, now, mode, spj.as_ref()) {
            Ok(IngestOutcome::Stored(id)) => writeln!(io.out, "stored #{id} @{now}")?,
            Ok(IngestOutcome::Answered(r)) => print_result(io.out, &db, &r, false)?,
            Err(e) => {
                let e = anyhow::Error::from(e);
                let (kind, _) = error_kind(&e);
                writeln!(io.err, "ndb-error: {kind}: {e:#}")?;
            }
        }
        now += 1;
    }
    Ok(())
}

fn eval(a: &EvalArgs, workers: usize, io: &mut Io<'_>) -> Result<()> {
    let data = select_dbs(load_dataset(&a.dataset)?, &a.dbs)?;
    let model = load_model(&a.ssg)?;
    let mode = match (a.ssg.ssg, &model) {
        (SsgChoice::Trained, Some(m)) => EvalMode::Trained(m),
        (SsgChoice::Perfect, _) => EvalMode::Perfect,
        (SsgChoice::Tfidf, _) => EvalMode::TfidfTopK(a.ssg.k),
        (SsgChoice::Trained, None) => bail!(usage("--ssg trained needs --model")),
    };
    let p = pipeline(&a.ssg, workers)?;
    let remote = remote(&a.spj)?;
    let spj_for = |db: &GeneratedDb| -> Arc<dyn SpjOperator> {
        match &remote {
            Some(r) => r.clone(),
            None => Arc::new(OracleSpj::with_sidecar(Grammar::standard(), db.provenance_map())),
        }
    };
    let report = evaluate_dataset(&data, &p, mode, &spj_for)?;
    let table = report.to_table();
    write!(io.out, "{table}")?;
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &a.table {
        std::fs::write(path, &table).with_context(|| format!("writing {}", path.display()))?;
    }
    if report.errors > 0 {
        let first = report.instances.iter().find_map(|s| s.error.as_deref()).unwrap_or_default();
        return Err(anyhow!("{} of {} queries failed; first: {first}", report.errors, report.cases));
    }
    Ok(())
}

fn serve(a: &ServeArgs, io: &mut Io<'_>) -> Result<()> {
    let server = SpjServer::start(&a.addr, Arc::new(OracleSpj::new(Grammar::standard())), a.threads)
        .with_context(|| format!("binding {}", a.addr))?;
    writeln!(io.out, "listening on {}", server.url())?;
    io.out.flush()?;
    server.join();
    Ok(())
}
