//! `ulcp`: record, detect, transform, replay and rank lock contention.

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ulcp_core::corpus;
use ulcp_core::detect::{detect_all, UlcpPair};
use ulcp_core::par::Exec;
use ulcp_core::pipeline::{report, sweep, SWEEP_CSV_HEADER};
use ulcp_core::replay::{record, replay_n, ReplayOptions, ReplayPolicy};
use ulcp_core::trace::{parse_trace, serialize_trace, Trace};
use ulcp_core::transform::transform;
use ulcp_core::workload::parse_workload_with;

use config::FileConfig;

/// A failed invocation: exit status plus the machine-readable record
/// printed on stderr.
#[derive(Debug)]
pub struct Failure {
    exit: u8,
    code: String,
    message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure {
            exit: 1,
            code: "USAGE".into(),
            message: message.into(),
        }
    }

    pub fn input(code: &str, message: impl Into<String>) -> Self {
        Failure {
            exit: 2,
            code: code.into(),
            message: message.into(),
        }
    }

    fn analysis(code: &str, message: impl Into<String>) -> Self {
        Failure {
            exit: 3,
            code: code.into(),
            message: message.into(),
        }
    }
}

impl From<ulcp_core::Error> for Failure {
    fn from(e: ulcp_core::Error) -> Self {
        let exit = if e.is_input_error() { 2 } else { 3 };
        Failure {
            exit,
            code: e.code().into(),
            message: e.to_string(),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "ulcp",
    version,
    about = "Find and rank unnecessary lock contention in recorded traces"
)]
struct Cli {
    /// TOML file with default seed, policy, runs and sweep ranges.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a workload under virtual time and write its trace.
    Simulate(SimulateArgs),
    /// Classify adjacent same-lock pairs of a trace.
    Detect(DetectArgs),
    /// Rewrite a trace so that its ULCPs no longer serialize.
    Transform(TransformArgs),
    /// Replay a trace under a scheduling policy.
    Replay(ReplayArgs),
    /// Detect, transform, replay both traces, fuse and rank.
    Report(ReportArgs),
    /// Repeat simulate and report across thread counts or input sizes.
    Sweep(SweepArgs),
    /// Bundled example workloads.
    Corpus {
        #[command(subcommand)]
        command: CorpusCommand,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// List bundled workloads and their expected dominant category.
    List,
    /// Analyze bundled workloads and compare against their expectations.
    Run {
        /// Workloads to run; all when omitted.
        names: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Workload file, or the name of a bundled workload.
    workload: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Override a declared parameter, e.g. `--param threads=4`.
    #[arg(long = "param", value_name = "NAME=VALUE", value_parser = parse_assignment)]
    params: Vec<(String, i64)>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    trace: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TransformArgs {
    trace: PathBuf,
    /// Pairs written by `detect`.
    ulcps: PathBuf,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Write nodes, edges, partial orders and locksets as JSON.
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    trace: PathBuf,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<ReplayPolicy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    /// Acquire every auxiliary lock even when its source has finished.
    #[arg(long)]
    no_dynamic_locking: bool,
    /// Run replays one after another.
    #[arg(long)]
    sequential: bool,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    trace: PathBuf,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<ReplayPolicy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_dynamic_locking: bool,
    /// Defaults to the extension of `--out`, else text.
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Workload file, or the name of a bundled workload.
    workload: String,
    /// Values for the `threads` parameter.
    #[arg(long, value_delimiter = ',')]
    threads: Vec<i64>,
    /// Values for the input-size parameter.
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<i64>,
    /// Name of the input-size parameter.
    #[arg(long)]
    size_param: Option<String>,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<ReplayPolicy>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sequential: bool,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Csv,
}

fn parse_policy(s: &str) -> Result<ReplayPolicy, String> {
    s.parse().map_err(|e: ulcp_core::Error| e.to_string())
}

fn parse_assignment(s: &str) -> Result<(String, i64), String> {
    let (k, v) = s.split_once('=').ok_or("expected NAME=VALUE")?;
    let v = v
        .trim()
        .parse()
        .map_err(|_| format!("`{v}` is not an integer"))?;
    Ok((k.trim().to_string(), v))
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::input("IO", format!("{}: {e}", path.display())))
}

fn load_trace(path: &Path) -> Result<Trace, Failure> {
    Ok(parse_trace(&read_file(path)?)?)
}

/// A path on disk wins over a bundled workload of the same name.
fn load_workload(name: &str) -> Result<String, Failure> {
    let path = Path::new(name);
    if path.exists() {
        let bytes = read_file(path)?;
        return String::from_utf8(bytes)
            .map_err(|_| Failure::input("IO", format!("{name}: not UTF-8")));
    }
    Ok(corpus::get(name)?.source.to_string())
}

fn emit(out: Option<&Path>, body: &str) -> Result<(), Failure> {
    match out {
        Some(path) => fs::write(path, body)
            .map_err(|e| Failure::analysis("IO", format!("{}: {e}", path.display()))),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(body.as_bytes())
                .map_err(|e| Failure::analysis("IO", e.to_string()))
        }
    }
}

fn json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("values serialize");
    s.push('\n');
    s
}

fn format_for(flag: Option<Format>, out: Option<&Path>, fallback: Format) -> Format {
    flag.unwrap_or_else(
        || match out.and_then(|p| p.extension()).and_then(|e| e.to_str()) {
            Some("json") => Format::Json,
            Some("csv") => Format::Csv,
            Some("txt") => Format::Text,
            _ => fallback,
        },
    )
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn simulate(cfg: &FileConfig, a: SimulateArgs) -> Result<(), Failure> {
    let source = load_workload(&a.workload)?;
    let overrides: BTreeMap<String, i64> = a.params.into_iter().collect();
    let program = parse_workload_with(&source, &overrides)?;
    let (trace, _) = record(&program, cfg.seed(a.seed)?)?;
    emit(a.out.as_deref(), &serialize_trace(&trace))
}

fn detect(a: DetectArgs) -> Result<(), Failure> {
    let trace = load_trace(&a.trace)?;
    let mut body = String::new();
    for pair in detect_all(&trace)? {
        body += &serde_json::to_string(&pair).expect("pairs serialize");
        body.push('\n');
    }
    emit(a.out.as_deref(), &body)
}

fn read_pairs(path: &Path) -> Result<Vec<UlcpPair>, Failure> {
    let text = String::from_utf8(read_file(path)?).map_err(|_| {
        Failure::input("MALFORMED_RECORD", format!("{}: not UTF-8", path.display()))
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| {
                Failure::input(
                    "MALFORMED_RECORD",
                    format!("{}: line {}: {e}", path.display(), i + 1),
                )
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TopologyReport<'a> {
    nodes: &'a std::collections::BTreeSet<ulcp_core::trace::CsId>,
    edges: &'a std::collections::BTreeSet<(ulcp_core::trace::CsId, ulcp_core::trace::CsId)>,
    partial_orders: &'a BTreeMap<ulcp_core::trace::LockId, Vec<ulcp_core::trace::CsId>>,
    standalone: &'a std::collections::BTreeSet<ulcp_core::trace::CsId>,
    locksets: &'a BTreeMap<ulcp_core::trace::CsId, Vec<ulcp_core::trace::LockId>>,
    out_locks: &'a BTreeMap<ulcp_core::trace::CsId, ulcp_core::trace::LockId>,
    end_flags: &'a BTreeMap<ulcp_core::trace::CsId, String>,
}

fn transform_cmd(a: TransformArgs) -> Result<(), Failure> {
    let trace = load_trace(&a.trace)?;
    let pairs = read_pairs(&a.ulcps)?;
    let (free, topo, assignment) = transform(&trace, &pairs)?;
    if let Some(path) = &a.report {
        let r = TopologyReport {
            nodes: &topo.nodes,
            edges: &topo.edges,
            partial_orders: &topo.partial_orders,
            standalone: &topo.standalone,
            locksets: &assignment.lockset,
            out_locks: &assignment.out_lock,
            end_flags: &assignment.end_flags,
        };
        emit(Some(path), &json(&r))?;
    }
    emit(a.out.as_deref(), &serialize_trace(&free))
}

fn replay_cmd(cfg: &FileConfig, a: ReplayArgs) -> Result<(), Failure> {
    let trace = load_trace(&a.trace)?;
    let opts = ReplayOptions::new(cfg.policy(a.policy)?)
        .seed(cfg.seed(a.seed)?)
        .dynamic_locking(cfg.dynamic_locking(a.no_dynamic_locking));
    let runs = a.runs.or(cfg.runs).unwrap_or(1);
    if runs == 0 {
        return Err(Failure::usage("--runs must be at least 1"));
    }
    let batch = replay_n(&trace, &opts, runs, exec(a.sequential))?;
    let body = match format_for(a.format, a.out.as_deref(), Format::Json) {
        Format::Json if runs == 1 => json(&batch.runs[0]),
        Format::Json => json(&batch),
        Format::Text | Format::Csv => {
            let makespans: Vec<String> = batch.makespans.iter().map(u64::to_string).collect();
            format!(
                "policy,runs,mean,variance,makespans\n{},{},{:.6},{:.6},{}\n",
                batch.policy,
                runs,
                batch.mean,
                batch.variance,
                makespans.join(" ")
            )
        }
    };
    emit(a.out.as_deref(), &body)
}

fn report_cmd(cfg: &FileConfig, a: ReportArgs) -> Result<(), Failure> {
    let trace = load_trace(&a.trace)?;
    let opts = ReplayOptions::new(cfg.policy(a.policy)?)
        .seed(cfg.seed(a.seed)?)
        .dynamic_locking(cfg.dynamic_locking(a.no_dynamic_locking));
    let r = report(&trace, &opts)?;
    let body = match format_for(a.format, a.out.as_deref(), Format::Text) {
        Format::Json => json(&r),
        Format::Text => r.to_text(),
        Format::Csv => return Err(Failure::usage("report supports text and json")),
    };
    emit(a.out.as_deref(), &body)
}

fn sweep_cmd(cfg: &FileConfig, a: SweepArgs) -> Result<(), Failure> {
    let source = load_workload(&a.workload)?;
    let threads = if a.threads.is_empty() {
        cfg.threads.clone().unwrap_or_default()
    } else {
        a.threads
    };
    let sizes = if a.sizes.is_empty() {
        cfg.sizes.clone().unwrap_or_default()
    } else {
        a.sizes
    };
    let size_param = a
        .size_param
        .or_else(|| cfg.size_param.clone())
        .unwrap_or_else(|| "size".into());
    let mut points: Vec<(String, i64)> = threads
        .into_iter()
        .map(|n| ("threads".to_string(), n))
        .collect();
    points.extend(sizes.into_iter().map(|n| (size_param.clone(), n)));
    if points.is_empty() {
        return Err(Failure::usage("sweep needs --threads or --sizes"));
    }
    let opts = ReplayOptions::new(cfg.policy(a.policy)?);
    let rows = sweep(
        &source,
        &points,
        cfg.seed(a.seed)?,
        &opts,
        exec(a.sequential),
    )?;
    let body = match format_for(a.format, a.out.as_deref(), Format::Csv) {
        Format::Json => json(&rows),
        Format::Csv | Format::Text => {
            let mut s = format!("{SWEEP_CSV_HEADER}\n");
            for r in &rows {
                s += &r.csv();
                s.push('\n');
            }
            s
        }
    };
    emit(a.out.as_deref(), &body)
}

fn corpus_cmd(cfg: &FileConfig, c: CorpusCommand) -> Result<(), Failure> {
    match c {
        CorpusCommand::List => {
            let mut s = String::new();
            for e in corpus::list() {
                s += &format!("{:<20} {}\n", e.name, e.expectation().dominant);
            }
            emit(None, &s)
        }
        CorpusCommand::Run { names, seed } => {
            let entries: Vec<&corpus::Entry> = if names.is_empty() {
                corpus::list().iter().collect()
            } else {
                names
                    .iter()
                    .map(|n| corpus::get(n))
                    .collect::<Result<_, _>>()?
            };
            let mut s = String::new();
            let mut mismatches = Vec::new();
            for e in entries {
                let want = e.expectation();
                let seed = match seed.or(cfg.seed) {
                    Some(s) => s,
                    None => e.seed(),
                };
                let (trace, _) = record(&e.program()?, seed)?;
                let r = report(&trace, &ReplayOptions::default())?;
                let got = r.dominant_category();
                let ok = got == Some(want.dominant)
                    && want.top_group.is_none_or(|t| r.top_category() == Some(t));
                let show = |c: Option<ulcp_core::detect::Category>| {
                    c.map_or("-".to_string(), |c| c.to_string())
                };
                s += &format!(
                    "{:<20} dominant={} expected={} top={} t_pd={} t_rw={} {}\n",
                    e.name,
                    show(got),
                    want.dominant,
                    show(r.top_category()),
                    r.metrics.t_pd,
                    r.metrics.t_rw,
                    if ok { "PASS" } else { "FAIL" }
                );
                if !ok {
                    mismatches.push(e.name);
                }
            }
            emit(None, &s)?;
            if mismatches.is_empty() {
                Ok(())
            } else {
                Err(Failure::analysis(
                    "EXPECTATION_MISMATCH",
                    format!("unexpected results for {}", mismatches.join(", ")),
                ))
            }
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(a) => simulate(&cfg, a),
        Command::Detect(a) => detect(a),
        Command::Transform(a) => transform_cmd(a),
        Command::Replay(a) => replay_cmd(&cfg, a),
        Command::Report(a) => report_cmd(&cfg, a),
        Command::Sweep(a) => sweep_cmd(&cfg, a),
        Command::Corpus { command } => corpus_cmd(&cfg, command),
    }
}

fn fail(f: Failure) -> ExitCode {
    let record = serde_json::json!({ "error": f.code, "message": f.message });
    eprintln!("{record}");
    ExitCode::from(f.exit)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail(Failure::usage(e.to_string().trim_end())),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => fail(f),
    }
}
