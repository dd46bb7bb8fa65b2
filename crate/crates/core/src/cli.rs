//! Command-line front end.
//!
//! [`execute`] runs one invocation in-process and returns its exit code and
//! captured output; the `friendsim` binary only forwards to it. Exit codes:
//! 0 success, 1 internal error or failed check, 2 bad input.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::agents::{measurement_unitary, register_probabilities, AgentId, Angle};
use crate::chsh::{chsh_value, lhv_bound, substitute_and_evaluate, ChshReport, Classification, ZeroPair, TSIRELSON_BOUND};
use crate::correlations::{
    build_table, exact_pair_correlation, frame_table, sequential_projective_table, CorrelationTable, Source,
    TableMode, DEFAULT_READY_VALUE,
};
use crate::error::SimError;
use crate::protocol::{
    healey_protocol, modified_protocol, run, CompiledProtocol, state_after, unitary_trajectory, validate, AngleSet, BranchChoice,
    Frame, Protocol, RunMode,
};
use crate::protofile::{self, parse_angle_expr, parse_named};
use crate::qstate::inner;
use crate::rng::StreamSplitter;

/// Stream subdomain used by the sequential projective table.
const SEQUENTIAL_DOMAIN: u64 = 8;
/// Stream subdomain used by `sample`.
const SAMPLE_DOMAIN: u64 = 9;

#[derive(Parser, Debug)]
#[command(name = "friendsim", version, about = "Simulate extended Wigner's-friend protocols and their CHSH analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Execute one protocol and report the final registers or sampled outcomes.
    Run(CommonArgs),
    /// Build the four-pair correlation table.
    Correlate(CommonArgs),
    /// Evaluate the CHSH combination, optionally with zeroed pairs.
    Chsh(CommonArgs),
    /// Run a protocol many times and count joint outcomes.
    Sample(CommonArgs),
    /// Run the invariant suite.
    Check(CommonArgs),
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Protocol file to load.
    #[arg(long)]
    protocol: Option<PathBuf>,
    /// Built-in protocol: healey-alice, healey-bob or modified:<undo|keep>,<undo|keep>.
    #[arg(long)]
    builtin: Option<String>,
    #[arg(long, value_enum)]
    frame: Option<FrameArg>,
    /// Angle override such as `b=pi/3`; may be repeated.
    #[arg(long = "angle", value_name = "NAME=EXPR")]
    angles: Vec<String>,
    #[arg(long, default_value_t = 100_000)]
    n_runs: u64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// unitary|hybrid|projective for run/sample; exact|monte-carlo|sequential|frame for correlate/chsh.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
    output: OutputFormat,
    /// Replace a frame-dependent pair by zero; may be repeated.
    #[arg(long = "zero", value_enum)]
    zeros: Vec<ZeroArg>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum FrameArg {
    Alice,
    Bob,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ZeroArg {
    Ad,
    Cb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommandKind {
    Run,
    Correlate,
    Chsh,
    Sample,
    Check,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TableSource {
    Exact,
    MonteCarlo,
    Sequential,
    Frame,
}

impl TableSource {
    fn name(self) -> &'static str {
        match self {
            TableSource::Exact => "exact",
            TableSource::MonteCarlo => "monte-carlo",
            TableSource::Sequential => "sequential",
            TableSource::Frame => "frame",
        }
    }
}

/// Where a protocol comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum ProtocolSource {
    File(PathBuf),
    Builtin(String),
}

/// Validated settings for one command.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub command: CommandKind,
    pub protocol: Option<ProtocolSource>,
    pub frame: Frame,
    pub angles: AngleSet,
    pub angles_overridden: bool,
    pub n_runs: u64,
    pub seed: u64,
    pub mode: Option<String>,
    pub output: OutputFormat,
    pub zero_pairs: Vec<ZeroPair>,
}

impl CliConfig {
    /// Defaults for `command`: canonical angles, 10⁵ runs, seed 42, JSON.
    pub fn new(command: CommandKind) -> Self {
        Self {
            command,
            protocol: None,
            frame: Frame::AliceFrame,
            angles: AngleSet::canonical(),
            angles_overridden: false,
            n_runs: 100_000,
            seed: 42,
            mode: None,
            output: OutputFormat::Json,
            zero_pairs: Vec::new(),
        }
    }
}

/// Captured result of one invocation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Execution {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

#[derive(Debug)]
pub enum CliError {
    Input(String),
    Internal(String),
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::InvalidProtocol(_)
            | SimError::ProjectiveStepInUnitaryMode { .. }
            | SimError::NonFiniteAngle(_)
            | SimError::NoRuns
            | SimError::BadGridStep(..) => CliError::Input(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn input<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Input(msg.into()))
}

/// Runs one invocation; `args` excludes the program name.
pub fn execute<I, S>(args: I) -> Execution
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let argv: Vec<std::ffi::OsString> = std::iter::once("friendsim".into())
        .chain(args.into_iter().map(Into::into))
        .collect();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            return if code == 0 {
                Execution {
                    code,
                    stdout: text,
                    stderr: String::new(),
                }
            } else {
                Execution {
                    code,
                    stdout: String::new(),
                    stderr: text,
                }
            };
        }
    };
    match config_from_cli(cli) {
        Ok(cfg) => dispatch(&cfg),
        Err(e) => finish(|_| Err(e)),
    }
}

fn config_from_cli(cli: Cli) -> CliResult<CliConfig> {
    let (command, args) = match cli.command {
        Command::Run(a) => (CommandKind::Run, a),
        Command::Correlate(a) => (CommandKind::Correlate, a),
        Command::Chsh(a) => (CommandKind::Chsh, a),
        Command::Sample(a) => (CommandKind::Sample, a),
        Command::Check(a) => (CommandKind::Check, a),
    };
    let mut cfg = CliConfig::new(command);
    cfg.protocol = match (args.protocol, args.builtin) {
        (Some(_), Some(_)) => return input("--protocol and --builtin are mutually exclusive"),
        (Some(p), None) => Some(ProtocolSource::File(p)),
        (None, Some(b)) => Some(ProtocolSource::Builtin(b)),
        (None, None) => None,
    };
    if let Some(f) = args.frame {
        cfg.frame = match f {
            FrameArg::Alice => Frame::AliceFrame,
            FrameArg::Bob => Frame::BobFrame,
        };
    }
    for spec in &args.angles {
        apply_angle_override(&mut cfg.angles, spec)?;
        cfg.angles_overridden = true;
    }
    if args.n_runs == 0 {
        return input("--n-runs must be at least 1");
    }
    cfg.n_runs = args.n_runs;
    cfg.seed = args.seed;
    cfg.mode = args.mode;
    cfg.output = args.output;
    cfg.zero_pairs = args
        .zeros
        .into_iter()
        .map(|z| match z {
            ZeroArg::Ad => ZeroPair::Ad,
            ZeroArg::Cb => ZeroPair::Cb,
        })
        .collect();
    Ok(cfg)
}

fn apply_angle_override(angles: &mut AngleSet, spec: &str) -> CliResult<()> {
    let Some((name, expr)) = spec.split_once('=') else {
        return input(format!("--angle expects NAME=EXPR, got `{spec}`"));
    };
    let value = parse_angle_expr(expr).map_err(|m| CliError::Input(format!("--angle {spec}: {m}")))?;
    match name.to_ascii_lowercase().as_str() {
        "a" => angles.a = value,
        "b" => angles.b = value,
        "c" => angles.c = value,
        "d" => angles.d = value,
        _ => return input(format!("--angle: unknown name `{name}` (expected a, b, c or d)")),
    }
    Ok(())
}

/// Output of a command that ran to completion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommandOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

impl CommandOutput {
    fn ok(stdout: String) -> Self {
        Self {
            code: 0,
            stdout,
            stderr: String::new(),
        }
    }
}

/// Runs the command named in `cfg`.
pub fn dispatch(cfg: &CliConfig) -> Execution {
    match cfg.command {
        CommandKind::Run => cmd_run(cfg),
        CommandKind::Correlate => cmd_correlate(cfg),
        CommandKind::Chsh => cmd_chsh(cfg),
        CommandKind::Sample => cmd_sample(cfg),
        CommandKind::Check => cmd_check(cfg),
    }
}

/// Rounds to 10 significant digits; rejects NaN and infinities.
pub fn round_sig(x: f64) -> CliResult<f64> {
    if !x.is_finite() {
        return Err(CliError::Internal(format!("non-finite value {x} in output")));
    }
    let r: f64 = format!("{x:.9e}")
        .parse()
        .map_err(|_| CliError::Internal(format!("cannot format {x}")))?;
    Ok(if r == 0.0 { 0.0 } else { r })
}

/// Probabilities below this are floating-point residue and print as 0.
const PROBABILITY_FLOOR: f64 = 1e-14;

fn probability(p: f64) -> CliResult<f64> {
    round_sig(if p.abs() < PROBABILITY_FLOOR { 0.0 } else { p })
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

#[derive(Serialize)]
struct AnglesOut {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
}

fn angles_out(g: &AngleSet) -> CliResult<AnglesOut> {
    Ok(AnglesOut {
        a: round_sig(g.a.radians())?,
        b: round_sig(g.b.radians())?,
        c: round_sig(g.c.radians())?,
        d: round_sig(g.d.radians())?,
    })
}

// ---- protocols ----

fn parse_builtin(name: &str, angles: AngleSet) -> CliResult<Protocol> {
    let lower = name.to_ascii_lowercase();
    match lower.as_str() {
        "healey-alice" => return Ok(healey_protocol(Frame::AliceFrame, angles)),
        "healey-bob" => return Ok(healey_protocol(Frame::BobFrame, angles)),
        _ => {}
    }
    let choice = |s: &str| match s {
        "undo" => Some(BranchChoice::Undo),
        "keep" => Some(BranchChoice::KeepAndRead),
        _ => None,
    };
    if let Some(rest) = lower.strip_prefix("modified:") {
        if let Some((x, y)) = rest.split_once(',') {
            if let (Some(a), Some(b)) = (choice(x), choice(y)) {
                return Ok(modified_protocol(a, b, angles));
            }
        }
    }
    input(format!(
        "unknown builtin `{name}` (expected healey-alice, healey-bob or modified:<undo|keep>,<undo|keep>)"
    ))
}

fn load_protocol(cfg: &CliConfig, stderr: &mut String) -> CliResult<Protocol> {
    match &cfg.protocol {
        None => Ok(healey_protocol(cfg.frame, cfg.angles)),
        Some(ProtocolSource::Builtin(name)) => parse_builtin(name, cfg.angles),
        Some(ProtocolSource::File(path)) => {
            if cfg.angles_overridden {
                return input("--angle applies to builtin protocols; edit the `angles` header of a protocol file instead");
            }
            load_file(path, stderr)
        }
    }
}

fn load_file(path: &Path, stderr: &mut String) -> CliResult<Protocol> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Input(format!("cannot read {}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "protocol".to_string());
    let outcome = parse_named(&text, &name);
    for d in &outcome.diagnostics {
        let _ = writeln!(stderr, "{}:{d}", path.display());
    }
    match outcome.document {
        Some(doc) => Ok(doc.to_protocol()),
        None => {
            let n = outcome.errors().count();
            input(format!("{}: {n} error(s); protocol rejected", path.display()))
        }
    }
}

fn check_valid(p: &Protocol) -> CliResult<()> {
    let violations = validate(p);
    if violations.is_empty() {
        Ok(())
    } else {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        input(format!("protocol `{}` is invalid: {}", p.name, list.join("; ")))
    }
}

fn sampling_mode(cfg: &CliConfig, default: RunMode) -> CliResult<RunMode> {
    match cfg.mode.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None => Ok(default),
        Some("unitary") => Ok(RunMode::Unitary),
        Some("hybrid") => Ok(RunMode::Hybrid),
        Some("projective") => Ok(RunMode::Projective),
        Some(other) => input(format!("unknown --mode `{other}` (expected unitary, hybrid or projective)")),
    }
}

fn mode_name(m: RunMode) -> &'static str {
    match m {
        RunMode::Unitary => "unitary",
        RunMode::Hybrid => "hybrid",
        RunMode::Projective => "projective",
    }
}

// ---- run ----

#[derive(Serialize)]
struct RegisterOut {
    agent: &'static str,
    ready: f64,
    up: f64,
    down: f64,
}

#[derive(Serialize)]
struct UnitaryRunOut {
    protocol: String,
    mode: &'static str,
    angles: AnglesOut,
    registers: Vec<RegisterOut>,
}

#[derive(Serialize)]
struct OutcomeOut {
    step: usize,
    agent: &'static str,
    outcome: String,
}

#[derive(Serialize)]
struct SampledRunOut {
    protocol: String,
    mode: &'static str,
    seed: u64,
    angles: AnglesOut,
    outcomes: Vec<OutcomeOut>,
}

/// `run`: register read probabilities of the final state in unitary mode,
/// or one sampled outcome record otherwise.
pub fn cmd_run(cfg: &CliConfig) -> Execution {
    finish(|stderr| cmd_run_inner(cfg, stderr))
}

fn cmd_run_inner(cfg: &CliConfig, stderr: &mut String) -> CliResult<CommandOutput> {
    let p = load_protocol(cfg, stderr)?;
    check_valid(&p)?;
    let mode = sampling_mode(cfg, RunMode::Unitary)?;
    if mode == RunMode::Unitary {
        let final_state = unitary_trajectory(&p)?
            .pop()
            .ok_or_else(|| CliError::Internal("empty trajectory".to_string()))?;
        let mut registers = Vec::new();
        for agent in AgentId::ALL {
            let [ready, up, down] = register_probabilities(&final_state, agent)?;
            registers.push(RegisterOut {
                agent: agent.name(),
                ready: probability(ready)?,
                up: probability(up)?,
                down: probability(down)?,
            });
        }
        let stdout = match cfg.output {
            OutputFormat::Json => to_json(&UnitaryRunOut {
                protocol: p.name.clone(),
                mode: mode_name(mode),
                angles: angles_out(&p.angles)?,
                registers,
            })?,
            OutputFormat::Csv => {
                let mut s = String::from("agent,ready,up,down\n");
                for r in &registers {
                    let _ = writeln!(s, "{},{},{},{}", r.agent, r.ready, r.up, r.down);
                }
                s
            }
        };
        return Ok(CommandOutput::ok(stdout));
    }
    let mut rng = StreamSplitter::new(cfg.seed).run_stream(0);
    let record = run(&p, mode, &mut rng)?;
    let outcomes: Vec<OutcomeOut> = record
        .entries
        .iter()
        .map(|e| OutcomeOut {
            step: e.step,
            agent: e.agent.name(),
            outcome: e.outcome.to_string(),
        })
        .collect();
    let stdout = match cfg.output {
        OutputFormat::Json => to_json(&SampledRunOut {
            protocol: p.name.clone(),
            mode: mode_name(mode),
            seed: cfg.seed,
            angles: angles_out(&p.angles)?,
            outcomes,
        })?,
        OutputFormat::Csv => {
            let mut s = String::from("step,agent,outcome\n");
            for o in &outcomes {
                let _ = writeln!(s, "{},{},{}", o.step, o.agent, o.outcome);
            }
            s
        }
    };
    Ok(CommandOutput::ok(stdout))
}

// ---- sample ----

#[derive(Serialize)]
struct SampleOut {
    protocol: String,
    mode: &'static str,
    seed: u64,
    n_runs: u64,
    counts: BTreeMap<String, u64>,
}

/// `sample`: joint outcome counts over `n_runs` seeded runs.
pub fn cmd_sample(cfg: &CliConfig) -> Execution {
    finish(|stderr| cmd_sample_inner(cfg, stderr))
}

fn cmd_sample_inner(cfg: &CliConfig, stderr: &mut String) -> CliResult<CommandOutput> {
    let p = load_protocol(cfg, stderr)?;
    check_valid(&p)?;
    let mode = sampling_mode(cfg, RunMode::Hybrid)?;
    if mode == RunMode::Unitary {
        return input("sample needs a sampling mode (hybrid or projective)");
    }
    let streams = StreamSplitter::new(cfg.seed).subdomain(SAMPLE_DOMAIN);
    let compiled = CompiledProtocol::new(&p)?;
    let counts = (0..cfg.n_runs)
        .into_par_iter()
        .map(|i| -> CliResult<BTreeMap<String, u64>> {
            let record = compiled.run(mode, &mut streams.run_stream(i))?;
            let key: Vec<String> = record
                .entries
                .iter()
                .map(|e| format!("{}={}", e.agent.name(), e.outcome))
                .collect();
            Ok(BTreeMap::from([(key.join(" "), 1)]))
        })
        .try_reduce(BTreeMap::new, |mut a, b| {
            for (k, v) in b {
                *a.entry(k).or_insert(0) += v;
            }
            Ok(a)
        })?;
    let stdout = match cfg.output {
        OutputFormat::Json => to_json(&SampleOut {
            protocol: p.name.clone(),
            mode: mode_name(mode),
            seed: cfg.seed,
            n_runs: cfg.n_runs,
            counts,
        })?,
        OutputFormat::Csv => {
            let mut s = String::from("outcomes,count\n");
            for (k, v) in &counts {
                let _ = writeln!(s, "{k},{v}");
            }
            s
        }
    };
    Ok(CommandOutput::ok(stdout))
}

// ---- correlate / chsh ----

fn table_source(cfg: &CliConfig) -> CliResult<TableSource> {
    match cfg.mode.as_deref().map(str::to_ascii_lowercase).as_deref() {
        None | Some("exact") => Ok(TableSource::Exact),
        Some("monte-carlo") | Some("montecarlo") | Some("mc") => Ok(TableSource::MonteCarlo),
        Some("sequential") => Ok(TableSource::Sequential),
        Some("frame") => Ok(TableSource::Frame),
        Some(other) => input(format!(
            "unknown --mode `{other}` (expected exact, monte-carlo, sequential or frame)"
        )),
    }
}

fn reject_protocol(cfg: &CliConfig, what: &str) -> CliResult<()> {
    if cfg.protocol.is_some() {
        return input(format!("{what} works on the built-in table; --protocol/--builtin are not accepted"));
    }
    Ok(())
}

fn table_for(cfg: &CliConfig, source: TableSource) -> CliResult<CorrelationTable> {
    let streams = StreamSplitter::new(cfg.seed);
    Ok(match source {
        TableSource::Exact => build_table(cfg.angles, cfg.n_runs, &streams, TableMode::Exact)?,
        TableSource::MonteCarlo => build_table(cfg.angles, cfg.n_runs, &streams, TableMode::MonteCarlo)?,
        TableSource::Sequential => {
            sequential_projective_table(cfg.angles, cfg.n_runs, &streams.subdomain(SEQUENTIAL_DOMAIN))?
        }
        TableSource::Frame => frame_table(cfg.frame, cfg.angles, DEFAULT_READY_VALUE)?.table,
    })
}

#[derive(Serialize)]
struct RowOut {
    pair: String,
    value: f64,
    stderr: f64,
    n_runs: u64,
    source: &'static str,
}

fn source_name(s: Source) -> &'static str {
    match s {
        Source::Exact => "exact",
        Source::MonteCarlo => "monte-carlo",
        Source::Assigned => "assigned",
    }
}

fn rows_out(table: &CorrelationTable) -> CliResult<Vec<RowOut>> {
    table
        .chsh_rows()
        .map(|(pair, e)| {
            Ok(RowOut {
                pair: pair.name(),
                value: round_sig(e.value)?,
                stderr: round_sig(e.stderr)?,
                n_runs: e.n_runs,
                source: source_name(e.source),
            })
        })
        .collect()
}

fn rows_csv(rows: &[RowOut]) -> String {
    let mut s = String::from("pair,value,stderr,n_runs,source\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.pair, r.value, r.stderr, r.n_runs, r.source);
    }
    s
}

#[derive(Serialize)]
struct TableOut {
    mode: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<&'static str>,
    seed: u64,
    angles: AnglesOut,
    pairs: Vec<RowOut>,
}

fn frame_name(f: Frame) -> &'static str {
    match f {
        Frame::AliceFrame => "alice",
        Frame::BobFrame => "bob",
    }
}

/// `correlate`: the four CHSH correlations as CSV or JSON.
pub fn cmd_correlate(cfg: &CliConfig) -> Execution {
    finish(|_| cmd_correlate_output(cfg))
}

fn cmd_correlate_output(cfg: &CliConfig) -> CliResult<CommandOutput> {
    reject_protocol(cfg, "correlate")?;
    let source = table_source(cfg)?;
    let table = table_for(cfg, source)?;
    let pairs = rows_out(&table)?;
    let stdout = match cfg.output {
        OutputFormat::Csv => rows_csv(&pairs),
        OutputFormat::Json => to_json(&TableOut {
            mode: source.name(),
            frame: (source == TableSource::Frame).then(|| frame_name(cfg.frame)),
            seed: cfg.seed,
            angles: angles_out(&cfg.angles)?,
            pairs,
        })?,
    };
    Ok(CommandOutput::ok(stdout))
}

#[derive(Serialize)]
struct SubstitutionOut {
    pair: String,
    value: f64,
    justification: &'static str,
}

#[derive(Serialize)]
struct ChshOut {
    mode: &'static str,
    seed: u64,
    angles: AnglesOut,
    correlations_used: Vec<RowOut>,
    substitutions: Vec<SubstitutionOut>,
    value: f64,
    combined_stderr: f64,
    classical_bound: f64,
    tsirelson_bound: f64,
    classification: &'static str,
}

fn classification_name(c: Classification) -> &'static str {
    match c {
        Classification::Violation => "violation",
        Classification::NoViolation => "no-violation",
    }
}

/// Builds the report the `chsh` command prints.
pub fn chsh_report(cfg: &CliConfig) -> std::result::Result<ChshReport, CliError> {
    reject_protocol(cfg, "chsh")?;
    let source = table_source(cfg)?;
    let table = table_for(cfg, source)?;
    Ok(substitute_and_evaluate(&table, &cfg.zero_pairs)?)
}

/// `chsh`: the CHSH value with optional zero substitutions.
pub fn cmd_chsh(cfg: &CliConfig) -> Execution {
    finish(|_| cmd_chsh_output(cfg))
}

fn cmd_chsh_output(cfg: &CliConfig) -> CliResult<CommandOutput> {
    let source = table_source(cfg)?;
    let report = chsh_report(cfg)?;
    let subs = report
        .substitutions
        .iter()
        .map(|s| {
            Ok(SubstitutionOut {
                pair: s.pair.name(),
                value: round_sig(s.value)?,
                justification: match s.justification {
                    crate::chsh::Justification::FrameZeroAlice => "frame-zero-alice",
                    crate::chsh::Justification::FrameZeroBob => "frame-zero-bob",
                    crate::chsh::Justification::None => "none",
                },
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let out = ChshOut {
        mode: source.name(),
        seed: cfg.seed,
        angles: angles_out(&cfg.angles)?,
        correlations_used: rows_out(&report.correlations_used)?,
        substitutions: subs,
        value: round_sig(report.value)?,
        combined_stderr: round_sig(report.combined_stderr)?,
        classical_bound: round_sig(report.classical_bound)?,
        tsirelson_bound: round_sig(report.tsirelson_bound)?,
        classification: classification_name(report.classification),
    };
    let stdout = match cfg.output {
        OutputFormat::Json => to_json(&out)?,
        OutputFormat::Csv => {
            let zeros: Vec<String> = out.substitutions.iter().map(|s| s.pair.clone()).collect();
            format!(
                "value,combined_stderr,classical_bound,tsirelson_bound,classification,zeros\n{},{},{},{},{},{}\n",
                out.value,
                out.combined_stderr,
                out.classical_bound,
                out.tsirelson_bound,
                out.classification,
                zeros.join(";")
            )
        }
    };
    Ok(CommandOutput::ok(stdout))
}

// ---- check ----

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check_grid() -> Vec<AngleSet> {
    let pts = [0.0, 0.7, FRAC_PI_2 + 0.3];
    let mut out = Vec::new();
    for &a in &pts {
        for &b in &pts {
            for &c in &pts {
                for &d in &pts {
                    if let Ok(g) = AngleSet::from_radians(a, b + 0.1, c + 0.2, d + 0.3) {
                        out.push(g);
                    }
                }
            }
        }
    }
    out
}

fn max_over<F>(grid: &[AngleSet], f: F) -> CliResult<f64>
where
    F: Fn(&AngleSet) -> CliResult<f64> + Sync + Send,
{
    let vals = grid.par_iter().map(f).collect::<CliResult<Vec<f64>>>()?;
    Ok(vals.into_iter().fold(0.0, f64::max))
}

fn check_item(name: &'static str, measured: CliResult<f64>, tol: f64) -> CheckResult {
    match measured {
        Ok(dev) => CheckResult {
            name,
            passed: dev <= tol,
            detail: format!("max deviation {dev:.3e} (tolerance {tol:.0e})"),
        },
        Err(CliError::Input(m)) | Err(CliError::Internal(m)) => CheckResult {
            name,
            passed: false,
            detail: m,
        },
    }
}

/// The invariant suite. Only the determinism check uses `seed`.
pub fn run_checks(seed: u64) -> Vec<CheckResult> {
    let grid = check_grid();
    let mut out = Vec::new();

    out.push(check_item(
        "unitarity",
        (|| {
            let mut worst: f64 = 0.0;
            for agent in AgentId::ALL {
                for k in 0..8 {
                    let theta = Angle::new(k as f64 * FRAC_PI_4 + 0.05)?;
                    worst = worst.max(measurement_unitary(agent, theta).matrix().unitarity_deviation());
                }
            }
            Ok(worst)
        })(),
        1e-10,
    ));

    out.push(check_item(
        "born-correlation",
        (|| {
            let mut worst: f64 = 0.0;
            for i in 0..12 {
                for j in 0..12 {
                    let (x, y) = (i as f64 * 0.53, j as f64 * 0.47);
                    let e = exact_pair_correlation(Angle::new(x)?, Angle::new(y)?);
                    worst = worst.max((e + (x - y).cos()).abs());
                }
            }
            Ok(worst)
        })(),
        1e-12,
    ));

    out.push(check_item(
        "undo-identity",
        max_over(&grid, |g| {
            let mut worst: f64 = 0.0;
            for frame in [Frame::AliceFrame, Frame::BobFrame] {
                let p = healey_protocol(frame, *g);
                let overlap = inner(&state_after(&p, 1)?, &state_after(&p, 3)?)?;
                worst = worst.max((overlap.norm() - 1.0).abs());
            }
            Ok(worst)
        }),
        1e-12,
    ));

    out.push(check_item(
        "frame-equivalence",
        max_over(&grid, |g| {
            let last = |f: Frame| -> CliResult<_> {
                unitary_trajectory(&healey_protocol(f, *g))?
                    .pop()
                    .ok_or_else(|| CliError::Internal("empty trajectory".to_string()))
            };
            Ok(last(Frame::AliceFrame)?.max_abs_diff(&last(Frame::BobFrame)?)?)
        }),
        1e-12,
    ));

    out.push(check_item(
        "registers-erased",
        (|| {
            let mut worst: f64 = 0.0;
            for frame in [Frame::AliceFrame, Frame::BobFrame] {
                let fin = unitary_trajectory(&healey_protocol(frame, AngleSet::canonical()))?
                    .pop()
                    .ok_or_else(|| CliError::Internal("empty trajectory".to_string()))?;
                for friend in [AgentId::Carol, AgentId::Dan] {
                    worst = worst.max((register_probabilities(&fin, friend)?[0] - 1.0).abs());
                }
            }
            Ok(worst)
        })(),
        1e-12,
    ));

    out.push(check_item(
        "chsh-tsirelson",
        (|| {
            let t = build_table(AngleSet::canonical(), 1, &StreamSplitter::new(0), TableMode::Exact)?;
            Ok((chsh_value(&t)? - TSIRELSON_BOUND).abs())
        })(),
        1e-12,
    ));

    let lhv = lhv_bound();
    out.push(CheckResult {
        name: "lhv-bound=2",
        passed: lhv == 2.0,
        detail: format!("maximum over 16 deterministic assignments = {lhv}"),
    });

    out.push({
        let text = protofile::serialize(&healey_protocol(Frame::AliceFrame, AngleSet::canonical()));
        let ok = parse_named(&text, "healey-alice")
            .document
            .map(|d| protofile::serialize_document(&d) == text)
            .unwrap_or(false);
        CheckResult {
            name: "protofile-round-trip",
            passed: ok,
            detail: if ok { "byte-exact".to_string() } else { "mismatch".to_string() },
        }
    });

    out.push({
        let streams = StreamSplitter::new(seed);
        let run_once = || build_table(AngleSet::canonical(), 2_000, &streams, TableMode::MonteCarlo);
        let ok = match (run_once(), run_once()) {
            (Ok(x), Ok(y)) => x == y,
            _ => false,
        };
        CheckResult {
            name: "seeded-determinism",
            passed: ok,
            detail: if ok { "repeat runs identical".to_string() } else { "repeat runs differ".to_string() },
        }
    });

    out
}

/// `check`: one `PASS`/`FAIL` line per invariant; exit 0 iff all pass.
pub fn cmd_check(cfg: &CliConfig) -> Execution {
    finish(|_| cmd_check_output(cfg))
}

fn cmd_check_output(cfg: &CliConfig) -> CliResult<CommandOutput> {
    let results = run_checks(cfg.seed);
    let mut stdout = String::new();
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(stdout, "{status} {}: {}", r.name, r.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    let mut stderr = String::new();
    if !failed.is_empty() {
        let _ = writeln!(stderr, "failed checks: {}", failed.join(", "));
    }
    Ok(CommandOutput {
        code: if failed.is_empty() { 0 } else { 1 },
        stdout,
        stderr,
    })
}

fn finish(f: impl FnOnce(&mut String) -> CliResult<CommandOutput>) -> Execution {
    let mut stderr = String::new();
    match catch_unwind(AssertUnwindSafe(|| f(&mut stderr))) {
        Ok(Ok(out)) => Execution {
            code: out.code,
            stdout: out.stdout,
            stderr: stderr + &out.stderr,
        },
        Ok(Err(CliError::Input(m))) => Execution {
            code: 2,
            stdout: String::new(),
            stderr: format!("{stderr}error: {m}\n"),
        },
        Ok(Err(CliError::Internal(m))) => Execution {
            code: 1,
            stdout: String::new(),
            stderr: format!("{stderr}internal error: {m}\n"),
        },
        Err(_) => Execution {
            code: 1,
            stdout: String::new(),
            stderr: "internal error: unexpected failure\n".to_string(),
        },
    }
}
