//! Line-oriented text format for protocols (`.wfp`).
//!
//! ```text
//! # comment
//! angles a=0 b=pi/4 c=pi/2 d=3pi/4
//! prepare singlet
//! umeasure Dan system2 angle=d
//! umeasure Carol system1 angle=c
//! undo Alice Carol
//! smeasure Alice system1 angle=a
//! undo Bob Dan
//! smeasure Bob system2 angle=b
//! ```
//!
//! One step per line. Keywords and agent names are case-insensitive. An
//! angle is a bound name (`a`..`d`), decimal radians, `<k>pi/<n>`, or
//! `<x>deg`. `pread <agent>` reads a register and `pmeasure` measures a
//! spin projectively. Problems are reported as positioned diagnostics,
//! never as panics.

use std::f64::consts::PI;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::agents::{AgentId, Angle};
use crate::protocol::{validate, AngleSet, Protocol, ProtocolStep, Violation};
use crate::qstate::FactorLabel;

/// Largest denominator tried when writing an angle as a multiple of π.
const MAX_PI_DENOMINATOR: u64 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    /// 1-based line number.
    pub line: usize,
    /// 1-based column, counted in characters.
    pub column: usize,
    pub message: String,
    pub severity: Severity,
}

impl Diagnostic {
    fn error(line: usize, column: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            column,
            message: message.into(),
            severity: Severity::Error,
        }
    }

    fn warning(line: usize, column: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            column,
            message: message.into(),
            severity: Severity::Warning,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{}:{}: {}: {}", self.line, self.column, sev, self.message)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParsedStep {
    pub step: ProtocolStep,
    pub line: usize,
    pub column: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolDocument {
    pub source_name: String,
    pub declared_angles: AngleSet,
    pub steps: Vec<ParsedStep>,
}

impl ProtocolDocument {
    pub fn to_protocol(&self) -> Protocol {
        Protocol {
            name: self.source_name.clone(),
            steps: self.steps.iter().map(|s| s.step).collect(),
            angles: self.declared_angles,
        }
    }

    /// Same angle bindings and step sequence, ignoring source positions.
    pub fn structurally_eq(&self, other: &ProtocolDocument) -> bool {
        self.declared_angles == other.declared_angles
            && self.steps.len() == other.steps.len()
            && self
                .steps
                .iter()
                .zip(&other.steps)
                .all(|(a, b)| a.step == b.step)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParseOutcome {
    /// Present iff there are no `Error` diagnostics.
    pub document: Option<ProtocolDocument>,
    pub diagnostics: Vec<Diagnostic>,
}

impl ParseOutcome {
    pub fn errors(&self) -> impl Iterator<Item = &Diagnostic> {
        self.diagnostics
            .iter()
            .filter(|d| d.severity == Severity::Error)
    }
}

struct Token<'a> {
    text: &'a str,
    column: usize,
}

fn tokenize(line: &str) -> Vec<Token<'_>> {
    let content = match line.find('#') {
        Some(i) => &line[..i],
        None => line,
    };
    let mut tokens = Vec::new();
    let mut start: Option<(usize, usize)> = None;
    for (col, (byte, ch)) in content.char_indices().enumerate() {
        if ch.is_whitespace() {
            if let Some((b, c)) = start.take() {
                tokens.push(Token {
                    text: &content[b..byte],
                    column: c + 1,
                });
            }
        } else if start.is_none() {
            start = Some((byte, col));
        }
    }
    if let Some((b, c)) = start {
        tokens.push(Token {
            text: &content[b..],
            column: c + 1,
        });
    }
    tokens
}

/// Parses an angle literal: decimal radians, `<k>pi/<n>` or `<x>deg`.
pub fn parse_angle_expr(expr: &str) -> Result<Angle, String> {
    let lower = expr.to_ascii_lowercase();
    if let Some(deg) = lower.strip_suffix("deg") {
        let v: f64 = parse_decimal(deg).ok_or_else(|| format!("bad degree value `{expr}`"))?;
        return Angle::new(v * PI / 180.0).map_err(|e| e.to_string());
    }
    if let Some(pos) = lower.find("pi") {
        let (k_text, rest) = (&lower[..pos], &lower[pos + 2..]);
        let k: i64 = match k_text {
            "" | "+" => 1,
            "-" => -1,
            t => t
                .parse()
                .map_err(|_| format!("bad multiplier `{t}` in `{expr}`"))?,
        };
        let n: u64 = match rest {
            "" => 1,
            r => {
                let digits = r
                    .strip_prefix('/')
                    .ok_or_else(|| format!("expected `/<n>` after `pi` in `{expr}`"))?;
                digits
                    .parse()
                    .map_err(|_| format!("bad denominator `{digits}` in `{expr}`"))?
            }
        };
        if n == 0 {
            return Err(format!("zero denominator in `{expr}`"));
        }
        return Angle::pi_fraction(k, n).map_err(|e| e.to_string());
    }
    let v = parse_decimal(&lower).ok_or_else(|| format!("bad angle `{expr}`"))?;
    Angle::new(v).map_err(|e| e.to_string())
}

/// Finite decimal number, without the `inf`/`nan` spellings `f64` accepts.
fn parse_decimal(text: &str) -> Option<f64> {
    if text.is_empty()
        || !text
            .chars()
            .all(|c| c.is_ascii_digit() || matches!(c, '.' | '-' | '+' | 'e' | 'E'))
    {
        return None;
    }
    text.parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Canonical text for an angle: an exact multiple of π when one with a
/// small denominator reproduces the same bits, decimal radians otherwise.
pub fn format_angle(angle: Angle) -> String {
    let r = angle.radians();
    for n in 1..=MAX_PI_DENOMINATOR {
        let k = (r * n as f64 / PI).round() as i64;
        if Angle::pi_fraction(k, n).map(|a| a == angle).unwrap_or(false) {
            return match (k, n) {
                (0, _) => "0".to_string(),
                (1, 1) => "pi".to_string(),
                (k, 1) => format!("{k}pi"),
                (1, n) => format!("pi/{n}"),
                (k, n) => format!("{k}pi/{n}"),
            };
        }
    }
    format!("{r}")
}

fn parse_agent(text: &str) -> Option<AgentId> {
    AgentId::ALL
        .into_iter()
        .find(|a| a.name().eq_ignore_ascii_case(text))
}

fn system_name(label: FactorLabel) -> &'static str {
    match label {
        FactorLabel::S1 => "system1",
        _ => "system2",
    }
}

fn parse_system(text: &str) -> Option<FactorLabel> {
    if text.eq_ignore_ascii_case("system1") {
        Some(FactorLabel::S1)
    } else if text.eq_ignore_ascii_case("system2") {
        Some(FactorLabel::S2)
    } else {
        None
    }
}

fn binding_index(name: &str) -> Option<usize> {
    match name.to_ascii_lowercase().as_str() {
        "a" => Some(0),
        "b" => Some(1),
        "c" => Some(2),
        "d" => Some(3),
        _ => None,
    }
}

const BINDING_NAMES: [&str; 4] = ["a", "b", "c", "d"];

struct Header {
    line: usize,
    values: [Option<Angle>; 4],
}

struct LineCtx<'a> {
    line_no: usize,
    line_len: usize,
    tokens: Vec<Token<'a>>,
}

impl LineCtx<'_> {
    fn end_column(&self) -> usize {
        self.line_len + 1
    }
}

struct Parser<'a> {
    diagnostics: Vec<Diagnostic>,
    header: Option<Header>,
    lines: Vec<LineCtx<'a>>,
}

impl<'a> Parser<'a> {
    fn new(text: &'a str) -> Self {
        let lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| LineCtx {
                line_no: i + 1,
                line_len: l.chars().count(),
                tokens: tokenize(l),
            })
            .collect();
        Self {
            diagnostics: Vec::new(),
            header: None,
            lines,
        }
    }

    fn err(&mut self, line: usize, column: usize, msg: impl Into<String>) {
        self.diagnostics.push(Diagnostic::error(line, column, msg));
    }

    fn parse_header(&mut self, idx: usize, seen_step: bool) {
        let ctx = &self.lines[idx];
        let line = ctx.line_no;
        let head_col = ctx.tokens[0].column;
        let mut errors = Vec::new();
        if let Some(h) = &self.header {
            errors.push((
                head_col,
                format!("duplicate `angles` header (first declared on line {})", h.line),
            ));
            for (col, msg) in errors {
                self.err(line, col, msg);
            }
            return;
        }
        let mut values = [None; 4];
        for tok in &ctx.tokens[1..] {
            let Some((key, expr)) = tok.text.split_once('=') else {
                errors.push((tok.column, format!("expected `<name>=<angle>`, found `{}`", tok.text)));
                continue;
            };
            let Some(i) = binding_index(key) else {
                errors.push((tok.column, format!("unknown angle name `{key}` (expected a, b, c or d)")));
                continue;
            };
            if values[i].is_some() {
                errors.push((tok.column, format!("angle `{}` bound twice", BINDING_NAMES[i])));
                continue;
            }
            let expr_col = tok.column + key.chars().count() + 1;
            match parse_angle_expr(expr) {
                Ok(a) => values[i] = Some(a),
                Err(msg) => errors.push((expr_col, msg)),
            }
        }
        let missing: Vec<&str> = (0..4)
            .filter(|&i| values[i].is_none())
            .map(|i| BINDING_NAMES[i])
            .collect();
        if !missing.is_empty() && errors.is_empty() {
            errors.push((head_col, format!("`angles` header does not bind {}", missing.join(", "))));
        }
        if seen_step {
            self.diagnostics.push(Diagnostic::warning(
                line,
                head_col,
                "`angles` header appears after the first step",
            ));
        }
        for (col, msg) in errors {
            self.err(line, col, msg);
        }
        self.header = Some(Header { line, values });
    }

    fn resolve_angle(&self, tok: &Token<'_>) -> Result<Angle, (usize, String)> {
        let Some(expr) = tok
            .text
            .split_once('=')
            .filter(|(k, _)| k.eq_ignore_ascii_case("angle"))
            .map(|(_, v)| v)
        else {
            return Err((tok.column, format!("expected `angle=<expr>`, found `{}`", tok.text)));
        };
        let col = tok.column + "angle=".len();
        if let Some(i) = binding_index(expr) {
            return match &self.header {
                Some(h) => h.values[i].ok_or((col, format!("angle `{}` is not bound", BINDING_NAMES[i]))),
                None => Err((col, format!("angle `{}` used without an `angles` header", BINDING_NAMES[i]))),
            };
        }
        parse_angle_expr(expr).map_err(|m| (col, m))
    }

    fn agent_at(&self, ctx: &LineCtx<'_>, i: usize, what: &str) -> Result<AgentId, (usize, String)> {
        let tok = ctx
            .tokens
            .get(i)
            .ok_or((ctx.end_column(), format!("missing {what}")))?;
        parse_agent(tok.text).ok_or((tok.column, format!("unknown agent `{}`", tok.text)))
    }

    fn parse_step(&self, ctx: &LineCtx<'_>) -> Result<ProtocolStep, (usize, String)> {
        let directive = ctx.tokens[0].text.to_ascii_lowercase();
        let arity = match directive.as_str() {
            "prepare" => 2,
            "umeasure" | "smeasure" | "pmeasure" => 4,
            "undo" => 3,
            "pread" => 2,
            _ => {
                return Err((
                    ctx.tokens[0].column,
                    format!("unknown directive `{}`", ctx.tokens[0].text),
                ))
            }
        };
        if let Some(extra) = ctx.tokens.get(arity) {
            return Err((extra.column, format!("unexpected `{}` after {directive} step", extra.text)));
        }
        match directive.as_str() {
            "prepare" => match ctx.tokens.get(1) {
                Some(t) if t.text.eq_ignore_ascii_case("singlet") => Ok(ProtocolStep::PrepareSinglet),
                Some(t) => Err((t.column, format!("unknown preparation `{}` (only `singlet`)", t.text))),
                None => Err((ctx.end_column(), "missing preparation kind".to_string())),
            },
            "umeasure" | "smeasure" | "pmeasure" => {
                let agent = self.agent_at(ctx, 1, "agent")?;
                let sys_tok = ctx
                    .tokens
                    .get(2)
                    .ok_or((ctx.end_column(), "missing system".to_string()))?;
                let system = parse_system(sys_tok.text).ok_or((
                    sys_tok.column,
                    format!("unknown system `{}` (expected system1 or system2)", sys_tok.text),
                ))?;
                if system != agent.system() {
                    return Err((
                        sys_tok.column,
                        format!("{agent} measures {}, not {}", system_name(agent.system()), system_name(system)),
                    ));
                }
                let angle_tok = ctx
                    .tokens
                    .get(3)
                    .ok_or((ctx.end_column(), "missing `angle=<expr>`".to_string()))?;
                let angle = self.resolve_angle(angle_tok)?;
                Ok(match directive.as_str() {
                    "umeasure" => ProtocolStep::FriendMeasure { agent, angle },
                    "smeasure" => ProtocolStep::SuperMeasure { agent, angle },
                    _ => ProtocolStep::ProjectiveSpin { agent, angle },
                })
            }
            "undo" => {
                let actor = self.agent_at(ctx, 1, "superobserver")?;
                let friend = self.agent_at(ctx, 2, "friend")?;
                Ok(ProtocolStep::Undo { actor, friend })
            }
            _ => Ok(ProtocolStep::ProjectiveRead {
                agent: self.agent_at(ctx, 1, "agent")?,
            }),
        }
    }
}

/// Parses `text`; `source_name` becomes the protocol name.
pub fn parse_named(text: &str, source_name: &str) -> ParseOutcome {
    let mut parser = Parser::new(text);

    let mut seen_step = false;
    for idx in 0..parser.lines.len() {
        let Some(first) = parser.lines[idx].tokens.first() else {
            continue;
        };
        if first.text.eq_ignore_ascii_case("angles") {
            parser.parse_header(idx, seen_step);
        } else {
            seen_step = true;
        }
    }

    let mut steps = Vec::new();
    let mut step_errors = Vec::new();
    for ctx in &parser.lines {
        let Some(first) = ctx.tokens.first() else {
            continue;
        };
        if first.text.eq_ignore_ascii_case("angles") {
            continue;
        }
        match parser.parse_step(ctx) {
            Ok(step) => steps.push(ParsedStep {
                step,
                line: ctx.line_no,
                column: first.column,
            }),
            Err((col, msg)) => step_errors.push(Diagnostic::error(ctx.line_no, col, msg)),
        }
    }
    parser.diagnostics.extend(step_errors);

    let declared = match &parser.header {
        Some(h) => h.values,
        None => {
            parser.err(1, 1, "missing `angles` header");
            [None; 4]
        }
    };

    let has_errors = parser
        .diagnostics
        .iter()
        .any(|d| d.severity == Severity::Error);
    let mut document = None;
    if !has_errors {
        let [Some(a), Some(b), Some(c), Some(d)] = declared else {
            unreachable!("header errors are reported above");
        };
        let doc = ProtocolDocument {
            source_name: source_name.to_string(),
            declared_angles: AngleSet::new(a, b, c, d),
            steps,
        };
        for v in validate(&doc.to_protocol()) {
            parser.diagnostics.push(violation_diagnostic(&v, &doc));
        }
        if !parser.diagnostics.iter().any(|d| d.severity == Severity::Error) {
            document = Some(doc);
        }
    }
    parser
        .diagnostics
        .sort_by_key(|d| (d.line, d.column, d.severity == Severity::Warning));
    ParseOutcome {
        document,
        diagnostics: parser.diagnostics,
    }
}

pub fn parse(text: &str) -> ParseOutcome {
    parse_named(text, "protocol")
}

fn violation_diagnostic(v: &Violation, doc: &ProtocolDocument) -> Diagnostic {
    let pos = |step: usize| {
        doc.steps
            .get(step)
            .map(|s| (s.line, s.column))
            .unwrap_or((1, 1))
    };
    let (line, column) = match v.step() {
        Some(step) => pos(step),
        None => doc.steps.first().map(|s| (s.line, s.column)).unwrap_or((1, 1)),
    };
    let message = match v {
        Violation::UndoAfterRead {
            friend,
            read_step,
            undo_step,
        } => format!(
            "UndoAfterRead: undo of {friend}'s measurement on line {} follows the projective read on line {}; a read record cannot be erased unitarily",
            pos(*undo_step).0,
            pos(*read_step).0
        ),
        other => other.to_string(),
    };
    Diagnostic::error(line, column, message)
}

/// Parses and converts to a [`Protocol`], or returns the diagnostics.
pub fn parse_protocol(text: &str, source_name: &str) -> Result<Protocol, Vec<Diagnostic>> {
    let outcome = parse_named(text, source_name);
    match outcome.document {
        Some(doc) => Ok(doc.to_protocol()),
        None => Err(outcome.diagnostics),
    }
}

fn angle_ref(angle: Angle, agent: AgentId, angles: &AngleSet) -> String {
    if angles.for_agent(agent) == angle {
        let i = match agent {
            AgentId::Alice => 0,
            AgentId::Bob => 1,
            AgentId::Carol => 2,
            AgentId::Dan => 3,
        };
        return BINDING_NAMES[i].to_string();
    }
    let bound = [angles.a, angles.b, angles.c, angles.d];
    match bound.iter().position(|&b| b == angle) {
        Some(i) => BINDING_NAMES[i].to_string(),
        None => format_angle(angle),
    }
}

fn step_line(step: &ProtocolStep, angles: &AngleSet) -> String {
    let measure = |kw: &str, agent: AgentId, angle: Angle| {
        format!(
            "{kw} {agent} {} angle={}",
            system_name(agent.system()),
            angle_ref(angle, agent, angles)
        )
    };
    match *step {
        ProtocolStep::PrepareSinglet => "prepare singlet".to_string(),
        ProtocolStep::FriendMeasure { agent, angle } => measure("umeasure", agent, angle),
        ProtocolStep::SuperMeasure { agent, angle } => measure("smeasure", agent, angle),
        ProtocolStep::ProjectiveSpin { agent, angle } => measure("pmeasure", agent, angle),
        ProtocolStep::Undo { actor, friend } => format!("undo {actor} {friend}"),
        ProtocolStep::ProjectiveRead { agent } => format!("pread {agent}"),
    }
}

/// Canonical text form of a protocol.
pub fn serialize(p: &Protocol) -> String {
    let g = &p.angles;
    let mut out = format!(
        "angles a={} b={} c={} d={}\n",
        format_angle(g.a),
        format_angle(g.b),
        format_angle(g.c),
        format_angle(g.d)
    );
    for step in &p.steps {
        out.push_str(&step_line(step, g));
        out.push('\n');
    }
    out
}

pub fn serialize_document(doc: &ProtocolDocument) -> String {
    serialize(&doc.to_protocol())
}
