//! Correlation functions between the four measurement settings.
//!
//! Every value here is computed from the full six-factor state, either as a
//! Born-rule expectation or by sampling runs of a protocol. The closed form
//! `−cos(x − y)` only appears in tests.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{initial_state, spin_matrix, AgentId, Angle, Outcome};
use crate::error::{Result, SimError};
use crate::protocol::{
    healey_protocol, modified_protocol, unitary_trajectory, CompiledProtocol, AngleSet, BranchChoice, Frame,
    Protocol, ProtocolStep, RunMode,
};
use crate::qstate::{expectation, register, CMatrix, FactorLabel, Ket, LocalOperator};
use crate::rng::StreamSplitter;

/// Measurement setting: `a`, `c` on particle 1, `b`, `d` on particle 2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setting {
    A,
    B,
    C,
    D,
}

impl Setting {
    pub fn agent(self) -> AgentId {
        match self {
            Setting::A => AgentId::Alice,
            Setting::B => AgentId::Bob,
            Setting::C => AgentId::Carol,
            Setting::D => AgentId::Dan,
        }
    }

    pub fn angle(self, angles: &AngleSet) -> Angle {
        angles.for_agent(self.agent())
    }

    pub fn letter(self) -> char {
        match self {
            Setting::A => 'a',
            Setting::B => 'b',
            Setting::C => 'c',
            Setting::D => 'd',
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Unordered pair of distinct settings, stored particle-1 side first when
/// the pair straddles both particles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct PairId {
    first: Setting,
    second: Setting,
}

impl PairId {
    pub const AB: PairId = PairId {
        first: Setting::A,
        second: Setting::B,
    };
    pub const CB: PairId = PairId {
        first: Setting::C,
        second: Setting::B,
    };
    pub const CD: PairId = PairId {
        first: Setting::C,
        second: Setting::D,
    };
    pub const AD: PairId = PairId {
        first: Setting::A,
        second: Setting::D,
    };

    /// The four pairs entering the CHSH combination, in report order.
    pub const CHSH_ORDER: [PairId; 4] = [PairId::AB, PairId::CB, PairId::CD, PairId::AD];

    pub fn new(x: Setting, y: Setting) -> Result<Self> {
        if x == y {
            return Err(SimError::DegeneratePair(x));
        }
        let side = |s: Setting| s.agent().system() == FactorLabel::S1;
        let (first, second) = match (side(x), side(y)) {
            (false, true) => (y, x),
            (true, true) | (false, false) if y < x => (y, x),
            _ => (x, y),
        };
        Ok(Self { first, second })
    }

    pub fn first(self) -> Setting {
        self.first
    }

    pub fn second(self) -> Setting {
        self.second
    }

    /// Choices in the modified protocol that expose this pair.
    pub fn choices(self) -> Option<(BranchChoice, BranchChoice)> {
        let alice = match self.first {
            Setting::A => BranchChoice::Undo,
            Setting::C => BranchChoice::KeepAndRead,
            _ => return None,
        };
        let bob = match self.second {
            Setting::B => BranchChoice::Undo,
            Setting::D => BranchChoice::KeepAndRead,
            _ => return None,
        };
        Some((alice, bob))
    }

    pub fn from_choices(alice: BranchChoice, bob: BranchChoice) -> Self {
        let first = match alice {
            BranchChoice::Undo => Setting::A,
            BranchChoice::KeepAndRead => Setting::C,
        };
        let second = match bob {
            BranchChoice::Undo => Setting::B,
            BranchChoice::KeepAndRead => Setting::D,
        };
        Self { first, second }
    }

    pub fn name(self) -> String {
        format!("{}{}", self.first, self.second)
    }
}

impl fmt::Display for PairId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.first, self.second)
    }
}

impl From<PairId> for String {
    fn from(p: PairId) -> String {
        p.name()
    }
}

impl std::str::FromStr for PairId {
    type Err = String;

    /// Two distinct letters from `abcd`, in either order.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let setting = |c: char| match c.to_ascii_lowercase() {
            'a' => Some(Setting::A),
            'b' => Some(Setting::B),
            'c' => Some(Setting::C),
            'd' => Some(Setting::D),
            _ => None,
        };
        let mut chars = s.chars();
        match (chars.next().and_then(setting), chars.next().and_then(setting), chars.next()) {
            (Some(x), Some(y), None) => PairId::new(x, y).map_err(|e| e.to_string()),
            _ => Err(format!("not a pair name: `{s}`")),
        }
    }
}

impl TryFrom<String> for PairId {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Exact,
    MonteCarlo,
    Assigned,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub value: f64,
    pub stderr: f64,
    pub n_runs: u64,
    pub source: Source,
}

impl CorrelationEntry {
    pub fn exact(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            n_runs: 0,
            source: Source::Exact,
        }
    }

    pub fn assigned(value: f64) -> Self {
        Self {
            value,
            stderr: 0.0,
            n_runs: 0,
            source: Source::Assigned,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub entries: BTreeMap<PairId, CorrelationEntry>,
}

impl CorrelationTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, pair: PairId, entry: CorrelationEntry) {
        self.entries.insert(pair, entry);
    }

    pub fn get(&self, pair: PairId) -> Result<&CorrelationEntry> {
        self.entries.get(&pair).ok_or(SimError::MissingPair(pair))
    }

    pub fn value(&self, pair: PairId) -> Result<f64> {
        Ok(self.get(pair)?.value)
    }

    /// The CHSH pairs that are present, in report order.
    pub fn chsh_rows(&self) -> impl Iterator<Item = (PairId, &CorrelationEntry)> {
        PairId::CHSH_ORDER
            .into_iter()
            .filter_map(|p| self.entries.get(&p).map(|e| (p, e)))
    }

    /// `|value| ≤ 1 + 3·stderr` for every entry.
    pub fn is_consistent(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.value.abs() <= 1.0 + 3.0 * e.stderr + 1e-12)
    }
}

fn spin_pair_observable(theta_x: Angle, theta_y: Angle) -> LocalOperator {
    LocalOperator::new(
        vec![FactorLabel::S1, FactorLabel::S2],
        spin_matrix(theta_x).kron(&spin_matrix(theta_y)),
        true,
    )
    .expect("σ⊗σ is unitary")
}

/// `⟨ψ(0)| σ(θx) ⊗ σ(θy) |ψ(0)⟩`, with `θx` on particle 1.
pub fn exact_pair_correlation(theta_x: Angle, theta_y: Angle) -> f64 {
    pair_correlation_in(&initial_state(), theta_x, theta_y)
        .expect("spin observables are Hermitian")
}

/// Spin correlation on an arbitrary state of the canonical space.
pub fn pair_correlation_in(ket: &Ket, theta_x: Angle, theta_y: Angle) -> Result<f64> {
    expectation(&spin_pair_observable(theta_x, theta_y), ket)
}

/// Exact correlation of a pair of settings on the singlet.
pub fn exact_setting_correlation(pair: PairId, angles: &AngleSet) -> f64 {
    exact_pair_correlation(pair.first.angle(angles), pair.second.angle(angles))
}

/// Default value assigned to an empty register in reported numbers.
pub const DEFAULT_READY_VALUE: f64 = 0.0;

fn register_value_diag(ready_value: f64) -> [num_complex::Complex64; 3] {
    let mut d = [num_complex::Complex64::new(0.0, 0.0); 3];
    d[register::READY] = ready_value.into();
    d[register::SAW_UP] = 1.0.into();
    d[register::SAW_DOWN] = (-1.0).into();
    d
}

/// `⟨Z_x ⊗ Z_y⟩` where `Z` reads a register as `+1` (SawUp), `−1` (SawDown)
/// or `ready_value` (Ready).
pub fn register_correlation(ket: &Ket, x: AgentId, y: AgentId, ready_value: f64) -> Result<f64> {
    if x == y {
        return Err(SimError::SameAgent(x));
    }
    let zx = CMatrix::diagonal(&register_value_diag(ready_value));
    let zy = CMatrix::diagonal(&register_value_diag(ready_value));
    let obs = LocalOperator::new(vec![x.register(), y.register()], zx.kron(&zy), false)?;
    expectation(&obs, ket)
}

/// Whether the agent's register is `Ready` with certainty.
pub fn register_is_ready(ket: &Ket, agent: AgentId) -> Result<bool> {
    let p = crate::agents::register_probabilities(ket, agent)?;
    Ok((p[0] - 1.0).abs() <= 1e-12)
}

/// Whether the agent's register holds a record with certainty.
pub fn register_has_record(ket: &Ket, agent: AgentId) -> Result<bool> {
    let p = crate::agents::register_probabilities(ket, agent)?;
    Ok(p[0].abs() <= 1e-12)
}

/// Correlations a single frame's unitary description assigns to each pair.
///
/// For a pair whose registers both hold records at some step, the value is
/// the register correlation at the first such step. Otherwise the records
/// never coexist in this frame and the value is the register correlation of
/// the final state with `ready_value` in the empty register (source
/// `Assigned`).
pub fn frame_table(frame: Frame, angles: AngleSet, ready_value: f64) -> Result<FrameTable> {
    let p = healey_protocol(frame, angles);
    let states = unitary_trajectory(&p)?;
    let mut table = CorrelationTable::new();
    let mut steps = BTreeMap::new();
    for pair in PairId::CHSH_ORDER {
        let (x, y) = (pair.first.agent(), pair.second.agent());
        let mut found = None;
        for (k, s) in states.iter().enumerate() {
            if register_has_record(s, x)? && register_has_record(s, y)? {
                found = Some(k);
                break;
            }
        }
        match found {
            Some(k) => {
                let v = register_correlation(&states[k], x, y, ready_value)?;
                table.insert(pair, CorrelationEntry::exact(v));
                steps.insert(pair, Some(k));
            }
            None => {
                let last = states.last().expect("trajectory is non-empty");
                let v = register_correlation(last, x, y, ready_value)?;
                table.insert(pair, CorrelationEntry::assigned(v));
                steps.insert(pair, None);
            }
        }
    }
    Ok(FrameTable {
        frame,
        table,
        record_steps: steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameTable {
    pub frame: Frame,
    pub table: CorrelationTable,
    /// Step at which each pair's records coexist, if they ever do.
    pub record_steps: BTreeMap<PairId, Option<usize>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub n_runs: u64,
}

impl Estimate {
    /// Mean of `n` products in `{−1, +1}` summing to `sum`, with standard
    /// error `sqrt((1 − mean²)/n)`.
    pub fn from_sum(sum: i64, n: u64) -> Self {
        let value = sum as f64 / n as f64;
        let stderr = ((1.0 - value * value).max(0.0) / n as f64).sqrt();
        Self {
            value,
            stderr,
            n_runs: n,
        }
    }

    pub fn entry(self) -> CorrelationEntry {
        CorrelationEntry {
            value: self.value,
            stderr: self.stderr,
            n_runs: self.n_runs,
            source: Source::MonteCarlo,
        }
    }
}

fn side_outcomes(entries: &[crate::protocol::OutcomeEntry]) -> Result<(i64, i64)> {
    let mut s1 = None;
    let mut s2 = None;
    for e in entries {
        let sign = e.outcome.sign().ok_or(SimError::UnexpectedReady {
            agent: e.agent,
            step: e.step,
        })? as i64;
        let slot = if e.agent.system() == FactorLabel::S1 {
            &mut s1
        } else {
            &mut s2
        };
        if slot.replace(sign).is_some() {
            return Err(SimError::OutcomeCount {
                expected: 2,
                got: entries.len(),
            });
        }
    }
    match (s1, s2) {
        (Some(x), Some(y)) => Ok((x, y)),
        _ => Err(SimError::OutcomeCount {
            expected: 2,
            got: entries.len(),
        }),
    }
}

/// Product of the two superobserver-level outcomes of one hybrid run.
fn hybrid_product(p: &CompiledProtocol, streams: &StreamSplitter, run_index: u64) -> Result<i64> {
    let record = p.run(RunMode::Hybrid, &mut streams.run_stream(run_index))?;
    let (x, y) = side_outcomes(&record.entries)?;
    Ok(x * y)
}

/// Monte Carlo estimate of the pair exposed by `choices`, from `n_runs`
/// hybrid-mode runs of the modified protocol. Run `i` uses stream `i` of
/// `streams`, so the result does not depend on how runs are scheduled.
pub fn mc_estimate_pair(
    choices: (BranchChoice, BranchChoice),
    angles: AngleSet,
    n_runs: u64,
    streams: &StreamSplitter,
) -> Result<Estimate> {
    if n_runs == 0 {
        return Err(SimError::NoRuns);
    }
    let p = CompiledProtocol::new(&modified_protocol(choices.0, choices.1, angles))?;
    let sum = (0..n_runs)
        .into_par_iter()
        .map(|i| hybrid_product(&p, streams, i))
        .try_reduce(|| 0i64, |a, b| Ok(a + b))?;
    Ok(Estimate::from_sum(sum, n_runs))
}

/// Per-run random choices: in every run Alice and Bob each pick a branch
/// with probability ½, and each run contributes to the pair it exposes.
pub fn mc_random_choices(
    angles: AngleSet,
    n_runs: u64,
    streams: &StreamSplitter,
) -> Result<CorrelationTable> {
    use rand::Rng;
    if n_runs == 0 {
        return Err(SimError::NoRuns);
    }
    let protocols: BTreeMap<PairId, CompiledProtocol> = PairId::CHSH_ORDER
        .into_iter()
        .map(|pair| {
            let (a, b) = pair.choices().expect("CHSH pairs straddle both particles");
            Ok((pair, CompiledProtocol::new(&modified_protocol(a, b, angles))?))
        })
        .collect::<Result<_>>()?;
    let per_run: Vec<(PairId, i64)> = (0..n_runs)
        .into_par_iter()
        .map(|i| {
            let mut rng = streams.run_stream(i);
            let pick = |b: bool| {
                if b {
                    BranchChoice::Undo
                } else {
                    BranchChoice::KeepAndRead
                }
            };
            let alice = pick(rng.gen::<bool>());
            let bob = pick(rng.gen::<bool>());
            let pair = PairId::from_choices(alice, bob);
            let p = &protocols[&pair];
            let record = p.run(RunMode::Hybrid, &mut rng)?;
            let (x, y) = side_outcomes(&record.entries)?;
            Ok((pair, x * y))
        })
        .collect::<Result<_>>()?;
    let mut sums: BTreeMap<PairId, (i64, u64)> = BTreeMap::new();
    for (pair, prod) in per_run {
        let slot = sums.entry(pair).or_default();
        slot.0 += prod;
        slot.1 += 1;
    }
    let mut table = CorrelationTable::new();
    for (pair, (sum, n)) in sums {
        table.insert(pair, Estimate::from_sum(sum, n).entry());
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TableMode {
    Exact,
    MonteCarlo,
}

/// The four CHSH pairs, exactly or by Monte Carlo with `n_runs_per_pair`
/// runs each. Pair `k` in [`PairId::CHSH_ORDER`] samples from subdomain `k`.
pub fn build_table(
    angles: AngleSet,
    n_runs_per_pair: u64,
    streams: &StreamSplitter,
    mode: TableMode,
) -> Result<CorrelationTable> {
    let mut table = CorrelationTable::new();
    for (k, pair) in PairId::CHSH_ORDER.into_iter().enumerate() {
        let entry = match mode {
            TableMode::Exact => CorrelationEntry::exact(exact_setting_correlation(pair, &angles)),
            TableMode::MonteCarlo => {
                let choices = pair.choices().expect("CHSH pairs straddle both particles");
                mc_estimate_pair(choices, angles, n_runs_per_pair, &streams.subdomain(k as u64))?
                    .entry()
            }
        };
        table.insert(pair, entry);
    }
    Ok(table)
}

/// The original step order continued with the state-update rule: Dan,
/// Carol, Alice and Bob each measure and collapse, with no undo.
pub fn sequential_projective_protocol(angles: AngleSet) -> Protocol {
    use ProtocolStep::*;
    Protocol {
        name: "sequential-projective".to_string(),
        steps: vec![
            PrepareSinglet,
            FriendMeasure {
                agent: AgentId::Dan,
                angle: angles.d,
            },
            FriendMeasure {
                agent: AgentId::Carol,
                angle: angles.c,
            },
            SuperMeasure {
                agent: AgentId::Alice,
                angle: angles.a,
            },
            SuperMeasure {
                agent: AgentId::Bob,
                angle: angles.b,
            },
        ],
        angles,
    }
}

/// Four definite outcomes `[a, b, c, d]` from one projective run.
pub fn sequential_outcomes(angles: AngleSet, streams: &StreamSplitter, run_index: u64) -> Result<[i8; 4]> {
    let p = CompiledProtocol::new(&sequential_projective_protocol(angles))?;
    compiled_sequential_outcomes(&p, streams, run_index)
}

fn compiled_sequential_outcomes(
    p: &CompiledProtocol,
    streams: &StreamSplitter,
    run_index: u64,
) -> Result<[i8; 4]> {
    let record = p.run(RunMode::Projective, &mut streams.run_stream(run_index))?;
    if record.entries.len() != 4 {
        return Err(SimError::OutcomeCount {
            expected: 4,
            got: record.entries.len(),
        });
    }
    let mut out = [0i8; 4];
    for (slot, agent) in out.iter_mut().zip([AgentId::Alice, AgentId::Bob, AgentId::Carol, AgentId::Dan]) {
        let e = record
            .entries
            .iter()
            .find(|e| e.agent == agent)
            .ok_or(SimError::OutcomeCount {
                expected: 4,
                got: record.entries.len(),
            })?;
        *slot = match e.outcome {
            Outcome::Ready => {
                return Err(SimError::UnexpectedReady {
                    agent,
                    step: e.step,
                })
            }
            o => o.sign().expect("definite outcome"),
        };
    }
    Ok(out)
}

/// All four correlations estimated from the same runs, each run measuring
/// every setting projectively in sequence.
pub fn sequential_projective_table(
    angles: AngleSet,
    n_runs: u64,
    streams: &StreamSplitter,
) -> Result<CorrelationTable> {
    if n_runs == 0 {
        return Err(SimError::NoRuns);
    }
    let idx = |s: Setting| match s {
        Setting::A => 0,
        Setting::B => 1,
        Setting::C => 2,
        Setting::D => 3,
    };
    let p = CompiledProtocol::new(&sequential_projective_protocol(angles))?;
    let sums = (0..n_runs)
        .into_par_iter()
        .map(|i| {
            let o = compiled_sequential_outcomes(&p, streams, i)?;
            let mut prods = [0i64; 4];
            for (slot, pair) in prods.iter_mut().zip(PairId::CHSH_ORDER) {
                *slot = (o[idx(pair.first)] * o[idx(pair.second)]) as i64;
            }
            Ok(prods)
        })
        .try_reduce(
            || [0i64; 4],
            |a, b| Ok([a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]),
        )?;
    let mut table = CorrelationTable::new();
    for (sum, pair) in sums.into_iter().zip(PairId::CHSH_ORDER) {
        table.insert(pair, Estimate::from_sum(sum, n_runs).entry());
    }
    Ok(table)
}


#[cfg(test)]
mod pair_name_tests {
    use super::*;

    #[test]
    fn pair_names_round_trip_through_json() {
        for p in PairId::CHSH_ORDER {
            let s = serde_json::to_string(&p).unwrap();
            assert_eq!(s, format!("\"{}\"", p.name()));
            assert_eq!(serde_json::from_str::<PairId>(&s).unwrap(), p);
        }
        assert_eq!("bc".parse::<PairId>().unwrap(), PairId::CB);
        assert!("aa".parse::<PairId>().is_err());
        assert!("abc".parse::<PairId>().is_err());
        let table = build_table(AngleSet::canonical(), 1, &StreamSplitter::new(0), TableMode::Exact).unwrap();
        let json = serde_json::to_string(&table).unwrap();
        assert_eq!(serde_json::from_str::<CorrelationTable>(&json).unwrap(), table);
    }
}
