//! Protocol steps, the built-in frame orderings, validation and execution.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{
    initial_state, measure_spin, measurement_unitary, read_register, AgentId, Angle, Outcome,
};
use crate::error::{Result, SimError};
use crate::qstate::{apply, Ket, LocalOperator, INVARIANT_TOL};

/// Measurement directions `a` (Alice), `b` (Bob), `c` (Carol), `d` (Dan).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngleSet {
    pub a: Angle,
    pub b: Angle,
    pub c: Angle,
    pub d: Angle,
}

impl AngleSet {
    pub fn new(a: Angle, b: Angle, c: Angle, d: Angle) -> Self {
        Self { a, b, c, d }
    }

    pub fn from_radians(a: f64, b: f64, c: f64, d: f64) -> Result<Self> {
        Ok(Self {
            a: Angle::new(a)?,
            b: Angle::new(b)?,
            c: Angle::new(c)?,
            d: Angle::new(d)?,
        })
    }

    /// `(0, π/4, π/2, 3π/4)`, which reaches `2√2` in the CHSH combination.
    pub fn canonical() -> Self {
        Self {
            a: Angle::pi_fraction(0, 1).expect("finite"),
            b: Angle::pi_fraction(1, 4).expect("finite"),
            c: Angle::pi_fraction(1, 2).expect("finite"),
            d: Angle::pi_fraction(3, 4).expect("finite"),
        }
    }

    /// The direction each agent measures along by default.
    pub fn for_agent(&self, agent: AgentId) -> Angle {
        match agent {
            AgentId::Alice => self.a,
            AgentId::Bob => self.b,
            AgentId::Carol => self.c,
            AgentId::Dan => self.d,
        }
    }

    /// Every angle shifted by `phi`.
    pub fn shifted(&self, phi: f64) -> Result<Self> {
        Self::from_radians(
            self.a.radians() + phi,
            self.b.radians() + phi,
            self.c.radians() + phi,
            self.d.radians() + phi,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ProtocolStep {
    PrepareSinglet,
    /// Unitary measurement by a friend into their register.
    FriendMeasure { agent: AgentId, angle: Angle },
    /// Measurement by a superobserver into their own register.
    SuperMeasure { agent: AgentId, angle: Angle },
    /// `actor` reverses `friend`'s most recent measurement.
    Undo { actor: AgentId, friend: AgentId },
    /// Projective read-out of `agent`'s register.
    ProjectiveRead { agent: AgentId },
    /// Projective spin measurement on `agent`'s particle, no register involved.
    ProjectiveSpin { agent: AgentId, angle: Angle },
}

impl ProtocolStep {
    pub fn is_projective(&self) -> bool {
        matches!(
            self,
            ProtocolStep::ProjectiveRead { .. } | ProtocolStep::ProjectiveSpin { .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Frame {
    AliceFrame,
    BobFrame,
}

/// What a superobserver does with their friend's record in the modified
/// protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BranchChoice {
    /// Erase the friend's record, then measure their own direction.
    Undo,
    /// Leave the record and read it out.
    KeepAndRead,
}

impl BranchChoice {
    pub const BOTH: [BranchChoice; 2] = [BranchChoice::Undo, BranchChoice::KeepAndRead];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunMode {
    /// Every measurement is a dilation; nothing collapses.
    Unitary,
    /// Friends act unitarily; superobserver measurements and reads collapse.
    Hybrid,
    /// Every measurement collapses.
    Projective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub name: String,
    pub steps: Vec<ProtocolStep>,
    pub angles: AngleSet,
}

/// Original four-agent protocol in the step order seen from one frame.
pub fn healey_protocol(frame: Frame, angles: AngleSet) -> Protocol {
    use ProtocolStep::*;
    let carol = FriendMeasure {
        agent: AgentId::Carol,
        angle: angles.c,
    };
    let dan = FriendMeasure {
        agent: AgentId::Dan,
        angle: angles.d,
    };
    let alice = [
        Undo {
            actor: AgentId::Alice,
            friend: AgentId::Carol,
        },
        SuperMeasure {
            agent: AgentId::Alice,
            angle: angles.a,
        },
    ];
    let bob = [
        Undo {
            actor: AgentId::Bob,
            friend: AgentId::Dan,
        },
        SuperMeasure {
            agent: AgentId::Bob,
            angle: angles.b,
        },
    ];
    let (name, steps) = match frame {
        Frame::AliceFrame => (
            "healey-alice",
            [&[PrepareSinglet, dan, carol][..], &alice, &bob].concat(),
        ),
        Frame::BobFrame => (
            "healey-bob",
            [&[PrepareSinglet, carol, dan][..], &bob, &alice].concat(),
        ),
    };
    Protocol {
        name: name.to_string(),
        steps,
        angles,
    }
}

fn choice_name(c: BranchChoice) -> &'static str {
    match c {
        BranchChoice::Undo => "undo",
        BranchChoice::KeepAndRead => "keep",
    }
}

/// The choice-based protocol with both choices fixed.
///
/// Friends measure as in the Alice-frame ordering. Each superobserver then
/// either erases and measures (`Undo`) or reads the friend's register
/// (`KeepAndRead`), exposing `a`/`c` on particle 1 and `b`/`d` on particle 2.
pub fn modified_protocol(
    alice_choice: BranchChoice,
    bob_choice: BranchChoice,
    angles: AngleSet,
) -> Protocol {
    use ProtocolStep::*;
    let mut steps = vec![
        PrepareSinglet,
        FriendMeasure {
            agent: AgentId::Dan,
            angle: angles.d,
        },
        FriendMeasure {
            agent: AgentId::Carol,
            angle: angles.c,
        },
    ];
    for (actor, choice) in [(AgentId::Alice, alice_choice), (AgentId::Bob, bob_choice)] {
        let friend = actor.partner();
        match choice {
            BranchChoice::Undo => {
                steps.push(Undo { actor, friend });
                steps.push(SuperMeasure {
                    agent: actor,
                    angle: angles.for_agent(actor),
                });
            }
            BranchChoice::KeepAndRead => steps.push(ProjectiveRead { agent: friend }),
        }
    }
    Protocol {
        name: format!(
            "modified:{},{}",
            choice_name(alice_choice),
            choice_name(bob_choice)
        ),
        steps,
        angles,
    }
}

/// Structural problems found by [`validate`]. Step indices are positions in
/// `Protocol::steps`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Violation {
    MissingPreparation,
    PreparationNotFirst { step: usize },
    DuplicatePreparation { step: usize },
    /// A register that was read projectively cannot be erased unitarily.
    UndoAfterRead {
        friend: AgentId,
        read_step: usize,
        undo_step: usize,
    },
    UndoWithoutMeasurement { friend: AgentId, step: usize },
    /// `actor` must be the superobserver whose friend is `friend`.
    UndoByWrongAgent {
        actor: AgentId,
        friend: AgentId,
        step: usize,
    },
    WrongRole {
        agent: AgentId,
        step: usize,
        expected: Role,
    },
    /// Measuring into a register that still holds a record.
    RegisterOccupied { agent: AgentId, step: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Friend,
    Superobserver,
}

impl Violation {
    /// Step the violation is reported at, if any.
    pub fn step(&self) -> Option<usize> {
        match *self {
            Violation::MissingPreparation => None,
            Violation::PreparationNotFirst { step }
            | Violation::DuplicatePreparation { step }
            | Violation::UndoWithoutMeasurement { step, .. }
            | Violation::UndoByWrongAgent { step, .. }
            | Violation::WrongRole { step, .. }
            | Violation::RegisterOccupied { step, .. } => Some(step),
            Violation::UndoAfterRead { undo_step, .. } => Some(undo_step),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Violation::MissingPreparation => "MissingPreparation",
            Violation::PreparationNotFirst { .. } => "PreparationNotFirst",
            Violation::DuplicatePreparation { .. } => "DuplicatePreparation",
            Violation::UndoAfterRead { .. } => "UndoAfterRead",
            Violation::UndoWithoutMeasurement { .. } => "UndoWithoutMeasurement",
            Violation::UndoByWrongAgent { .. } => "UndoByWrongAgent",
            Violation::WrongRole { .. } => "WrongRole",
            Violation::RegisterOccupied { .. } => "RegisterOccupied",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MissingPreparation => {
                write!(f, "MissingPreparation: protocol must start with a singlet preparation")
            }
            Violation::PreparationNotFirst { step } => {
                write!(f, "PreparationNotFirst: step {step} is a preparation but not the first step")
            }
            Violation::DuplicatePreparation { step } => {
                write!(f, "DuplicatePreparation: second preparation at step {step}")
            }
            Violation::UndoAfterRead {
                friend,
                read_step,
                undo_step,
            } => write!(
                f,
                "UndoAfterRead: step {undo_step} undoes {friend}'s measurement, but that register was read projectively at step {read_step}"
            ),
            Violation::UndoWithoutMeasurement { friend, step } => write!(
                f,
                "UndoWithoutMeasurement: step {step} undoes {friend}'s measurement, but {friend} has no measurement to undo"
            ),
            Violation::UndoByWrongAgent { actor, friend, step } => write!(
                f,
                "UndoByWrongAgent: step {step}: {actor} cannot undo {friend}'s measurement"
            ),
            Violation::WrongRole {
                agent,
                step,
                expected,
            } => write!(f, "WrongRole: step {step}: {agent} is not a {expected:?}"),
            Violation::RegisterOccupied { agent, step } => write!(
                f,
                "RegisterOccupied: step {step}: {agent}'s register still holds a record"
            ),
        }
    }
}

#[derive(Clone, Copy)]
enum RegisterState {
    Ready,
    /// Holds a unitary record.
    Recorded,
    /// Read out projectively at `step`.
    Read { step: usize },
}

/// Lists every structural violation; an empty list means the protocol can run.
pub fn validate(p: &Protocol) -> Vec<Violation> {
    let mut out = Vec::new();
    if p.steps.first() != Some(&ProtocolStep::PrepareSinglet) {
        out.push(Violation::MissingPreparation);
    }
    let mut registers: HashMap<AgentId, RegisterState> = HashMap::new();
    let mut seen_prepare = false;
    for (step, s) in p.steps.iter().enumerate() {
        match *s {
            ProtocolStep::PrepareSinglet => {
                if seen_prepare {
                    out.push(Violation::DuplicatePreparation { step });
                } else if step != 0 {
                    out.push(Violation::PreparationNotFirst { step });
                }
                seen_prepare = true;
            }
            ProtocolStep::FriendMeasure { agent, .. } | ProtocolStep::SuperMeasure { agent, .. } => {
                let friend_step = matches!(s, ProtocolStep::FriendMeasure { .. });
                if friend_step != agent.is_friend() {
                    out.push(Violation::WrongRole {
                        agent,
                        step,
                        expected: if friend_step {
                            Role::Friend
                        } else {
                            Role::Superobserver
                        },
                    });
                }
                if let Some(RegisterState::Recorded | RegisterState::Read { .. }) =
                    registers.get(&agent)
                {
                    out.push(Violation::RegisterOccupied { agent, step });
                }
                registers.insert(agent, RegisterState::Recorded);
            }
            ProtocolStep::Undo { actor, friend } => {
                if !friend.is_friend() {
                    out.push(Violation::WrongRole {
                        agent: friend,
                        step,
                        expected: Role::Friend,
                    });
                } else if actor.partner() != friend {
                    out.push(Violation::UndoByWrongAgent { actor, friend, step });
                }
                match registers.get(&friend) {
                    Some(RegisterState::Read { step: read_step }) => {
                        out.push(Violation::UndoAfterRead {
                            friend,
                            read_step: *read_step,
                            undo_step: step,
                        })
                    }
                    Some(RegisterState::Recorded) => {
                        registers.insert(friend, RegisterState::Ready);
                    }
                    Some(RegisterState::Ready) | None => {
                        out.push(Violation::UndoWithoutMeasurement { friend, step })
                    }
                }
            }
            ProtocolStep::ProjectiveRead { agent } => {
                registers.insert(agent, RegisterState::Read { step });
            }
            ProtocolStep::ProjectiveSpin { .. } => {}
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomeEntry {
    pub step: usize,
    pub agent: AgentId,
    pub outcome: Outcome,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeRecord {
    pub entries: Vec<OutcomeEntry>,
    pub final_state: Option<Ket>,
}

impl OutcomeRecord {
    /// First recorded outcome of `agent`.
    pub fn outcome_of(&self, agent: AgentId) -> Option<Outcome> {
        self.entries
            .iter()
            .find(|e| e.agent == agent)
            .map(|e| e.outcome)
    }
}

fn ensure_valid(p: &Protocol) -> Result<()> {
    let violations = validate(p);
    if violations.is_empty() {
        Ok(())
    } else {
        let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        Err(SimError::InvalidProtocol(text.join("; ")))
    }
}

/// A validated protocol with its prepared state and step operators built
/// once, for running many times.
#[derive(Clone, Debug)]
pub struct CompiledProtocol {
    protocol: Protocol,
    initial: Ket,
    /// Dilation applied by each measurement or undo step.
    ops: Vec<Option<LocalOperator>>,
}

impl CompiledProtocol {
    pub fn new(p: &Protocol) -> Result<Self> {
        ensure_valid(p)?;
        let mut last_angle: HashMap<AgentId, Angle> = HashMap::new();
        let ops = p
            .steps
            .iter()
            .map(|s| match *s {
                ProtocolStep::FriendMeasure { agent, angle }
                | ProtocolStep::SuperMeasure { agent, angle } => {
                    last_angle.insert(agent, angle);
                    Some(measurement_unitary(agent, angle))
                }
                ProtocolStep::Undo { friend, .. } => {
                    Some(measurement_unitary(friend, last_angle[&friend]))
                }
                _ => None,
            })
            .collect();
        Ok(Self {
            protocol: p.clone(),
            initial: initial_state(),
            ops,
        })
    }

    pub fn protocol(&self) -> &Protocol {
        &self.protocol
    }

    /// Same contract as [`run`].
    pub fn run<R: Rng + ?Sized>(&self, mode: RunMode, rng: &mut R) -> Result<OutcomeRecord> {
        let mut record = self.execute(mode, rng, |_, _| {})?;
        if mode != RunMode::Unitary {
            record.final_state = None;
        }
        Ok(record)
    }

    /// Executes step by step, calling `observe` with the state after every step.
    fn execute<R: Rng + ?Sized>(
        &self,
        mode: RunMode,
        rng: &mut R,
        mut observe: impl FnMut(usize, &Ket),
    ) -> Result<OutcomeRecord> {
        let mut state = self.initial.clone();
        let mut entries = Vec::new();
        for (step, s) in self.protocol.steps.iter().enumerate() {
            let next = match *s {
                ProtocolStep::PrepareSinglet => state,
                ProtocolStep::FriendMeasure { agent, .. } | ProtocolStep::SuperMeasure { agent, .. } => {
                    let after = apply(self.op(step), &state)?;
                    let collapses = match mode {
                        RunMode::Unitary => false,
                        RunMode::Hybrid => agent.is_superobserver(),
                        RunMode::Projective => true,
                    };
                    if collapses {
                        let (outcome, collapsed) = read_register(&after, agent, rng)?;
                        if outcome == Outcome::Ready {
                            return Err(SimError::UnexpectedReady { agent, step });
                        }
                        entries.push(OutcomeEntry {
                            step,
                            agent,
                            outcome,
                        });
                        collapsed
                    } else {
                        after
                    }
                }
                ProtocolStep::Undo { .. } => apply(self.op(step), &state)?,
                ProtocolStep::ProjectiveRead { agent } => {
                    if mode == RunMode::Unitary {
                        return Err(SimError::ProjectiveStepInUnitaryMode { step });
                    }
                    let (outcome, collapsed) = read_register(&state, agent, rng)?;
                    entries.push(OutcomeEntry {
                        step,
                        agent,
                        outcome,
                    });
                    collapsed
                }
                ProtocolStep::ProjectiveSpin { agent, angle } => {
                    if mode == RunMode::Unitary {
                        return Err(SimError::ProjectiveStepInUnitaryMode { step });
                    }
                    let (outcome, collapsed) = measure_spin(&state, agent, angle, rng)?;
                    entries.push(OutcomeEntry {
                        step,
                        agent,
                        outcome,
                    });
                    collapsed
                }
            };
            observe(step, &next);
            state = next;
        }
        Ok(OutcomeRecord {
            entries,
            final_state: Some(state),
        })
    }

    fn op(&self, step: usize) -> &LocalOperator {
        self.ops[step]
            .as_ref()
            .expect("measurement and undo steps carry an operator")
    }
}

fn execute<R: Rng + ?Sized>(
    p: &Protocol,
    mode: RunMode,
    rng: &mut R,
    observe: impl FnMut(usize, &Ket),
) -> Result<OutcomeRecord> {
    CompiledProtocol::new(p)?.execute(mode, rng, observe)
}

/// Runs `p` once. In `Unitary` mode nothing is sampled and the final state
/// is returned; in sampling modes only the outcome entries are kept.
pub fn run<R: Rng + ?Sized>(p: &Protocol, mode: RunMode, rng: &mut R) -> Result<OutcomeRecord> {
    let mut record = execute(p, mode, rng, |_, _| {})?;
    if mode != RunMode::Unitary {
        record.final_state = None;
    }
    Ok(record)
}

/// Like [`run`], but always keeps the final state.
pub fn run_keep_state<R: Rng + ?Sized>(
    p: &Protocol,
    mode: RunMode,
    rng: &mut R,
) -> Result<OutcomeRecord> {
    execute(p, mode, rng, |_, _| {})
}

struct NoRandomness;

impl rand::RngCore for NoRandomness {
    fn next_u32(&mut self) -> u32 {
        unreachable!("unitary execution draws no randomness")
    }
    fn next_u64(&mut self) -> u64 {
        unreachable!("unitary execution draws no randomness")
    }
    fn fill_bytes(&mut self, _: &mut [u8]) {
        unreachable!("unitary execution draws no randomness")
    }
    fn try_fill_bytes(&mut self, _: &mut [u8]) -> std::result::Result<(), rand::Error> {
        unreachable!("unitary execution draws no randomness")
    }
}

fn reject_projective(p: &Protocol) -> Result<()> {
    match p.steps.iter().position(ProtocolStep::is_projective) {
        Some(step) => Err(SimError::ProjectiveStepInUnitaryMode { step }),
        None => Ok(()),
    }
}

/// All states of a unitary run: index 0 is the prepared state, index `k`
/// the state after the `k`-th step following preparation.
pub fn unitary_trajectory(p: &Protocol) -> Result<Vec<Ket>> {
    reject_projective(p)?;
    let mut states = Vec::with_capacity(p.steps.len());
    execute(p, RunMode::Unitary, &mut NoRandomness, |_, k| {
        states.push(k.clone())
    })?;
    debug_assert!(states.iter().all(|k| (k.norm() - 1.0).abs() <= INVARIANT_TOL));
    Ok(states)
}

/// Exact state after the first `step_index` steps following preparation
/// (`0` is the prepared singlet). Unitary protocols only.
pub fn state_after(p: &Protocol, step_index: usize) -> Result<Ket> {
    reject_projective(p)?;
    ensure_valid(p)?;
    let max = p.steps.len() - 1;
    if step_index > max {
        return Err(SimError::StepIndexOutOfRange {
            index: step_index,
            max,
        });
    }
    let prefix = Protocol {
        name: p.name.clone(),
        steps: p.steps[..=step_index].to_vec(),
        angles: p.angles,
    };
    let record = execute(&prefix, RunMode::Unitary, &mut NoRandomness, |_, _| {})?;
    Ok(record.final_state.expect("prefix contains the preparation"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::{friend_unitary, register_probabilities, super_unitary};
    use crate::qstate::{inner, EXACT_TOL};
    use crate::rng::StreamSplitter;
    use ProtocolStep::*;

    fn angles() -> AngleSet {
        AngleSet::from_radians(0.3, 1.9, 4.4, 2.6).unwrap()
    }

    #[test]
    fn alice_frame_order() {
        let g = angles();
        let p = healey_protocol(Frame::AliceFrame, g);
        assert_eq!(
            p.steps,
            vec![
                PrepareSinglet,
                FriendMeasure { agent: AgentId::Dan, angle: g.d },
                FriendMeasure { agent: AgentId::Carol, angle: g.c },
                Undo { actor: AgentId::Alice, friend: AgentId::Carol },
                SuperMeasure { agent: AgentId::Alice, angle: g.a },
                Undo { actor: AgentId::Bob, friend: AgentId::Dan },
                SuperMeasure { agent: AgentId::Bob, angle: g.b },
            ]
        );
    }

    #[test]
    fn bob_frame_order() {
        let g = angles();
        let p = healey_protocol(Frame::BobFrame, g);
        assert_eq!(
            p.steps,
            vec![
                PrepareSinglet,
                FriendMeasure { agent: AgentId::Carol, angle: g.c },
                FriendMeasure { agent: AgentId::Dan, angle: g.d },
                Undo { actor: AgentId::Bob, friend: AgentId::Dan },
                SuperMeasure { agent: AgentId::Bob, angle: g.b },
                Undo { actor: AgentId::Alice, friend: AgentId::Carol },
                SuperMeasure { agent: AgentId::Alice, angle: g.a },
            ]
        );
        assert_eq!(p.angles, healey_protocol(Frame::AliceFrame, g).angles);
    }

    #[test]
    fn modified_protocol_exposes_pairs() {
        let g = angles();
        let p = modified_protocol(BranchChoice::Undo, BranchChoice::Undo, g);
        assert!(p.steps.contains(&SuperMeasure { agent: AgentId::Alice, angle: g.a }));
        assert!(p.steps.contains(&SuperMeasure { agent: AgentId::Bob, angle: g.b }));
        let p = modified_protocol(BranchChoice::KeepAndRead, BranchChoice::Undo, g);
        assert!(p.steps.contains(&ProjectiveRead { agent: AgentId::Carol }));
        assert!(p.steps.contains(&SuperMeasure { agent: AgentId::Bob, angle: g.b }));
        let p = modified_protocol(BranchChoice::KeepAndRead, BranchChoice::KeepAndRead, g);
        assert_eq!(
            &p.steps[3..],
            &[ProjectiveRead { agent: AgentId::Carol }, ProjectiveRead { agent: AgentId::Dan }]
        );
        for a in BranchChoice::BOTH {
            for b in BranchChoice::BOTH {
                assert!(validate(&modified_protocol(a, b, g)).is_empty());
            }
        }
    }

    #[test]
    fn validation_cases() {
        let g = angles();
        assert!(validate(&healey_protocol(Frame::AliceFrame, g)).is_empty());
        assert!(validate(&healey_protocol(Frame::BobFrame, g)).is_empty());

        let empty = Protocol { name: "empty".into(), steps: vec![], angles: g };
        assert_eq!(validate(&empty), vec![Violation::MissingPreparation]);

        let read_then_undo = Protocol {
            name: "bad".into(),
            steps: vec![
                PrepareSinglet,
                FriendMeasure { agent: AgentId::Carol, angle: g.c },
                ProjectiveRead { agent: AgentId::Carol },
                Undo { actor: AgentId::Alice, friend: AgentId::Carol },
            ],
            angles: g,
        };
        assert_eq!(
            validate(&read_then_undo),
            vec![Violation::UndoAfterRead { friend: AgentId::Carol, read_step: 2, undo_step: 3 }]
        );

        let misc = Protocol {
            name: "misc".into(),
            steps: vec![
                FriendMeasure { agent: AgentId::Alice, angle: g.a },
                PrepareSinglet,
                Undo { actor: AgentId::Bob, friend: AgentId::Carol },
                PrepareSinglet,
            ],
            angles: g,
        };
        let v = validate(&misc);
        assert!(v.contains(&Violation::MissingPreparation));
        assert!(v.contains(&Violation::WrongRole { agent: AgentId::Alice, step: 0, expected: Role::Friend }));
        assert!(v.contains(&Violation::PreparationNotFirst { step: 1 }));
        assert!(v.contains(&Violation::UndoByWrongAgent { actor: AgentId::Bob, friend: AgentId::Carol, step: 2 }));
        assert!(v.contains(&Violation::UndoWithoutMeasurement { friend: AgentId::Carol, step: 2 }));
        assert!(v.contains(&Violation::DuplicatePreparation { step: 3 }));

        let twice = Protocol {
            name: "twice".into(),
            steps: vec![
                PrepareSinglet,
                FriendMeasure { agent: AgentId::Dan, angle: g.d },
                FriendMeasure { agent: AgentId::Dan, angle: g.b },
            ],
            angles: g,
        };
        assert_eq!(validate(&twice), vec![Violation::RegisterOccupied { agent: AgentId::Dan, step: 2 }]);
    }

    #[test]
    fn run_rejects_invalid_protocols() {
        let empty = Protocol { name: "e".into(), steps: vec![], angles: angles() };
        let mut rng = StreamSplitter::new(0).run_stream(0);
        assert!(matches!(run(&empty, RunMode::Unitary, &mut rng), Err(SimError::InvalidProtocol(_))));
    }

    #[test]
    fn unitary_run_ends_in_ua_ub_psi0() {
        let g = angles();
        let mut rng = StreamSplitter::new(0).run_stream(0);
        for frame in [Frame::AliceFrame, Frame::BobFrame] {
            let rec = run(&healey_protocol(frame, g), RunMode::Unitary, &mut rng).unwrap();
            assert!(rec.entries.is_empty());
            let fin = rec.final_state.unwrap();
            let ua = super_unitary(AgentId::Alice, g.a).unwrap();
            let ub = super_unitary(AgentId::Bob, g.b).unwrap();
            let expected = apply(&ua, &apply(&ub, &initial_state()).unwrap()).unwrap();
            assert!(fin.max_abs_diff(&expected).unwrap() <= EXACT_TOL);
        }
    }

    #[test]
    fn trajectory_identities() {
        let g = angles();
        let p = healey_protocol(Frame::AliceFrame, g);
        let states = unitary_trajectory(&p).unwrap();
        assert_eq!(states.len(), 7);
        assert_eq!(states[0], initial_state());
        let ud = friend_unitary(AgentId::Dan, g.d).unwrap();
        let uc = friend_unitary(AgentId::Carol, g.c).unwrap();
        let psi2 = apply(&uc, &apply(&ud, &initial_state()).unwrap()).unwrap();
        assert!(states[2].max_abs_diff(&psi2).unwrap() <= EXACT_TOL);
        assert!(states[3].max_abs_diff(&states[1]).unwrap() <= EXACT_TOL);
        assert!((inner(&states[1], &states[3]).unwrap().norm() - 1.0).abs() <= EXACT_TOL);
        for k in &states {
            assert!((k.norm() - 1.0).abs() <= INVARIANT_TOL);
        }
        assert!((register_probabilities(&states[3], AgentId::Carol).unwrap()[0] - 1.0).abs() <= EXACT_TOL);
        for (k, s) in states.iter().enumerate() {
            assert_eq!(&state_after(&p, k).unwrap(), s);
        }
    }

    #[test]
    fn state_after_errors() {
        let g = angles();
        let p = healey_protocol(Frame::AliceFrame, g);
        assert_eq!(
            state_after(&p, 7).unwrap_err(),
            SimError::StepIndexOutOfRange { index: 7, max: 6 }
        );
        let m = modified_protocol(BranchChoice::KeepAndRead, BranchChoice::Undo, g);
        assert!(matches!(
            state_after(&m, 1),
            Err(SimError::ProjectiveStepInUnitaryMode { step: 3 })
        ));
        let mut rng = StreamSplitter::new(0).run_stream(0);
        assert!(matches!(
            run(&m, RunMode::Unitary, &mut rng),
            Err(SimError::ProjectiveStepInUnitaryMode { step: 3 })
        ));
    }

    #[test]
    fn hybrid_runs_record_two_outcomes() {
        let g = angles();
        let s = StreamSplitter::new(5);
        for a in BranchChoice::BOTH {
            for b in BranchChoice::BOTH {
                let p = modified_protocol(a, b, g);
                let rec = run(&p, RunMode::Hybrid, &mut s.run_stream(1)).unwrap();
                assert_eq!(rec.entries.len(), 2);
                assert!(rec.final_state.is_none());
                assert!(rec.entries.iter().all(|e| e.outcome != Outcome::Ready));
                let again = run(&p, RunMode::Hybrid, &mut s.run_stream(1)).unwrap();
                assert_eq!(rec, again);
            }
        }
    }

    #[test]
    fn projective_healey_run_records_four_definite_outcomes() {
        let p = healey_protocol(Frame::AliceFrame, angles());
        let s = StreamSplitter::new(8);
        for i in 0..20 {
            let rec = run_keep_state(&p, RunMode::Projective, &mut s.run_stream(i)).unwrap();
            let agents: Vec<_> = rec.entries.iter().map(|e| e.agent).collect();
            assert_eq!(agents, vec![AgentId::Dan, AgentId::Carol, AgentId::Alice, AgentId::Bob]);
            assert!(rec.entries.iter().all(|e| e.outcome.sign().is_some()));
            assert!(rec.final_state.is_some());
        }
    }
}
