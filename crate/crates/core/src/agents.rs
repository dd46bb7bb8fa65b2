//! Observers and the measurements they perform.
//!
//! Spin directions live in the x–z plane. A measurement along `θ` is either
//! modeled as a reversible dilation that copies the outcome into the
//! observer's qutrit register, or as a projective measurement that samples
//! an outcome and collapses the state.

use std::f64::consts::TAU;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::qstate::{
    apply, make_canonical_space, product_ket, register, CMatrix, CompositeSpace, FactorLabel, Ket,
    LocalOperator, EXACT_TOL, INVARIANT_TOL,
};

/// Below this the sampled branch is treated as impossible.
const DEGENERATE_BRANCH: f64 = 1e-14;

/// Measurement direction in the x–z plane, normalized to `[0, 2π)`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(into = "f64", try_from = "f64")]
pub struct Angle(f64);

impl Angle {
    pub fn new(radians: f64) -> Result<Self> {
        if !radians.is_finite() {
            return Err(SimError::NonFiniteAngle(radians));
        }
        let mut r = radians.rem_euclid(TAU);
        if r >= TAU {
            r = 0.0;
        }
        Ok(Self(r))
    }

    /// `k·π/n`, computed in that order so the same inputs always give the
    /// same bits.
    pub fn pi_fraction(k: i64, n: u64) -> Result<Self> {
        Self::new(k as f64 * std::f64::consts::PI / n as f64)
    }

    pub fn radians(self) -> f64 {
        self.0
    }
}

impl From<Angle> for f64 {
    fn from(a: Angle) -> f64 {
        a.0
    }
}

impl TryFrom<f64> for Angle {
    type Error = SimError;
    fn try_from(v: f64) -> Result<Self> {
        Angle::new(v)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentId {
    Alice,
    Bob,
    Carol,
    Dan,
}

impl AgentId {
    pub const ALL: [AgentId; 4] = [AgentId::Alice, AgentId::Bob, AgentId::Carol, AgentId::Dan];

    pub fn is_friend(self) -> bool {
        matches!(self, AgentId::Carol | AgentId::Dan)
    }

    pub fn is_superobserver(self) -> bool {
        !self.is_friend()
    }

    /// Spin-½ particle this agent measures.
    pub fn system(self) -> FactorLabel {
        match self {
            AgentId::Alice | AgentId::Carol => FactorLabel::S1,
            AgentId::Bob | AgentId::Dan => FactorLabel::S2,
        }
    }

    /// The agent's memory register.
    pub fn register(self) -> FactorLabel {
        match self {
            AgentId::Alice => FactorLabel::A,
            AgentId::Bob => FactorLabel::B,
            AgentId::Carol => FactorLabel::C,
            AgentId::Dan => FactorLabel::D,
        }
    }

    /// Alice's friend is Carol, Bob's is Dan (and the reverse).
    pub fn partner(self) -> AgentId {
        match self {
            AgentId::Alice => AgentId::Carol,
            AgentId::Carol => AgentId::Alice,
            AgentId::Bob => AgentId::Dan,
            AgentId::Dan => AgentId::Bob,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AgentId::Alice => "Alice",
            AgentId::Bob => "Bob",
            AgentId::Carol => "Carol",
            AgentId::Dan => "Dan",
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Outcome {
    Plus,
    Minus,
    /// The register holds no record.
    Ready,
}

impl Outcome {
    /// `+1`, `-1`, or `ready_value` for an empty register.
    pub fn value(self, ready_value: f64) -> f64 {
        match self {
            Outcome::Plus => 1.0,
            Outcome::Minus => -1.0,
            Outcome::Ready => ready_value,
        }
    }

    pub fn sign(self) -> Option<i8> {
        match self {
            Outcome::Plus => Some(1),
            Outcome::Minus => Some(-1),
            Outcome::Ready => None,
        }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Plus => "+1",
            Outcome::Minus => "-1",
            Outcome::Ready => "ready",
        })
    }
}

fn real(v: f64) -> Complex64 {
    Complex64::new(v, 0.0)
}

/// `|↑_θ⟩ = cos(θ/2)|↑⟩ + sin(θ/2)|↓⟩`
pub fn spin_up(theta: Angle) -> [Complex64; 2] {
    let (s, c) = (theta.radians() / 2.0).sin_cos();
    [real(c), real(s)]
}

/// `|↓_θ⟩ = −sin(θ/2)|↑⟩ + cos(θ/2)|↓⟩`
pub fn spin_down(theta: Angle) -> [Complex64; 2] {
    let (s, c) = (theta.radians() / 2.0).sin_cos();
    [real(-s), real(c)]
}

/// `cos θ·σ_z + sin θ·σ_x` as a 2×2 matrix.
pub fn spin_matrix(theta: Angle) -> CMatrix {
    let (s, c) = theta.radians().sin_cos();
    CMatrix::from_real(2, &[c, s, s, -c])
}

/// Spin observable `σ(θ)` on the given qubit factor.
pub fn spin_observable(theta: Angle, qubit: FactorLabel) -> LocalOperator {
    LocalOperator::new(vec![qubit], spin_matrix(theta), true).expect("σ(θ) is unitary")
}

/// Swap of register basis states `Ready` and `other`.
fn register_swap(other: usize) -> CMatrix {
    let mut m = CMatrix::identity(3);
    let zero = real(0.0);
    let one = real(1.0);
    m.set(register::READY, register::READY, zero);
    m.set(other, other, zero);
    m.set(register::READY, other, one);
    m.set(other, register::READY, one);
    m
}

/// `P_↑θ ⊗ (r↔up) + P_↓θ ⊗ (r↔down)` on `system ⊗ register`.
fn dilation(agent: AgentId, theta: Angle) -> LocalOperator {
    let up = spin_up(theta);
    let down = spin_down(theta);
    let matrix = CMatrix::outer(&up, &up)
        .kron(&register_swap(register::SAW_UP))
        .add(&CMatrix::outer(&down, &down).kron(&register_swap(register::SAW_DOWN)));
    LocalOperator::new(vec![agent.system(), agent.register()], matrix, true)
        .expect("measurement dilation is unitary")
}

/// Measurement unitary of a friend (Carol or Dan) along `theta`.
///
/// Controlled on `|↑_θ⟩` the register goes `Ready ↔ SawUp`; controlled on
/// `|↓_θ⟩` it goes `Ready ↔ SawDown`. The operator is its own inverse.
pub fn friend_unitary(agent: AgentId, theta: Angle) -> Result<LocalOperator> {
    if !agent.is_friend() {
        return Err(SimError::WrongRole {
            agent,
            expected: "friend",
        });
    }
    Ok(dilation(agent, theta))
}

/// Measurement unitary of a superobserver (Alice or Bob); same construction
/// as [`friend_unitary`] on the superobserver's own register.
pub fn super_unitary(agent: AgentId, theta: Angle) -> Result<LocalOperator> {
    if !agent.is_superobserver() {
        return Err(SimError::WrongRole {
            agent,
            expected: "superobserver",
        });
    }
    Ok(dilation(agent, theta))
}

/// Measurement unitary of any agent.
pub fn measurement_unitary(agent: AgentId, theta: Angle) -> LocalOperator {
    dilation(agent, theta)
}

/// Reverses `friend`'s measurement along `theta`. The dilation is an
/// involution, so this is the measurement unitary itself.
pub fn undo(friend: AgentId, theta: Angle) -> Result<LocalOperator> {
    friend_unitary(friend, theta)
}

/// `(|↑↓⟩ − |↓↑⟩)/√2` on `S1 ⊗ S2` with every register `Ready`.
pub fn singlet_ready_state(space: &Arc<CompositeSpace>) -> Result<Ket> {
    let e = |dim: usize, i: usize| {
        let mut v = vec![real(0.0); dim];
        v[i] = real(1.0);
        v
    };
    let mut locals: Vec<Vec<Complex64>> = space
        .factors()
        .iter()
        .map(|f| e(f.dim, 0))
        .collect();
    let s1 = space.position(FactorLabel::S1)?;
    let s2 = space.position(FactorLabel::S2)?;
    let h = std::f64::consts::FRAC_1_SQRT_2;
    locals[s1] = e(2, 0);
    locals[s2] = e(2, 1);
    let up_down = product_ket(space, &locals)?;
    locals[s1] = e(2, 1);
    locals[s2] = e(2, 0);
    let down_up = product_ket(space, &locals)?;
    up_down.scaled(real(h)).add(&down_up.scaled(real(-h)))
}

/// `|ψ(0)⟩` on the canonical space.
pub fn initial_state() -> Ket {
    singlet_ready_state(&make_canonical_space()).expect("canonical space has S1 and S2")
}

fn projector_norm_sqr(projector: &LocalOperator, ket: &Ket) -> Result<(f64, Ket)> {
    let projected = apply(projector, ket)?;
    let n = projected.norm();
    Ok((n * n, projected))
}

fn pm_projectors(obs: &LocalOperator) -> Result<[LocalOperator; 2]> {
    if obs.targets().len() != 1 {
        return Err(SimError::NotSingleFactor(obs.targets().len()));
    }
    let m = obs.matrix();
    let herm = m.hermiticity_deviation();
    if herm > INVARIANT_TOL {
        return Err(SimError::NotHermitian { deviation: herm });
    }
    let id = CMatrix::identity(m.dim());
    let sq = m.matmul(m).max_abs_diff(&id);
    if sq > INVARIANT_TOL {
        return Err(SimError::NotInvolutory { deviation: sq });
    }
    let half = real(0.5);
    let targets = obs.targets().to_vec();
    Ok([
        LocalOperator::new(targets.clone(), id.add(m).scale(half), false)?,
        LocalOperator::new(targets, id.sub(m).scale(half), false)?,
    ])
}

/// Born probabilities `[Pr(+1), Pr(−1)]` for a ±1-valued single-factor
/// observable.
pub fn branch_probabilities(ket: &Ket, obs: &LocalOperator) -> Result<[f64; 2]> {
    let [plus, minus] = pm_projectors(obs)?;
    Ok([
        projector_norm_sqr(&plus, ket)?.0,
        projector_norm_sqr(&minus, ket)?.0,
    ])
}

fn check_total(total: f64) -> Result<()> {
    if (total - 1.0).abs() > EXACT_TOL {
        return Err(SimError::ProbabilitySum(total));
    }
    Ok(())
}

fn collapse(projected: Ket, p: f64) -> Result<Ket> {
    if p < DEGENERATE_BRANCH {
        return Err(SimError::DegenerateBranch(p));
    }
    Ok(projected.scaled(real(1.0 / p.sqrt())))
}

/// Samples a ±1 outcome of `obs` with Born probabilities and returns the
/// renormalized post-measurement state.
pub fn projective_measure<R: Rng + ?Sized>(
    ket: &Ket,
    obs: &LocalOperator,
    rng: &mut R,
) -> Result<(Outcome, Ket)> {
    let [plus, minus] = pm_projectors(obs)?;
    let (p_plus, k_plus) = projector_norm_sqr(&plus, ket)?;
    let (p_minus, k_minus) = projector_norm_sqr(&minus, ket)?;
    check_total(p_plus + p_minus)?;
    let u: f64 = rng.gen();
    if u < p_plus {
        Ok((Outcome::Plus, collapse(k_plus, p_plus)?))
    } else {
        Ok((Outcome::Minus, collapse(k_minus, p_minus)?))
    }
}

/// Projective measurement of a spin along `theta` on the agent's particle.
pub fn measure_spin<R: Rng + ?Sized>(
    ket: &Ket,
    agent: AgentId,
    theta: Angle,
    rng: &mut R,
) -> Result<(Outcome, Ket)> {
    projective_measure(ket, &spin_observable(theta, agent.system()), rng)
}

#[cfg(test)]
fn register_projector(agent: AgentId, index: usize) -> LocalOperator {
    let mut diag = [real(0.0); 3];
    diag[index] = real(1.0);
    LocalOperator::new(vec![agent.register()], CMatrix::diagonal(&diag), false)
        .expect("projector has distinct target")
}

const REGISTER_ORDER: [(usize, Outcome); 3] = [
    (register::READY, Outcome::Ready),
    (register::SAW_UP, Outcome::Plus),
    (register::SAW_DOWN, Outcome::Minus),
];

/// Probabilities of reading `[Ready, SawUp, SawDown]` in the agent's register.
pub fn register_probabilities(ket: &Ket, agent: AgentId) -> Result<[f64; 3]> {
    let stride = ket.space().stride_of(agent.register())?;
    let mut out = [0.0; 3];
    for (flat, a) in ket.amplitudes().iter().enumerate() {
        out[(flat / stride) % 3] += a.norm_sqr();
    }
    Ok(out)
}

/// Projective read-out of the agent's register in the basis
/// `{Ready, SawUp, SawDown}`, mapped to `Ready`, `Plus`, `Minus`.
pub fn read_register<R: Rng + ?Sized>(
    ket: &Ket,
    agent: AgentId,
    rng: &mut R,
) -> Result<(Outcome, Ket)> {
    let probs = register_probabilities(ket, agent)?;
    check_total(probs.iter().sum())?;
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let chosen = probs
        .iter()
        .position(|&p| {
            acc += p;
            u < acc
        })
        // u can land just above a total that rounds below 1
        .or_else(|| probs.iter().rposition(|&p| p > 0.0))
        .ok_or(SimError::DegenerateBranch(0.0))?;
    let (index, outcome) = REGISTER_ORDER[chosen];
    let stride = ket.space().stride_of(agent.register())?;
    let kept = ket
        .amplitudes()
        .iter()
        .enumerate()
        .map(|(flat, &a)| if (flat / stride) % 3 == index { a } else { real(0.0) })
        .collect();
    let projected = Ket::new(Arc::clone(ket.space()), kept)?;
    Ok((outcome, collapse(projected, probs[chosen])?))
}
