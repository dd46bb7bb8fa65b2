use thiserror::Error;

use crate::qstate::FactorLabel;

/// Errors raised by the simulator. Protocol validation problems and DSL
/// diagnostics are reported as data elsewhere; these are the hard failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("factor {label} has unsupported dimension {dim} (expected 2 or 3)")]
    BadFactorDimension { label: FactorLabel, dim: usize },
    #[error("factor label {0} appears more than once")]
    DuplicateFactor(FactorLabel),
    #[error("factor {0} is not part of the composite space")]
    UnknownFactor(FactorLabel),
    #[error("basis index {index} out of range for factor {label} (dimension {dim})")]
    BasisIndexOutOfRange {
        label: FactorLabel,
        index: usize,
        dim: usize,
    },
    #[error("expected {expected} basis indices, got {got}")]
    BasisArity { expected: usize, got: usize },
    #[error("amplitude vector has length {got}, space dimension is {expected}")]
    AmplitudeLength { expected: usize, got: usize },
    #[error("operator matrix is {got}x{got}, targets require {expected}x{expected}")]
    OperatorDimension { expected: usize, got: usize },
    #[error("operator flagged unitary deviates from unitarity by {deviation:e}")]
    NotUnitary { deviation: f64 },
    #[error("operator is not Hermitian (deviation {deviation:e})")]
    NotHermitian { deviation: f64 },
    #[error("observable does not square to the identity (deviation {deviation:e})")]
    NotInvolutory { deviation: f64 },
    #[error("observable must act on exactly one factor, got {0}")]
    NotSingleFactor(usize),
    #[error("kets or operators refer to different composite spaces")]
    SpaceMismatch,
    #[error("expectation value has imaginary residual {0:e}")]
    ImaginaryExpectation(f64),
    #[error("branch probabilities sum to {0}, not 1")]
    ProbabilitySum(f64),
    #[error("sampled branch has probability {0:e}; state is inconsistent")]
    DegenerateBranch(f64),
    #[error("angle must be finite, got {0}")]
    NonFiniteAngle(f64),
    #[error("{agent} is not a {expected}")]
    WrongRole {
        agent: crate::agents::AgentId,
        expected: &'static str,
    },
    #[error("protocol failed validation: {0}")]
    InvalidProtocol(String),
    #[error("step {step} is projective and cannot run in unitary mode")]
    ProjectiveStepInUnitaryMode { step: usize },
    #[error("step index {index} out of range (protocol has states 0..={max})")]
    StepIndexOutOfRange { index: usize, max: usize },
    #[error("read-out of {agent} at step {step} returned no record")]
    UnexpectedReady {
        agent: crate::agents::AgentId,
        step: usize,
    },
    #[error("run produced {got} outcomes, expected {expected}")]
    OutcomeCount { expected: usize, got: usize },
    #[error("n_runs must be at least 1")]
    NoRuns,
    #[error("correlation table is missing pair {0}")]
    MissingPair(crate::correlations::PairId),
    #[error("pair needs two distinct settings, got {0} twice")]
    DegeneratePair(crate::correlations::Setting),
    #[error("register correlation needs two distinct agents, got {0} twice")]
    SameAgent(crate::agents::AgentId),
    #[error("grid step {0} is not usable (must be positive and give at most {1} points per axis)")]
    BadGridStep(f64, usize),
}

pub type Result<T> = std::result::Result<T, SimError>;
