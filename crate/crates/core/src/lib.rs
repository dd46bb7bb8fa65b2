//! Exact statevector simulation of extended Wigner's-friend experiments.
//!
//! Two entangled spin-½ particles are measured by two friends (Carol and
//! Dan) whose measurements are modeled as reversible unitaries, then undone
//! and re-measured by two superobservers (Alice and Bob). The crate computes
//! the resulting correlation functions exactly or by Monte Carlo sampling,
//! and evaluates them in the CHSH combination.

pub mod agents;
pub mod chsh;
pub mod cli;
pub mod correlations;
pub mod error;
pub mod protocol;
pub mod protofile;
pub mod qstate;
pub mod rng;

pub use error::{Result, SimError};
