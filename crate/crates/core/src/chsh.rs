//! The CHSH combination `|E(a,b) + E(c,b) + E(c,d) − E(a,d)|`, the
//! substitution of zeros for frame-dependent pairs, the local bound by
//! enumeration, and a grid search for maximizing settings.

use std::f64::consts::{SQRT_2, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::Angle;
use crate::correlations::{exact_pair_correlation, CorrelationEntry, CorrelationTable, PairId};
use crate::error::{Result, SimError};
use crate::protocol::AngleSet;

pub const CLASSICAL_BOUND: f64 = 2.0;
pub const TSIRELSON_BOUND: f64 = 2.0 * SQRT_2;

/// Most grid points per axis accepted by [`optimal_angles`].
pub const MAX_GRID_POINTS: usize = 512;

/// `|E(a,b) + E(c,b) + E(c,d) − E(a,d)|`
pub fn chsh_value(table: &CorrelationTable) -> Result<f64> {
    let ab = table.value(PairId::AB)?;
    let cb = table.value(PairId::CB)?;
    let cd = table.value(PairId::CD)?;
    let ad = table.value(PairId::AD)?;
    Ok((ab + cb + cd - ad).abs())
}

/// Root-sum-square of the four entry standard errors.
pub fn combined_stderr(table: &CorrelationTable) -> Result<f64> {
    let mut acc = 0.0;
    for pair in PairId::CHSH_ORDER {
        let s = table.get(pair)?.stderr;
        acc += s * s;
    }
    Ok(acc.sqrt())
}

/// A frame-dependent pair whose value can be replaced by zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ZeroPair {
    /// `E(a,d) = 0`, Bob's frame: Dan's record is erased before Alice measures.
    Ad,
    /// `E(c,b) = 0`, Alice's frame: Carol's record is erased before Bob measures.
    Cb,
}

impl ZeroPair {
    pub fn pair(self) -> PairId {
        match self {
            ZeroPair::Ad => PairId::AD,
            ZeroPair::Cb => PairId::CB,
        }
    }

    pub fn justification(self) -> Justification {
        match self {
            ZeroPair::Ad => Justification::FrameZeroBob,
            ZeroPair::Cb => Justification::FrameZeroAlice,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Justification {
    FrameZeroAlice,
    FrameZeroBob,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Substitution {
    pub pair: PairId,
    pub value: f64,
    pub justification: Justification,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Classification {
    NoViolation,
    Violation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChshReport {
    pub correlations_used: CorrelationTable,
    pub substitutions: Vec<Substitution>,
    pub value: f64,
    pub combined_stderr: f64,
    pub classical_bound: f64,
    pub tsirelson_bound: f64,
    pub classification: Classification,
}

/// `Violation` iff `value > 2 + 3·stderr`.
pub fn classify(value: f64, combined_stderr: f64) -> Classification {
    if value > CLASSICAL_BOUND + 3.0 * combined_stderr {
        Classification::Violation
    } else {
        Classification::NoViolation
    }
}

/// Overwrites the given pairs with fixed values and evaluates the combination.
pub fn assign_and_evaluate(
    table: &CorrelationTable,
    assignments: &[Substitution],
) -> Result<ChshReport> {
    let mut used = table.clone();
    for s in assignments {
        used.insert(s.pair, CorrelationEntry::assigned(s.value));
    }
    let value = chsh_value(&used)?;
    let stderr = combined_stderr(&used)?;
    Ok(ChshReport {
        correlations_used: used,
        substitutions: assignments.to_vec(),
        value,
        combined_stderr: stderr,
        classical_bound: CLASSICAL_BOUND,
        tsirelson_bound: TSIRELSON_BOUND,
        classification: classify(value, stderr),
    })
}

/// Replaces the listed frame-dependent pairs by zero and evaluates.
pub fn substitute_and_evaluate(
    table: &CorrelationTable,
    zero_pairs: &[ZeroPair],
) -> Result<ChshReport> {
    let mut zeros = zero_pairs.to_vec();
    zeros.sort();
    zeros.dedup();
    let subs: Vec<Substitution> = zeros
        .into_iter()
        .map(|z| Substitution {
            pair: z.pair(),
            value: 0.0,
            justification: z.justification(),
        })
        .collect();
    assign_and_evaluate(table, &subs)
}

/// CHSH value of one deterministic assignment `[a, b, c, d] ∈ {±1}⁴`.
pub fn assignment_value(o: [i8; 4]) -> f64 {
    let [a, b, c, d] = o.map(i32::from);
    (a * b + c * b + c * d - a * d).abs() as f64
}

/// All 16 deterministic local assignments with their CHSH values.
pub fn lhv_assignments() -> Vec<([i8; 4], f64)> {
    (0..16u8)
        .map(|bits| {
            let o = [0, 1, 2, 3].map(|i| if bits >> i & 1 == 1 { -1i8 } else { 1 });
            (o, assignment_value(o))
        })
        .collect()
}

/// Largest CHSH value over deterministic local assignments.
pub fn lhv_bound() -> f64 {
    lhv_assignments()
        .into_iter()
        .map(|(_, v)| v)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimalSettings {
    pub angles: AngleSet,
    pub value: f64,
}

fn grid_points(step: f64) -> Result<Vec<f64>> {
    if !(step.is_finite() && step > 0.0) {
        return Err(SimError::BadGridStep(step, MAX_GRID_POINTS));
    }
    let ratio = TAU / step;
    let n = if (ratio - ratio.round()).abs() < 1e-9 {
        ratio.round()
    } else {
        ratio.ceil()
    };
    if n > MAX_GRID_POINTS as f64 {
        return Err(SimError::BadGridStep(step, MAX_GRID_POINTS));
    }
    Ok((0..n as usize).map(|k| k as f64 * step).collect())
}

/// Grid search for settings maximizing the exact CHSH value.
///
/// Correlations are Born-rule values on the grid. The value only depends on
/// angle differences, so `a` is pinned to the first grid point and the
/// remaining three angles are searched exhaustively; ties go to the
/// lexicographically smallest `(a, b, c, d)`.
pub fn optimal_angles(grid_step: Angle) -> Result<OptimalSettings> {
    optimal_angles_radians(grid_step.radians())
}

/// As [`optimal_angles`], with the step in radians (steps of `2π` or more
/// are not representable as an [`Angle`]).
pub fn optimal_angles_radians(grid_step: f64) -> Result<OptimalSettings> {
    let grid = grid_points(grid_step)?;
    let n = grid.len();
    let angles: Vec<Angle> = grid.iter().map(|&r| Angle::new(r)).collect::<Result<_>>()?;
    // corr[i][j]: particle 1 at grid[i], particle 2 at grid[j]
    let corr: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| exact_pair_correlation(angles[i], angles[j]))
                .collect()
        })
        .collect();
    let a = 0;
    let mut best = (f64::NEG_INFINITY, (0, 0, 0));
    for b in 0..n {
        for c in 0..n {
            for d in 0..n {
                let v = (corr[a][b] + corr[c][b] + corr[c][d] - corr[a][d]).abs();
                if v > best.0 + 1e-12 {
                    best = (v, (b, c, d));
                }
            }
        }
    }
    let (value, (b, c, d)) = best;
    Ok(OptimalSettings {
        angles: AngleSet::new(angles[a], angles[b], angles[c], angles[d]),
        value,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlations::{build_table, TableMode};
    use crate::rng::StreamSplitter;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, FRAC_PI_4};

    fn exact(angles: AngleSet) -> CorrelationTable {
        build_table(angles, 1, &StreamSplitter::new(0), TableMode::Exact).unwrap()
    }

    fn constant_table(v: f64) -> CorrelationTable {
        let mut t = CorrelationTable::new();
        for p in PairId::CHSH_ORDER {
            t.insert(p, CorrelationEntry::exact(v));
        }
        t
    }

    #[test]
    fn chsh_value_examples() {
        let v = chsh_value(&exact(AngleSet::canonical())).unwrap();
        assert!((v - 2.0 * SQRT_2).abs() <= 1e-12);
        assert_eq!(chsh_value(&constant_table(0.0)).unwrap(), 0.0);
        assert_eq!(chsh_value(&constant_table(-1.0)).unwrap(), 2.0);
    }

    #[test]
    fn missing_pair_is_an_error() {
        let mut t = constant_table(0.5);
        t.entries.remove(&PairId::CD);
        assert_eq!(chsh_value(&t), Err(SimError::MissingPair(PairId::CD)));
    }

    #[test]
    fn substitution_trichotomy() {
        let t = exact(AngleSet::canonical());
        let none = substitute_and_evaluate(&t, &[]).unwrap();
        assert_eq!(none.value, chsh_value(&t).unwrap());
        assert!(none.substitutions.is_empty());
        assert_eq!(none.classification, Classification::Violation);

        for z in [ZeroPair::Ad, ZeroPair::Cb] {
            let r = substitute_and_evaluate(&t, &[z]).unwrap();
            assert!((r.value - 3.0 * FRAC_1_SQRT_2).abs() <= 1e-12);
            assert_eq!(r.classification, Classification::Violation);
            assert_eq!(r.substitutions.len(), 1);
            assert_eq!(r.substitutions[0].justification, z.justification());
        }

        let both = substitute_and_evaluate(&t, &[ZeroPair::Cb, ZeroPair::Ad, ZeroPair::Cb]).unwrap();
        assert!((both.value - SQRT_2).abs() <= 1e-12);
        assert_eq!(both.classification, Classification::NoViolation);
        assert_eq!(both.substitutions.len(), 2);
        assert_eq!(both.correlations_used.get(PairId::AD).unwrap().value, 0.0);
    }

    #[test]
    fn lhv_enumeration() {
        // Oracle: spell out ab + cb + cd − ad = b(a + c) + d(c − a).
        let assignments = lhv_assignments();
        assert_eq!(assignments.len(), 16);
        let mut max = 0.0f64;
        for (o, v) in &assignments {
            let [a, b, c, d] = o.map(f64::from);
            let oracle = (b * (a + c) + d * (c - a)).abs();
            assert_eq!(*v, oracle);
            assert!(*v == 0.0 || *v == 2.0);
            max = max.max(oracle);
        }
        assert_eq!(max, 2.0);
        assert_eq!(lhv_bound(), 2.0);
        assert_eq!(assignment_value([1, 1, 1, 1]), 2.0);
    }

    #[test]
    fn optimal_angles_on_coarse_grids() {
        let best = optimal_angles(Angle::new(FRAC_PI_4).unwrap()).unwrap();
        assert!((best.value - 2.0 * SQRT_2).abs() <= 1e-12);
        let check = chsh_value(&exact(best.angles)).unwrap();
        assert!((check - best.value).abs() <= 1e-12);

        // Oracle: on the π/2 grid every correlation is −cos(kπ/2) ∈ {−1, 0, 1};
        // enumerate all 4⁴ tuples with the closed form.
        let e = |x: usize, y: usize| -((x as f64 - y as f64) * FRAC_PI_2).cos();
        let mut max = 0.0f64;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for d in 0..4 {
                        max = max.max((e(a, b) + e(c, b) + e(c, d) - e(a, d)).abs());
                    }
                }
            }
        }
        let coarse = optimal_angles(Angle::new(FRAC_PI_2).unwrap()).unwrap();
        assert!((max - 2.0).abs() <= 1e-12);
        assert!((coarse.value - max).abs() <= 1e-12);
    }

    #[test]
    fn optimal_value_respects_tsirelson() {
        for step in [0.3, 0.5, 1.0, 0.1] {
            let best = optimal_angles_radians(step).unwrap();
            assert!(best.value <= TSIRELSON_BOUND + 1e-9);
        }
        let fine = optimal_angles_radians(TAU / 64.0).unwrap();
        assert!((fine.value - TSIRELSON_BOUND).abs() <= 1e-12);
    }

    #[test]
    fn bad_grid_steps() {
        assert!(optimal_angles_radians(0.0).is_err());
        assert!(optimal_angles_radians(-1.0).is_err());
        assert!(optimal_angles_radians(f64::NAN).is_err());
        assert!(optimal_angles_radians(1e-4).is_err());
        // One point: every angle equal, value 2.
        assert!((optimal_angles_radians(10.0).unwrap().value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn global_shift_invariance() {
        let base = AngleSet::from_radians(0.1, 0.9, 1.7, 2.6).unwrap();
        let v0 = chsh_value(&exact(base)).unwrap();
        for k in 0..10 {
            let phi = 0.61 * k as f64 - 2.0;
            let v = chsh_value(&exact(base.shifted(phi).unwrap())).unwrap();
            assert!((v - v0).abs() <= 1e-12);
        }
    }

    #[test]
    fn classification_threshold() {
        assert_eq!(classify(2.0, 0.0), Classification::NoViolation);
        assert_eq!(classify(2.0 + 1e-9, 0.0), Classification::Violation);
        assert_eq!(classify(2.05, 0.02), Classification::NoViolation);
    }
}
