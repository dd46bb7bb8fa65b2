//! Dense complex linear algebra over a fixed composite Hilbert space of
//! qubit and qutrit factors.
//!
//! Amplitudes are flattened row-major over the factor order, so the last
//! factor varies fastest. Operators act on a subset of factors; their local
//! matrix is indexed row-major over the operator's own target order.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{Result, SimError};

/// Tolerance for invariant checks (unitarity, hermiticity, normalization).
pub const INVARIANT_TOL: f64 = 1e-10;
/// Tolerance for exact-identity assertions on doubles.
pub const EXACT_TOL: f64 = 1e-12;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FactorLabel {
    S1,
    S2,
    C,
    D,
    A,
    B,
}

impl FactorLabel {
    pub const ALL: [FactorLabel; 6] = [
        FactorLabel::S1,
        FactorLabel::S2,
        FactorLabel::C,
        FactorLabel::D,
        FactorLabel::A,
        FactorLabel::B,
    ];
}

impl fmt::Display for FactorLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FactorLabel::S1 => "S1",
            FactorLabel::S2 => "S2",
            FactorLabel::C => "C",
            FactorLabel::D => "D",
            FactorLabel::A => "A",
            FactorLabel::B => "B",
        };
        f.write_str(s)
    }
}

/// Register basis indices shared by every observer memory.
pub mod register {
    pub const READY: usize = 0;
    pub const SAW_UP: usize = 1;
    pub const SAW_DOWN: usize = 2;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorSpec {
    pub label: FactorLabel,
    pub dim: usize,
}

impl FactorSpec {
    pub fn new(label: FactorLabel, dim: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(SimError::BadFactorDimension { label, dim });
        }
        Ok(Self { label, dim })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CompositeSpace {
    factors: Vec<FactorSpec>,
    strides: Vec<usize>,
    total_dim: usize,
}

impl CompositeSpace {
    pub fn new(factors: Vec<FactorSpec>) -> Result<Self> {
        for (i, f) in factors.iter().enumerate() {
            FactorSpec::new(f.label, f.dim)?;
            if factors[..i].iter().any(|g| g.label == f.label) {
                return Err(SimError::DuplicateFactor(f.label));
            }
        }
        let mut strides = vec![1; factors.len()];
        for i in (0..factors.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * factors[i + 1].dim;
        }
        let total_dim = factors.iter().map(|f| f.dim).product();
        Ok(Self {
            factors,
            strides,
            total_dim,
        })
    }

    pub fn factors(&self) -> &[FactorSpec] {
        &self.factors
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn position(&self, label: FactorLabel) -> Result<usize> {
        self.factors
            .iter()
            .position(|f| f.label == label)
            .ok_or(SimError::UnknownFactor(label))
    }

    pub fn dim_of(&self, label: FactorLabel) -> Result<usize> {
        Ok(self.factors[self.position(label)?].dim)
    }

    pub fn stride_of(&self, label: FactorLabel) -> Result<usize> {
        Ok(self.strides[self.position(label)?])
    }

    /// Row-major flattening of per-factor basis indices.
    pub fn flatten(&self, indices: &[usize]) -> Result<usize> {
        if indices.len() != self.factors.len() {
            return Err(SimError::BasisArity {
                expected: self.factors.len(),
                got: indices.len(),
            });
        }
        let mut flat = 0;
        for ((f, &stride), &i) in self.factors.iter().zip(&self.strides).zip(indices) {
            if i >= f.dim {
                return Err(SimError::BasisIndexOutOfRange {
                    label: f.label,
                    index: i,
                    dim: f.dim,
                });
            }
            flat += i * stride;
        }
        Ok(flat)
    }

    /// Inverse of [`flatten`](Self::flatten).
    pub fn digits(&self, flat: usize) -> Vec<usize> {
        self.factors
            .iter()
            .zip(&self.strides)
            .map(|(f, &s)| (flat / s) % f.dim)
            .collect()
    }
}

/// The six-factor space `S1:2, S2:2, C:3, D:3, A:3, B:3` (dimension 324).
pub fn make_canonical_space() -> Arc<CompositeSpace> {
    let factors = FactorLabel::ALL
        .iter()
        .map(|&label| {
            let dim = match label {
                FactorLabel::S1 | FactorLabel::S2 => 2,
                _ => 3,
            };
            FactorSpec { label, dim }
        })
        .collect();
    Arc::new(CompositeSpace::new(factors).expect("canonical space is well formed"))
}

/// Small dense square complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    dim: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![ZERO; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = ONE;
        }
        m
    }

    pub fn from_rows(rows: &[&[Complex64]]) -> Self {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            assert_eq!(row.len(), dim, "matrix rows must be square");
            data.extend_from_slice(row);
        }
        Self { dim, data }
    }

    pub fn from_real(dim: usize, values: &[f64]) -> Self {
        assert_eq!(values.len(), dim * dim, "matrix data must be dim*dim");
        Self {
            dim,
            data: values.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }

    pub fn diagonal(values: &[Complex64]) -> Self {
        let mut m = Self::zeros(values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// `|u⟩⟨v|`
    pub fn outer(u: &[Complex64], v: &[Complex64]) -> Self {
        assert_eq!(u.len(), v.len());
        let dim = u.len();
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            for j in 0..dim {
                m.set(i, j, u[i] * v[j].conj());
            }
        }
        m
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.dim + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: Complex64) {
        self.data[row * self.dim + col] = v;
    }

    pub fn adjoint(&self) -> Self {
        let mut m = Self::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                m.set(j, i, self.get(i, j).conj());
            }
        }
        m
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "matmul dimension mismatch");
        let n = self.dim;
        let mut m = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == ZERO {
                    continue;
                }
                for j in 0..n {
                    m.data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        m
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "add dimension mismatch");
        Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.dim, other.dim, "sub dimension mismatch");
        Self {
            dim: self.dim,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self {
            dim: self.dim,
            data: self.data.iter().map(|a| a * s).collect(),
        }
    }

    /// Kronecker product; `self` indexes the slower-varying factor.
    pub fn kron(&self, other: &Self) -> Self {
        let n = self.dim * other.dim;
        let mut m = Self::zeros(n);
        for i in 0..self.dim {
            for j in 0..self.dim {
                let a = self.get(i, j);
                if a == ZERO {
                    continue;
                }
                for k in 0..other.dim {
                    for l in 0..other.dim {
                        m.set(i * other.dim + k, j * other.dim + l, a * other.get(k, l));
                    }
                }
            }
        }
        m
    }

    pub fn mul_vec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(v.len(), self.dim);
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j) * v[j]).sum())
            .collect()
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.dim, other.dim);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn unitarity_deviation(&self) -> f64 {
        self.adjoint()
            .matmul(self)
            .max_abs_diff(&Self::identity(self.dim))
    }

    pub fn hermiticity_deviation(&self) -> f64 {
        self.max_abs_diff(&self.adjoint())
    }
}

/// Operator acting on a subset of factors of some composite space.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalOperator {
    targets: Vec<FactorLabel>,
    matrix: CMatrix,
    unitary: bool,
}

impl LocalOperator {
    /// Builds an operator; when `unitary` is set the matrix is checked against
    /// `INVARIANT_TOL`.
    pub fn new(targets: Vec<FactorLabel>, matrix: CMatrix, unitary: bool) -> Result<Self> {
        for (i, t) in targets.iter().enumerate() {
            if targets[..i].contains(t) {
                return Err(SimError::DuplicateFactor(*t));
            }
        }
        if unitary {
            let deviation = matrix.unitarity_deviation();
            if deviation > INVARIANT_TOL {
                return Err(SimError::NotUnitary { deviation });
            }
        }
        Ok(Self {
            targets,
            matrix,
            unitary,
        })
    }

    pub fn identity(targets: Vec<FactorLabel>, space: &CompositeSpace) -> Result<Self> {
        let dim = targets
            .iter()
            .map(|&t| space.dim_of(t))
            .product::<Result<usize>>()?;
        Self::new(targets, CMatrix::identity(dim), true)
    }

    pub fn targets(&self) -> &[FactorLabel] {
        &self.targets
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn is_unitary(&self) -> bool {
        self.unitary
    }

    pub fn adjoint(&self) -> Self {
        Self {
            targets: self.targets.clone(),
            matrix: self.matrix.adjoint(),
            unitary: self.unitary,
        }
    }

    /// Tensor product of operators on disjoint targets.
    pub fn tensor(&self, other: &Self) -> Result<Self> {
        if let Some(t) = other.targets.iter().find(|t| self.targets.contains(t)) {
            return Err(SimError::DuplicateFactor(*t));
        }
        let mut targets = self.targets.clone();
        targets.extend_from_slice(&other.targets);
        Ok(Self {
            targets,
            matrix: self.matrix.kron(&other.matrix),
            unitary: self.unitary && other.unitary,
        })
    }

    fn check_against(&self, space: &CompositeSpace) -> Result<()> {
        let expected = self
            .targets
            .iter()
            .map(|&t| space.dim_of(t))
            .product::<Result<usize>>()?;
        if expected != self.matrix.dim {
            return Err(SimError::OperatorDimension {
                expected,
                got: self.matrix.dim,
            });
        }
        Ok(())
    }

    /// Flat offsets of each local basis state relative to a base index.
    fn local_offsets(&self, space: &CompositeSpace) -> Result<Vec<usize>> {
        let dims = self
            .targets
            .iter()
            .map(|&t| space.dim_of(t))
            .collect::<Result<Vec<_>>>()?;
        let strides = self
            .targets
            .iter()
            .map(|&t| space.stride_of(t))
            .collect::<Result<Vec<_>>>()?;
        let local_dim: usize = dims.iter().product();
        let mut offsets = Vec::with_capacity(local_dim);
        for j in 0..local_dim {
            let mut rem = j;
            let mut off = 0;
            for k in (0..dims.len()).rev() {
                off += (rem % dims[k]) * strides[k];
                rem /= dims[k];
            }
            offsets.push(off);
        }
        Ok(offsets)
    }

    /// Flat indices whose digits on every target factor are zero.
    fn base_indices(&self, space: &CompositeSpace) -> Result<Vec<usize>> {
        let positions = self
            .targets
            .iter()
            .map(|&t| space.position(t))
            .collect::<Result<Vec<_>>>()?;
        let mut bases = Vec::new();
        let mut digits = vec![0usize; space.factors.len()];
        for flat in 0..space.total_dim {
            if positions.iter().all(|&p| digits[p] == 0) {
                bases.push(flat);
            }
            for k in (0..digits.len()).rev() {
                digits[k] += 1;
                if digits[k] < space.factors[k].dim {
                    break;
                }
                digits[k] = 0;
            }
        }
        Ok(bases)
    }
}

/// Lifts `op` to the whole space: `op` on its targets, identity elsewhere.
pub fn embed(op: &LocalOperator, space: &CompositeSpace) -> Result<LocalOperator> {
    op.check_against(space)?;
    let n = space.total_dim;
    let offsets = op.local_offsets(space)?;
    let bases = op.base_indices(space)?;
    let mut full = CMatrix::zeros(n);
    for &base in &bases {
        for (r, &ro) in offsets.iter().enumerate() {
            for (c, &co) in offsets.iter().enumerate() {
                full.set(base + ro, base + co, op.matrix.get(r, c));
            }
        }
    }
    Ok(LocalOperator {
        targets: space.factors.iter().map(|f| f.label).collect(),
        matrix: full,
        unitary: op.unitary,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ket {
    space: Arc<CompositeSpace>,
    amplitudes: Vec<Complex64>,
}

impl Ket {
    pub fn new(space: Arc<CompositeSpace>, amplitudes: Vec<Complex64>) -> Result<Self> {
        if amplitudes.len() != space.total_dim {
            return Err(SimError::AmplitudeLength {
                expected: space.total_dim,
                got: amplitudes.len(),
            });
        }
        Ok(Self { space, amplitudes })
    }

    pub fn space(&self) -> &Arc<CompositeSpace> {
        &self.space
    }

    pub fn amplitudes(&self) -> &[Complex64] {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn is_normalized(&self) -> bool {
        (self.norm() - 1.0).abs() <= INVARIANT_TOL
    }

    pub fn scaled(&self, s: Complex64) -> Ket {
        Ket {
            space: Arc::clone(&self.space),
            amplitudes: self.amplitudes.iter().map(|a| a * s).collect(),
        }
    }

    pub fn add(&self, other: &Ket) -> Result<Ket> {
        same_space(self, other)?;
        Ok(Ket {
            space: Arc::clone(&self.space),
            amplitudes: self
                .amplitudes
                .iter()
                .zip(&other.amplitudes)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Largest amplitude-wise distance to `other`.
    pub fn max_abs_diff(&self, other: &Ket) -> Result<f64> {
        same_space(self, other)?;
        Ok(self
            .amplitudes
            .iter()
            .zip(&other.amplitudes)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max))
    }
}

fn same_space(a: &Ket, b: &Ket) -> Result<()> {
    if Arc::ptr_eq(&a.space, &b.space) || a.space == b.space {
        Ok(())
    } else {
        Err(SimError::SpaceMismatch)
    }
}

pub fn basis_ket(space: &Arc<CompositeSpace>, indices: &[usize]) -> Result<Ket> {
    let flat = space.flatten(indices)?;
    let mut amplitudes = vec![ZERO; space.total_dim];
    amplitudes[flat] = ONE;
    Ket::new(Arc::clone(space), amplitudes)
}

/// Product ket from one local state vector per factor, in factor order.
pub fn product_ket(space: &Arc<CompositeSpace>, locals: &[Vec<Complex64>]) -> Result<Ket> {
    if locals.len() != space.factors.len() {
        return Err(SimError::BasisArity {
            expected: space.factors.len(),
            got: locals.len(),
        });
    }
    let mut amplitudes = vec![ONE];
    for (f, local) in space.factors.iter().zip(locals) {
        if local.len() != f.dim {
            return Err(SimError::AmplitudeLength {
                expected: f.dim,
                got: local.len(),
            });
        }
        amplitudes = amplitudes
            .iter()
            .flat_map(|a| local.iter().map(move |b| a * b))
            .collect();
    }
    Ket::new(Arc::clone(space), amplitudes)
}

/// Applies `op` to `ket` without building the full-space matrix.
pub fn apply(op: &LocalOperator, ket: &Ket) -> Result<Ket> {
    let space = &ket.space;
    op.check_against(space)?;
    let offsets = op.local_offsets(space)?;
    let bases = op.base_indices(space)?;
    let m = offsets.len();
    // Dilations and projectors are sparse; zero entries contribute nothing.
    let mut rows: Vec<Vec<(usize, Complex64)>> = vec![Vec::new(); m];
    for (r, row) in rows.iter_mut().enumerate() {
        for (c, &co) in offsets.iter().enumerate() {
            let v = op.matrix.get(r, c);
            if v != ZERO {
                row.push((co, v));
            }
        }
    }
    let mut out = vec![ZERO; space.total_dim];
    for &base in &bases {
        for (row, &ro) in rows.iter().zip(&offsets) {
            let mut acc = ZERO;
            for &(co, v) in row {
                acc += v * ket.amplitudes[base + co];
            }
            out[base + ro] = acc;
        }
    }
    Ket::new(Arc::clone(space), out)
}

/// `⟨a|b⟩`, conjugate-linear in `a`.
pub fn inner(a: &Ket, b: &Ket) -> Result<Complex64> {
    same_space(a, b)?;
    Ok(a
        .amplitudes
        .iter()
        .zip(&b.amplitudes)
        .map(|(x, y)| x.conj() * y)
        .sum())
}

/// `⟨ψ|O|ψ⟩` for Hermitian `O`.
pub fn expectation(obs: &LocalOperator, ket: &Ket) -> Result<f64> {
    let deviation = obs.matrix.hermiticity_deviation();
    if deviation > INVARIANT_TOL {
        return Err(SimError::NotHermitian { deviation });
    }
    let value = inner(ket, &apply(obs, ket)?)?;
    if value.im.abs() > INVARIANT_TOL {
        return Err(SimError::ImaginaryExpectation(value.im));
    }
    Ok(value.re)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn pauli_x() -> CMatrix {
        CMatrix::from_real(2, &[0.0, 1.0, 1.0, 0.0])
    }

    fn pauli_z() -> CMatrix {
        CMatrix::from_real(2, &[1.0, 0.0, 0.0, -1.0])
    }

    /// Deterministic pseudo-random ket for tests.
    fn scrambled_ket(space: &Arc<CompositeSpace>, salt: u64) -> Ket {
        let mut state = salt.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let amps: Vec<Complex64> = (0..space.total_dim()).map(|_| c(next(), next())).collect();
        let k = Ket::new(Arc::clone(space), amps).unwrap();
        let n = k.norm();
        k.scaled(c(1.0 / n, 0.0))
    }

    fn random_unitary_3x3() -> CMatrix {
        // Product of a permutation, a diagonal phase and a real rotation.
        let (s, co) = 0.37f64.sin_cos();
        let rot = CMatrix::from_real(3, &[co, -s, 0.0, s, co, 0.0, 0.0, 0.0, 1.0]);
        let phase = CMatrix::diagonal(&[
            Complex64::from_polar(1.0, 0.3),
            Complex64::from_polar(1.0, -1.1),
            Complex64::from_polar(1.0, 2.0),
        ]);
        let perm = CMatrix::from_real(3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        perm.matmul(&phase).matmul(&rot)
    }

    #[test]
    fn canonical_space_layout() {
        let space = make_canonical_space();
        assert_eq!(space.total_dim(), 324);
        let labels: Vec<_> = space.factors().iter().map(|f| f.label).collect();
        assert_eq!(labels, FactorLabel::ALL.to_vec());
        assert_eq!(*make_canonical_space(), *space);
        for f in &space.factors()[2..] {
            assert_eq!(f.dim, 3);
        }
        assert_eq!(register::READY, 0);
        assert_eq!(register::SAW_UP, 1);
        assert_eq!(register::SAW_DOWN, 2);
    }

    #[test]
    fn space_rejects_bad_factors() {
        let bad = CompositeSpace::new(vec![FactorSpec {
            label: FactorLabel::S1,
            dim: 4,
        }]);
        assert!(matches!(bad, Err(SimError::BadFactorDimension { .. })));
        let dup = CompositeSpace::new(vec![
            FactorSpec { label: FactorLabel::C, dim: 3 },
            FactorSpec { label: FactorLabel::C, dim: 3 },
        ]);
        assert_eq!(dup, Err(SimError::DuplicateFactor(FactorLabel::C)));
    }

    #[test]
    fn basis_ket_flattening() {
        let space = make_canonical_space();
        let zero = basis_ket(&space, &[0; 6]).unwrap();
        assert_eq!(zero.amplitudes()[0], ONE);
        let k = basis_ket(&space, &[0, 1, 0, 0, 0, 0]).unwrap();
        assert_eq!(k.amplitudes()[81], ONE);
        let k = basis_ket(&space, &[1, 0, 0, 0, 0, 0]).unwrap();
        assert_eq!(k.amplitudes()[162], ONE);
        let k = basis_ket(&space, &[1, 1, 2, 2, 2, 2]).unwrap();
        assert_eq!(k.amplitudes()[323], ONE);
        assert_eq!(space.digits(323), vec![1, 1, 2, 2, 2, 2]);
        assert!(matches!(
            basis_ket(&space, &[2, 0, 0, 0, 0, 0]),
            Err(SimError::BasisIndexOutOfRange { .. })
        ));
        assert!(matches!(
            basis_ket(&space, &[0, 0]),
            Err(SimError::BasisArity { .. })
        ));
    }

    #[test]
    fn embed_identity_and_bit_flip() {
        let space = make_canonical_space();
        let id = LocalOperator::identity(vec![FactorLabel::S1], &space).unwrap();
        let full = embed(&id, &space).unwrap();
        assert_eq!(full.matrix().max_abs_diff(&CMatrix::identity(324)), 0.0);

        let x = LocalOperator::new(vec![FactorLabel::S1], pauli_x(), true).unwrap();
        let up = basis_ket(&space, &[0, 1, 2, 0, 1, 0]).unwrap();
        let flipped = apply(&embed(&x, &space).unwrap(), &up).unwrap();
        let expected = basis_ket(&space, &[1, 1, 2, 0, 1, 0]).unwrap();
        assert_eq!(flipped.max_abs_diff(&expected).unwrap(), 0.0);
        assert_eq!(apply(&x, &up).unwrap(), flipped);
    }

    #[test]
    fn embed_unitary_times_adjoint_is_identity() {
        let space = make_canonical_space();
        let u = LocalOperator::new(vec![FactorLabel::D], random_unitary_3x3(), true).unwrap();
        let full = embed(&u, &space).unwrap();
        let full_adj = embed(&u.adjoint(), &space).unwrap();
        let prod = full.matrix().matmul(full_adj.matrix());
        assert!(prod.max_abs_diff(&CMatrix::identity(324)) <= INVARIANT_TOL);
        assert!(full.matrix().unitarity_deviation() <= INVARIANT_TOL);
        assert!(full.is_unitary());
    }

    #[test]
    fn embed_rejects_unknown_target() {
        let factors = vec![FactorSpec { label: FactorLabel::S1, dim: 2 }];
        let small = CompositeSpace::new(factors).unwrap();
        let x = LocalOperator::new(vec![FactorLabel::S2], pauli_x(), true).unwrap();
        assert_eq!(
            embed(&x, &small).unwrap_err(),
            SimError::UnknownFactor(FactorLabel::S2)
        );
    }

    #[test]
    fn operator_dimension_is_checked() {
        let space = make_canonical_space();
        let x = LocalOperator::new(vec![FactorLabel::C], pauli_x(), true).unwrap();
        let k = basis_ket(&space, &[0; 6]).unwrap();
        assert!(matches!(
            apply(&x, &k),
            Err(SimError::OperatorDimension { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn non_unitary_flag_is_rejected() {
        let m = CMatrix::from_real(2, &[1.0, 1.0, 0.0, 1.0]);
        assert!(matches!(
            LocalOperator::new(vec![FactorLabel::S1], m, true),
            Err(SimError::NotUnitary { .. })
        ));
    }

    #[test]
    fn apply_identity_and_inverse() {
        let space = make_canonical_space();
        let psi = scrambled_ket(&space, 3);
        let id = LocalOperator::identity(vec![FactorLabel::A, FactorLabel::S2], &space).unwrap();
        assert_eq!(apply(&id, &psi).unwrap(), psi);

        let u = LocalOperator::new(vec![FactorLabel::B], random_unitary_3x3(), true).unwrap();
        let back = apply(&u.adjoint(), &apply(&u, &psi).unwrap()).unwrap();
        assert!(back.max_abs_diff(&psi).unwrap() <= EXACT_TOL);
    }

    #[test]
    fn apply_matches_embedded_matrix() {
        let space = make_canonical_space();
        let psi = scrambled_ket(&space, 11);
        let u = LocalOperator::new(vec![FactorLabel::C], random_unitary_3x3(), true)
            .unwrap()
            .tensor(&LocalOperator::new(vec![FactorLabel::S1], pauli_x(), true).unwrap())
            .unwrap();
        let local = apply(&u, &psi).unwrap();
        let full = embed(&u, &space).unwrap();
        let dense = Ket::new(Arc::clone(&space), full.matrix().mul_vec(psi.amplitudes())).unwrap();
        assert!(local.max_abs_diff(&dense).unwrap() <= EXACT_TOL);
    }

    #[test]
    fn unitary_apply_preserves_norm_on_random_kets() {
        let space = make_canonical_space();
        let u = LocalOperator::new(vec![FactorLabel::S2, FactorLabel::D], pauli_z().kron(&random_unitary_3x3()), true)
            .unwrap();
        for salt in 0..100 {
            let psi = scrambled_ket(&space, salt);
            let out = apply(&u, &psi).unwrap();
            assert!((out.norm() - psi.norm()).abs() <= EXACT_TOL);
        }
    }

    #[test]
    fn disjoint_operators_commute() {
        let space = make_canonical_space();
        let a = LocalOperator::new(vec![FactorLabel::S1, FactorLabel::A], pauli_x().kron(&random_unitary_3x3()), true)
            .unwrap();
        let b = LocalOperator::new(vec![FactorLabel::D], random_unitary_3x3().adjoint(), true).unwrap();
        let ea = embed(&a, &space).unwrap();
        let eb = embed(&b, &space).unwrap();
        let ab = ea.matrix().matmul(eb.matrix());
        let ba = eb.matrix().matmul(ea.matrix());
        let joint = embed(&a.tensor(&b).unwrap(), &space).unwrap();
        assert!(ab.max_abs_diff(&ba) <= EXACT_TOL);
        assert!(ab.max_abs_diff(joint.matrix()) <= EXACT_TOL);
    }

    #[test]
    fn inner_product_properties() {
        let space = make_canonical_space();
        let a = scrambled_ket(&space, 5);
        let b = scrambled_ket(&space, 6);
        assert!((inner(&a, &a).unwrap() - ONE).norm() <= INVARIANT_TOL);
        let ab = inner(&a, &b).unwrap();
        let ba = inner(&b, &a).unwrap();
        assert!((ab - ba.conj()).norm() <= EXACT_TOL);
        let e0 = basis_ket(&space, &[0; 6]).unwrap();
        let e1 = basis_ket(&space, &[0, 0, 0, 0, 0, 1]).unwrap();
        assert_eq!(inner(&e0, &e1).unwrap(), ZERO);
    }

    #[test]
    fn inner_rejects_space_mismatch() {
        let space = make_canonical_space();
        let other = Arc::new(
            CompositeSpace::new(vec![FactorSpec { label: FactorLabel::S1, dim: 2 }]).unwrap(),
        );
        let a = basis_ket(&space, &[0; 6]).unwrap();
        let b = basis_ket(&other, &[0]).unwrap();
        assert_eq!(inner(&a, &b).unwrap_err(), SimError::SpaceMismatch);
    }

    #[test]
    fn expectation_of_identity_and_hermiticity_check() {
        let space = make_canonical_space();
        let psi = scrambled_ket(&space, 9);
        let id = LocalOperator::identity(vec![FactorLabel::B], &space).unwrap();
        assert!((expectation(&id, &psi).unwrap() - 1.0).abs() <= INVARIANT_TOL);
        let m = CMatrix::from_rows(&[&[ZERO, ONE], &[ZERO, ZERO]]);
        let raising = LocalOperator::new(vec![FactorLabel::S1], m, false).unwrap();
        assert!(matches!(
            expectation(&raising, &psi),
            Err(SimError::NotHermitian { .. })
        ));
    }

    #[test]
    fn product_ket_matches_basis_ket() {
        let space = make_canonical_space();
        let e = |dim: usize, i: usize| {
            let mut v = vec![ZERO; dim];
            v[i] = ONE;
            v
        };
        let locals = vec![e(2, 1), e(2, 0), e(3, 2), e(3, 1), e(3, 0), e(3, 2)];
        let k = product_ket(&space, &locals).unwrap();
        assert_eq!(k, basis_ket(&space, &[1, 0, 2, 1, 0, 2]).unwrap());
    }
}
