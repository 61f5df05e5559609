//! Majorana operators in the Jordan–Wigner string representation.
//!
//! With `n` Majoranas on `n/2` qubits, `χ_{2k} = Z…Z X_k / √2` and
//! `χ_{2k+1} = Z…Z Y_k / √2`, so that `{χ_i, χ_j} = δ_ij`. Qubit 0 is the
//! most significant bit of the basis index, which makes the first half of
//! the Majoranas act on the leading tensor factor.

use std::collections::BTreeMap;

use num_complex::Complex64;

use crate::error::{invalid, Error, Result};
use crate::sparse::{SparseOperator, DROP_TOL};

/// Hilbert spaces larger than `2^DEFAULT_MAX_QUBITS` are refused.
pub const DEFAULT_MAX_QUBITS: u32 = 20;

/// `coeff · X^x Z^z` with the X factor applied after Z on every qubit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PauliString {
    pub x: u64,
    pub z: u64,
    pub coeff: Complex64,
}

impl PauliString {
    pub fn identity() -> Self {
        Self { x: 0, z: 0, coeff: Complex64::new(1.0, 0.0) }
    }

    pub fn mul(&self, other: &Self) -> Self {
        // Z^{z1} X^{x2} = (-1)^{|z1 & x2|} X^{x2} Z^{z1}
        let sign = if (self.z & other.x).count_ones() % 2 == 1 { -1.0 } else { 1.0 };
        Self {
            x: self.x ^ other.x,
            z: self.z ^ other.z,
            coeff: self.coeff * other.coeff * sign,
        }
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self { coeff: self.coeff * c, ..*self }
    }

    /// Amplitude `⟨row| P |col⟩` for `row = col ^ x`.
    #[inline]
    pub fn amplitude(&self, col: u64) -> Complex64 {
        if (self.z & col).count_ones() % 2 == 1 {
            -self.coeff
        } else {
            self.coeff
        }
    }
}

/// Sums Pauli strings into a sparse operator on `qubits` qubits.
pub fn pauli_sum_to_sparse(qubits: u32, terms: &[PauliString]) -> Result<SparseOperator> {
    let dim = 1usize << qubits;
    let mut merged: BTreeMap<(u64, u64), Complex64> = BTreeMap::new();
    for t in terms {
        *merged.entry((t.x, t.z)).or_insert(Complex64::new(0.0, 0.0)) += t.coeff;
    }
    let mut groups: BTreeMap<u64, Vec<(u64, Complex64)>> = BTreeMap::new();
    for ((x, z), c) in merged {
        if c.norm() > DROP_TOL {
            groups.entry(x).or_default().push((z, c));
        }
    }
    let mut rows: Vec<Vec<(u32, Complex64)>> = Vec::with_capacity(dim);
    for r in 0..dim as u64 {
        let mut row = Vec::with_capacity(groups.len());
        for (&x, zs) in &groups {
            let col = r ^ x;
            let mut v = Complex64::new(0.0, 0.0);
            for &(z, c) in zs {
                if (z & col).count_ones() % 2 == 1 {
                    v -= c;
                } else {
                    v += c;
                }
            }
            row.push((col as u32, v));
        }
        rows.push(row);
    }
    Ok(SparseOperator::from_row_lists(dim, rows))
}

pub fn jordan_wigner_string(index: usize, qubits: u32) -> PauliString {
    let k = (index / 2) as u32;
    let bit = |q: u32| 1u64 << (qubits - 1 - q);
    let z_string: u64 = (0..k).map(bit).fold(0, |a, b| a | b);
    let inv_sqrt2 = std::f64::consts::FRAC_1_SQRT_2;
    if index % 2 == 0 {
        PauliString { x: bit(k), z: z_string, coeff: Complex64::new(inv_sqrt2, 0.0) }
    } else {
        // Y = i X Z
        PauliString { x: bit(k), z: z_string | bit(k), coeff: Complex64::new(0.0, inv_sqrt2) }
    }
}

/// An ordered set of Majorana operators sharing one Hilbert space.
#[derive(Debug, Clone)]
pub struct MajoranaSet {
    n: usize,
    ops: Vec<SparseOperator>,
    strings: Option<Vec<PauliString>>,
}

impl MajoranaSet {
    /// Wraps arbitrary operators, e.g. deliberately perturbed ones.
    pub fn from_ops(ops: Vec<SparseOperator>) -> Result<Self> {
        let n = ops.len();
        if n == 0 {
            return Err(invalid("empty Majorana set"));
        }
        let dim = ops[0].dim();
        if let Some(bad) = ops.iter().find(|o| o.dim() != dim) {
            return Err(Error::DimensionMismatch { left: dim, right: bad.dim() });
        }
        Ok(Self { n, ops, strings: None })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.ops[0].dim()
    }

    pub fn qubits(&self) -> u32 {
        self.dim().trailing_zeros()
    }

    pub fn ops(&self) -> &[SparseOperator] {
        &self.ops
    }

    pub fn op(&self, i: usize) -> &SparseOperator {
        &self.ops[i]
    }

    /// String representation, available for canonically built sets.
    pub fn strings(&self) -> Option<&[PauliString]> {
        self.strings.as_deref()
    }
}

pub fn build_majoranas(n: usize) -> Result<MajoranaSet> {
    build_majoranas_with_budget(n, DEFAULT_MAX_QUBITS)
}

pub fn build_majoranas_with_budget(n: usize, max_qubits: u32) -> Result<MajoranaSet> {
    if n < 2 || n % 2 == 1 {
        return Err(invalid(format!("Majorana count must be even and at least 2, got {n}")));
    }
    let qubits = (n / 2) as u32;
    if qubits > max_qubits || qubits > 32 {
        return Err(Error::ResourceLimit(format!(
            "{n} Majoranas need 2^{qubits} states, budget is 2^{max_qubits}"
        )));
    }
    let strings: Vec<PauliString> = (0..n).map(|i| jordan_wigner_string(i, qubits)).collect();
    let ops = strings
        .iter()
        .map(|s| pauli_sum_to_sparse(qubits, std::slice::from_ref(s)).map(|o| o.with_hermitian_hint(Some(true))))
        .collect::<Result<Vec<_>>>()?;
    Ok(MajoranaSet { n, ops, strings: Some(strings) })
}

/// True iff `max_{i,j} ‖{ψ_i, ψ_j} − δ_ij I‖_max < tol`.
pub fn anticommutator_check(set: &MajoranaSet, tol: f64) -> bool {
    let dim = set.dim();
    let Ok(id) = SparseOperator::identity(dim) else { return false };
    for i in 0..set.n() {
        for j in i..set.n() {
            let Ok(ac) = set.op(i).anticommutator(set.op(j)) else { return false };
            let target = if i == j { 1.0 } else { 0.0 };
            match ac.add_scaled(Complex64::new(-target, 0.0), &id) {
                Ok(d) if d.max_abs() < tol => {}
                _ => return false,
            }
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn odd_count_rejected() {
        assert!(matches!(build_majoranas(5), Err(Error::InvalidArgument(_))));
        assert!(matches!(build_majoranas(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn budget_enforced() {
        assert!(matches!(build_majoranas_with_budget(12, 4), Err(Error::ResourceLimit(_))));
    }

    #[test]
    fn two_majoranas_square_to_half() {
        let m = build_majoranas(2).unwrap();
        assert_eq!(m.dim(), 2);
        let id = SparseOperator::identity(2).unwrap();
        for i in 0..2 {
            let sq = m.op(i).mul(m.op(i)).unwrap();
            assert!(sq.max_abs_diff(&id.scale(c(0.5))).unwrap() < 1e-15);
        }
        let ac = m.op(0).anticommutator(m.op(1)).unwrap();
        assert!(ac.max_abs() < 1e-15);
    }

    #[test]
    fn canonical_six_passes_and_perturbations_fail() {
        let m = build_majoranas(6).unwrap();
        assert!(anticommutator_check(&m, 1e-12));

        let mut scaled = m.ops().to_vec();
        scaled[0] = scaled[0].scale(c(1.01));
        assert!(!anticommutator_check(&MajoranaSet::from_ops(scaled).unwrap(), 1e-3));

        let mut swapped = m.ops().to_vec();
        swapped.swap(1, 4);
        assert!(anticommutator_check(&MajoranaSet::from_ops(swapped).unwrap(), 1e-12));
    }

    #[test]
    fn one_entry_per_row_hermitian_traceless() {
        for n in [2, 4, 6, 8, 10] {
            let m = build_majoranas(n).unwrap();
            for op in m.ops() {
                assert_eq!(op.nnz(), op.dim());
                assert!(op.is_hermitian(1e-12));
                assert!(op.trace().norm() < 1e-12);
                for r in 0..op.dim() {
                    assert_eq!(op.row(r).count(), 1);
                }
            }
        }
    }

    #[test]
    fn string_product_matches_sparse_product() {
        let m = build_majoranas(8).unwrap();
        let s = m.strings().unwrap();
        let prod = s[1].mul(&s[4]).mul(&s[6]);
        let via_strings = pauli_sum_to_sparse(4, &[prod]).unwrap();
        let via_sparse = m.op(1).mul(m.op(4)).unwrap().mul(m.op(6)).unwrap();
        assert!(via_strings.max_abs_diff(&via_sparse).unwrap() < 1e-15);
    }

    #[test]
    fn deterministic_construction() {
        let a = build_majoranas(8).unwrap();
        let b = build_majoranas(8).unwrap();
        for (x, y) in a.ops().iter().zip(b.ops()) {
            assert_eq!(x, y);
        }
    }
}
