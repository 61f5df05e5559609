//! Compressed-row complex sparse matrices.
//!
//! Every operator in the suite (Majoranas, Hamiltonians, Liouvillians and
//! their parity blocks) is stored as a [`SparseOperator`]. Rows keep their
//! column indices sorted so that assembly is reproducible bit for bit.

use std::io::{BufRead, Write};

use faer::Mat;
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

/// Amplitudes with modulus at or below this value are never stored.
pub const DROP_TOL: f64 = 1e-15;

/// Dimension at or below which dense cross-checks are cheap.
pub const DENSE_FALLBACK_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct SparseOperator {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<Complex64>,
    hermitian_hint: Option<bool>,
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(invalid(format!("operator dimension {dim} is not a power of two")));
    }
    if dim > u32::MAX as usize {
        return Err(Error::ResourceLimit(format!("dimension {dim} exceeds index width")));
    }
    Ok(())
}

impl SparseOperator {
    pub fn zeros(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self {
            dim,
            row_ptr: vec![0; dim + 1],
            cols: Vec::new(),
            vals: Vec::new(),
            hermitian_hint: Some(true),
        })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::diagonal(&vec![Complex64::new(1.0, 0.0); dim])
    }

    pub fn diagonal(diag: &[Complex64]) -> Result<Self> {
        let dim = diag.len();
        check_dim(dim)?;
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::with_capacity(dim);
        let mut vals = Vec::with_capacity(dim);
        row_ptr.push(0);
        for (i, &v) in diag.iter().enumerate() {
            if v.norm() > DROP_TOL {
                cols.push(i as u32);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { dim, row_ptr, cols, vals, hermitian_hint: None })
    }

    /// Builds an operator from `(row, col, value)` triplets. Duplicates are
    /// summed; the result is independent of triplet order.
    pub fn from_triplets<I>(dim: usize, triplets: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, Complex64)>,
    {
        check_dim(dim)?;
        let mut rows: Vec<Vec<(u32, Complex64)>> = vec![Vec::new(); dim];
        for (r, c, v) in triplets {
            if r >= dim || c >= dim {
                return Err(invalid(format!("entry ({r}, {c}) outside dimension {dim}")));
            }
            rows[r].push((c as u32, v));
        }
        Ok(Self::from_row_lists(dim, rows))
    }

    /// Rows may contain duplicate columns in any order.
    pub(crate) fn from_row_lists(dim: usize, mut rows: Vec<Vec<(u32, Complex64)>>) -> Self {
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in rows.iter_mut() {
            row.sort_by_key(|e| e.0);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut acc = Complex64::new(0.0, 0.0);
                while k < row.len() && row[k].0 == c {
                    acc += row[k].1;
                    k += 1;
                }
                if acc.norm() > DROP_TOL {
                    cols.push(c);
                    vals.push(acc);
                }
            }
            row_ptr.push(cols.len());
        }
        Self { dim, row_ptr, cols, vals, hermitian_hint: None }
    }

    pub fn from_dense(m: &Mat<Complex64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { left: m.nrows(), right: m.ncols() });
        }
        let dim = m.nrows();
        Self::from_triplets(
            dim,
            (0..dim).flat_map(|i| (0..dim).map(move |j| (i, j, m[(i, j)]))),
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn hermitian_hint(&self) -> Option<bool> {
        self.hermitian_hint
    }

    pub fn with_hermitian_hint(mut self, hint: Option<bool>) -> Self {
        self.hermitian_hint = hint;
        self
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, Complex64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().zip(&self.vals[span]).map(|(&c, &v)| (c as usize, v))
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, Complex64)> + '_ {
        (0..self.dim).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.cols[span.clone()].binary_search(&(c as u32)) {
            Ok(k) => self.vals[span.start + k],
            Err(_) => Complex64::new(0.0, 0.0),
        }
    }

    fn same_dim(&self, other: &Self) -> Result<()> {
        if self.dim != other.dim {
            return Err(Error::DimensionMismatch { left: self.dim, right: other.dim });
        }
        Ok(())
    }

    /// Sparse product `self · other` with the drop tolerance applied.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_dim(other)?;
        let dim = self.dim;
        let mut acc = vec![Complex64::new(0.0, 0.0); dim];
        let mut mark = vec![usize::MAX; dim];
        let mut touched: Vec<u32> = Vec::new();
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for r in 0..dim {
            touched.clear();
            for (k, a) in self.row(r) {
                for (c, b) in other.row(k) {
                    if mark[c] != r {
                        mark[c] = r;
                        acc[c] = Complex64::new(0.0, 0.0);
                        touched.push(c as u32);
                    }
                    acc[c] += a * b;
                }
            }
            touched.sort_unstable();
            for &c in &touched {
                let v = acc[c as usize];
                if v.norm() > DROP_TOL {
                    cols.push(c);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { dim, row_ptr, cols, vals, hermitian_hint: None })
    }

    /// `self + c · other`, keeping the union of both sparsity patterns.
    pub fn add_scaled(&self, c: Complex64, other: &Self) -> Result<Self> {
        self.same_dim(other)?;
        let dim = self.dim;
        let mut row_ptr = Vec::with_capacity(dim + 1);
        let mut cols = Vec::with_capacity(self.nnz() + other.nnz());
        let mut vals = Vec::with_capacity(self.nnz() + other.nnz());
        row_ptr.push(0);
        for r in 0..dim {
            let (sa, ea) = (self.row_ptr[r], self.row_ptr[r + 1]);
            let (sb, eb) = (other.row_ptr[r], other.row_ptr[r + 1]);
            let (mut i, mut j) = (sa, sb);
            while i < ea || j < eb {
                let ci = if i < ea { self.cols[i] } else { u32::MAX };
                let cj = if j < eb { other.cols[j] } else { u32::MAX };
                let (col, v) = if ci < cj {
                    i += 1;
                    (ci, self.vals[i - 1])
                } else if cj < ci {
                    j += 1;
                    (cj, c * other.vals[j - 1])
                } else {
                    i += 1;
                    j += 1;
                    (ci, self.vals[i - 1] + c * other.vals[j - 1])
                };
                if v.norm() > DROP_TOL {
                    cols.push(col);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { dim, row_ptr, cols, vals, hermitian_hint: None })
    }

    pub fn scale(&self, c: Complex64) -> Self {
        let mut out = self.clone();
        if c.norm() <= DROP_TOL {
            out.cols.clear();
            out.vals.clear();
            out.row_ptr.iter_mut().for_each(|p| *p = 0);
            return out;
        }
        out.vals.iter_mut().for_each(|v| *v *= c);
        if c.im != 0.0 {
            out.hermitian_hint = None;
        }
        out
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        let mut rows: Vec<Vec<(u32, Complex64)>> = vec![Vec::new(); self.dim];
        for (r, c, v) in self.iter() {
            rows[c].push((r as u32, v.conj()));
        }
        let mut out = Self::from_row_lists(self.dim, rows);
        out.hermitian_hint = self.hermitian_hint;
        out
    }

    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.mul(other)?.add_scaled(Complex64::new(-1.0, 0.0), &other.mul(self)?)
    }

    pub fn anticommutator(&self, other: &Self) -> Result<Self> {
        self.mul(other)?.add_scaled(Complex64::new(1.0, 0.0), &other.mul(self)?)
    }

    /// `y = self · x`.
    pub fn matvec(&self, x: &[Complex64], y: &mut [Complex64]) {
        assert_eq!(x.len(), self.dim);
        assert_eq!(y.len(), self.dim);
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = Complex64::new(0.0, 0.0);
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            *yr = acc;
        }
    }

    pub fn apply(&self, x: &[Complex64]) -> Vec<Complex64> {
        let mut y = vec![Complex64::new(0.0, 0.0); self.dim];
        self.matvec(x, &mut y);
        y
    }

    /// Largest entry modulus (the max-norm).
    pub fn max_abs(&self) -> f64 {
        self.vals.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        Ok(self.add_scaled(Complex64::new(-1.0, 0.0), other)?.max_abs())
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.max_abs_diff(&self.adjoint()).map(|d| d < tol).unwrap_or(false)
    }

    /// Principal submatrix on the given (strictly increasing) index list.
    /// This is `V† A V` for the isometry whose columns are the selected
    /// basis vectors.
    pub fn restrict(&self, basis: &[usize]) -> Result<Self> {
        if basis.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("restriction basis must be strictly increasing"));
        }
        if let Some(&last) = basis.last() {
            if last >= self.dim {
                return Err(invalid(format!("basis index {last} outside dimension {}", self.dim)));
            }
        }
        let n = basis.len();
        check_dim(n)?;
        let mut position = vec![u32::MAX; self.dim];
        for (k, &b) in basis.iter().enumerate() {
            position[b] = k as u32;
        }
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for &b in basis {
            for (c, v) in self.row(b) {
                let p = position[c];
                if p != u32::MAX {
                    cols.push(p);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Ok(Self { dim: n, row_ptr, cols, vals, hermitian_hint: self.hermitian_hint })
    }

    pub fn to_dense(&self) -> Mat<Complex64> {
        let mut m = Mat::<Complex64>::zeros(self.dim, self.dim);
        for (r, c, v) in self.iter() {
            m[(r, c)] = v;
        }
        m
    }

    /// Writes the coordinate text format: a `dim nnz` header line followed by
    /// one `row col re im` line per stored entry.
    pub fn write_coordinate<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.dim, self.nnz())?;
        for (r, c, v) in self.iter() {
            writeln!(w, "{} {} {:e} {:e}", r, c, v.re, v.im)?;
        }
        Ok(())
    }

    pub fn read_coordinate<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty coordinate file".into()))??;
        let mut it = header.split_whitespace();
        let parse_usize = |s: Option<&str>| -> Result<usize> {
            s.ok_or_else(|| Error::Parse("truncated line".into()))?
                .parse::<usize>()
                .map_err(|e| Error::Parse(e.to_string()))
        };
        let dim = parse_usize(it.next())?;
        let nnz = parse_usize(it.next())?;
        let mut triplets = Vec::with_capacity(nnz);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.split_whitespace();
            let r = parse_usize(f.next())?;
            let c = parse_usize(f.next())?;
            let mut real = || -> Result<f64> {
                f.next()
                    .ok_or_else(|| Error::Parse("truncated entry".into()))?
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(e.to_string()))
            };
            let re = real()?;
            let im = real()?;
            triplets.push((r, c, Complex64::new(re, im)));
        }
        if triplets.len() != nnz {
            return Err(Error::Parse(format!("header announces {nnz} entries, found {}", triplets.len())));
        }
        Self::from_triplets(dim, triplets)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sample() -> SparseOperator {
        SparseOperator::from_triplets(
            4,
            vec![(0, 1, c(1.0, 0.5)), (1, 0, c(-2.0, 0.0)), (2, 3, c(0.0, 1.0)), (3, 3, c(0.25, 0.0))],
        )
        .unwrap()
    }

    #[test]
    fn identity_is_neutral() {
        let x = sample();
        let id = SparseOperator::identity(4).unwrap();
        assert_eq!(id.mul(&x).unwrap(), x);
        assert_eq!(x.mul(&id).unwrap(), x);
    }

    #[test]
    fn add_scaled_zero_and_negation() {
        let a = sample();
        let b = SparseOperator::from_triplets(4, vec![(0, 0, c(3.0, 0.0))]).unwrap();
        assert_eq!(a.add_scaled(c(0.0, 0.0), &b).unwrap(), a);
        let z = a.add_scaled(c(-1.0, 0.0), &a).unwrap();
        assert_eq!(z.nnz(), 0);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let a = sample();
        let b = SparseOperator::identity(2).unwrap();
        assert!(matches!(a.mul(&b), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(a.add_scaled(c(1.0, 0.0), &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn non_power_of_two_rejected() {
        assert!(SparseOperator::identity(3).is_err());
    }

    #[test]
    fn duplicate_triplets_are_summed_and_tiny_dropped() {
        let op = SparseOperator::from_triplets(
            2,
            vec![(0, 1, c(1.0, 0.0)), (0, 1, c(-1.0, 1e-17)), (1, 1, c(2.0, 0.0))],
        )
        .unwrap();
        assert_eq!(op.nnz(), 1);
        assert_eq!(op.get(1, 1), c(2.0, 0.0));
    }

    #[test]
    fn coordinate_round_trip() {
        let a = sample();
        let mut buf = Vec::new();
        a.write_coordinate(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("4 4\n"));
        let b = SparseOperator::read_coordinate(&buf[..]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restrict_picks_principal_submatrix() {
        let a = sample();
        let sub = a.restrict(&[2, 3]).unwrap();
        assert_eq!(sub.dim(), 2);
        assert_eq!(sub.get(0, 1), c(0.0, 1.0));
        assert_eq!(sub.get(1, 1), c(0.25, 0.0));
    }

    #[test]
    fn adjoint_matches_dense_conjugate_transpose() {
        let a = sample();
        let d = a.to_dense();
        let ad = a.adjoint().to_dense();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(ad[(i, j)], d[(j, i)].conj());
            }
        }
    }
}
