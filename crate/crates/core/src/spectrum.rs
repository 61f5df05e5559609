//! Dense spectra, real/complex classification, the dissipative gap and the
//! eigenvector distance.

use std::io::Write;

use faer::Mat;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::BlockLabel;
use crate::sparse::SparseOperator;

/// Largest block handed to the dense eigensolver by default.
pub const DEFAULT_DENSE_LIMIT: usize = 4096;
/// Relative tolerance of the real/complex split (times the spectral scale).
pub const DEFAULT_EPS_IM_REL: f64 = 1e-8;
/// Conjugate partners must agree to this absolute tolerance.
pub const PAIRING_TOL: f64 = 1e-8;
/// Eigenvector pairs closer than this in `D` are flagged near-defective.
pub const NEAR_DEFECTIVE_D: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dense,
    KrylovShiftInvert,
    KrylovRightmost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Real,
    ComplexPairMember,
}

impl Classification {
    pub fn as_str(&self) -> &'static str {
        match self {
            Classification::Real => "real",
            Classification::ComplexPairMember => "complex_pair_member",
        }
    }
}

/// A pair of nearly coalesced eigenvectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearDefective {
    pub i: usize,
    pub j: usize,
    pub distance: f64,
    /// 2-norm condition number of the matrix `[v_i v_j]`.
    pub condition: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumResult {
    pub eigenvalues: Vec<Complex64>,
    pub eigenvectors: Option<Vec<Vec<Complex64>>>,
    pub block_label: BlockLabel,
    pub method: Method,
    pub mu: f64,
    pub realization_id: Option<u64>,
    /// Majoranas per copy, when known.
    pub n_majorana: Option<usize>,
    pub classification: Vec<Classification>,
    pub eps_im: f64,
    /// Residuals `‖L v − λ v‖`, when computed.
    pub residuals: Option<Vec<f64>>,
    pub near_defective: Vec<NearDefective>,
    pub warnings: Vec<String>,
}

fn sort_key(a: &Complex64, b: &Complex64) -> std::cmp::Ordering {
    a.re.abs()
        .partial_cmp(&b.re.abs())
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.im.partial_cmp(&b.im).unwrap_or(std::cmp::Ordering::Equal))
}

pub fn spectral_scale(eigs: &[Complex64]) -> f64 {
    eigs.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn default_eps_im(eigs: &[Complex64]) -> f64 {
    let s = spectral_scale(eigs);
    DEFAULT_EPS_IM_REL * if s > 0.0 { s } else { 1.0 }
}

impl SpectrumResult {
    /// Sorts, classifies with the default tolerance and flags near-defective
    /// pairs.
    pub fn new(
        eigenvalues: Vec<Complex64>,
        eigenvectors: Option<Vec<Vec<Complex64>>>,
        residuals: Option<Vec<f64>>,
        method: Method,
    ) -> Self {
        let mut order: Vec<usize> = (0..eigenvalues.len()).collect();
        order.sort_by(|&i, &j| sort_key(&eigenvalues[i], &eigenvalues[j]));
        let eigenvalues: Vec<Complex64> = order.iter().map(|&i| eigenvalues[i]).collect();
        let eigenvectors = eigenvectors.map(|v| order.iter().map(|&i| v[i].clone()).collect());
        let residuals = residuals.map(|r| order.iter().map(|&i| r[i]).collect());
        let eps = default_eps_im(&eigenvalues);
        let s = Self {
            eigenvalues,
            eigenvectors,
            block_label: BlockLabel::Full,
            method,
            mu: f64::NAN,
            realization_id: None,
            n_majorana: None,
            classification: Vec::new(),
            eps_im: eps,
            residuals,
            near_defective: Vec::new(),
            warnings: Vec::new(),
        };
        let mut s = classify_real(s, eps);
        s.near_defective = find_near_defective(&s);
        s
    }

    pub fn with_context(mut self, label: BlockLabel, mu: f64, seed: Option<u64>, n_majorana: Option<usize>) -> Self {
        self.block_label = label;
        self.mu = mu;
        self.realization_id = seed;
        self.n_majorana = n_majorana;
        self
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn real_count(&self) -> usize {
        self.classification.iter().filter(|c| **c == Classification::Real).count()
    }

    pub fn real_eigenvalues(&self) -> Vec<f64> {
        self.eigenvalues
            .iter()
            .zip(&self.classification)
            .filter(|(_, c)| **c == Classification::Real)
            .map(|(z, _)| z.re)
            .collect()
    }
}

fn normalize(v: &mut [Complex64]) {
    let n = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|z| *z /= n);
    }
}

fn column(m: &Mat<Complex64>, j: usize) -> Vec<Complex64> {
    (0..m.nrows()).map(|i| m[(i, j)]).collect()
}

/// Eigen-decomposition of a dense matrix; vectors are unit-normalized.
pub fn dense_eig(m: &Mat<Complex64>, want_vectors: bool) -> Result<(Vec<Complex64>, Option<Vec<Vec<Complex64>>>)> {
    if m.nrows() != m.ncols() {
        return Err(Error::DimensionMismatch { left: m.nrows(), right: m.ncols() });
    }
    if m.nrows() == 0 {
        return Ok((Vec::new(), want_vectors.then(Vec::new)));
    }
    if want_vectors {
        let e = m.eigen().map_err(|e| Error::Numeric(format!("dense eigensolver failed: {e:?}")))?;
        let s = e.S();
        let u = e.U();
        let n = m.nrows();
        let vals: Vec<Complex64> = (0..n).map(|i| s[i]).collect();
        let u = u.to_owned();
        let vecs = (0..n)
            .map(|j| {
                let mut v = column(&u, j);
                normalize(&mut v);
                v
            })
            .collect();
        Ok((vals, Some(vecs)))
    } else {
        let vals = m
            .eigenvalues()
            .map_err(|e| Error::Numeric(format!("dense eigensolver failed: {e:?}")))?;
        Ok((vals, None))
    }
}

pub fn dense_spectrum(block: &SparseOperator, want_vectors: bool) -> Result<SpectrumResult> {
    dense_spectrum_with_limit(block, want_vectors, DEFAULT_DENSE_LIMIT)
}

pub fn dense_spectrum_with_limit(block: &SparseOperator, want_vectors: bool, limit: usize) -> Result<SpectrumResult> {
    if block.dim() > limit {
        return Err(Error::ResourceLimit(format!(
            "block of dimension {} exceeds the dense limit {limit}",
            block.dim()
        )));
    }
    let m = block.to_dense();
    let (vals, vecs) = dense_eig(&m, want_vectors)?;
    let residuals = vecs.as_ref().map(|vs| {
        vs.iter()
            .zip(&vals)
            .map(|(v, &l)| residual_norm(block, v, l))
            .collect()
    });
    Ok(SpectrumResult::new(vals, vecs, residuals, Method::Dense))
}

/// `‖A v − λ v‖₂`.
pub fn residual_norm(a: &SparseOperator, v: &[Complex64], lambda: Complex64) -> f64 {
    a.apply(v)
        .iter()
        .zip(v)
        .map(|(av, x)| (av - lambda * x).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Re-classifies with `eps_im` and checks conjugate pairing. Unpaired complex
/// eigenvalues are recorded as warnings.
pub fn classify_real(mut s: SpectrumResult, eps_im: f64) -> SpectrumResult {
    s.eps_im = eps_im;
    s.classification = s
        .eigenvalues
        .iter()
        .map(|z| if z.im.abs() < eps_im { Classification::Real } else { Classification::ComplexPairMember })
        .collect();
    let complex: Vec<usize> = (0..s.len())
        .filter(|&i| s.classification[i] == Classification::ComplexPairMember)
        .collect();
    let mut used = vec![false; s.len()];
    for &i in &complex {
        if used[i] {
            continue;
        }
        let target = s.eigenvalues[i].conj();
        let partner = complex
            .iter()
            .copied()
            .filter(|&j| j != i && !used[j])
            .min_by(|&a, &b| {
                (s.eigenvalues[a] - target)
                    .norm()
                    .partial_cmp(&(s.eigenvalues[b] - target).norm())
                    .unwrap()
            });
        match partner {
            Some(j) if (s.eigenvalues[j] - target).norm() < PAIRING_TOL.max(eps_im) => {
                used[i] = true;
                used[j] = true;
            }
            _ => {
                used[i] = true;
                s.warnings.push(format!("unpaired complex eigenvalue {}", s.eigenvalues[i]));
            }
        }
    }
    s
}

/// `Γ0 = min |Re λ|` over a spectrum of the gap block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapValue {
    pub gamma0: f64,
    pub mu: f64,
    pub n_total: usize,
    pub realization_id: Option<u64>,
}

pub fn dissipative_gap(s: &SpectrumResult, steady_block: bool) -> Result<GapValue> {
    if steady_block {
        return Err(invalid("the dissipative gap is defined on the block opposite to the steady state"));
    }
    let gamma0 = s
        .eigenvalues
        .iter()
        .map(|z| z.re.abs())
        .fold(f64::INFINITY, f64::min);
    if !gamma0.is_finite() {
        return Err(invalid("empty spectrum"));
    }
    Ok(GapValue {
        gamma0,
        mu: s.mu,
        n_total: s.n_majorana.map(|n| 2 * n).unwrap_or(0),
        realization_id: s.realization_id,
    })
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// `D = 1 − |⟨v1|v2⟩|` for unit vectors.
pub fn eigenvector_distance(v1: &[Complex64], v2: &[Complex64]) -> Result<f64> {
    if v1.len() != v2.len() {
        return Err(Error::DimensionMismatch { left: v1.len(), right: v2.len() });
    }
    Ok((1.0 - inner(v1, v2).norm()).clamp(0.0, 1.0))
}

/// `1 − σ_max(Q1† Q2)` for two sets of vectors, each orthonormalized first.
/// Reduces to [`eigenvector_distance`] for single vectors.
pub fn subspace_distance(a: &[Vec<Complex64>], b: &[Vec<Complex64>]) -> Result<f64> {
    let qa = orthonormalize(a)?;
    let qb = orthonormalize(b)?;
    if qa.is_empty() || qb.is_empty() {
        return Err(invalid("empty subspace"));
    }
    let m = Mat::<Complex64>::from_fn(qa.len(), qb.len(), |i, j| inner(&qa[i], &qb[j]));
    let sv = m
        .singular_values()
        .map_err(|e| Error::Numeric(format!("{e:?}")))?;
    let smax = sv.iter().copied().fold(0.0, f64::max);
    Ok((1.0 - smax).clamp(0.0, 1.0))
}

fn orthonormalize(vs: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>> {
    let mut out: Vec<Vec<Complex64>> = Vec::new();
    for v in vs {
        if let Some(q) = out.first() {
            if q.len() != v.len() {
                return Err(Error::DimensionMismatch { left: q.len(), right: v.len() });
            }
        }
        let mut w = v.clone();
        for _ in 0..2 {
            for q in &out {
                let c = inner(q, &w);
                w.iter_mut().zip(q).for_each(|(x, y)| *x -= c * y);
            }
        }
        let n = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if n > 1e-10 {
            w.iter_mut().for_each(|z| *z /= n);
            out.push(w);
        }
    }
    Ok(out)
}

/// Condition number of `[v1 v2]` from its 2×2 Gram matrix.
pub fn pair_condition(v1: &[Complex64], v2: &[Complex64]) -> f64 {
    let a = inner(v1, v1).re;
    let d = inner(v2, v2).re;
    let b = inner(v1, v2).norm();
    let tr = a + d;
    let disc = ((a - d).powi(2) + 4.0 * b * b).sqrt();
    let lmax = 0.5 * (tr + disc);
    let lmin = (0.5 * (tr - disc)).max(0.0);
    if lmin == 0.0 {
        f64::INFINITY
    } else {
        (lmax / lmin).sqrt()
    }
}

fn find_near_defective(s: &SpectrumResult) -> Vec<NearDefective> {
    let Some(vecs) = s.eigenvectors.as_ref() else { return Vec::new() };
    let scale = spectral_scale(&s.eigenvalues).max(1.0);
    let mut out = Vec::new();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            // Only nearly equal eigenvalues can belong to coalescing vectors.
            if (s.eigenvalues[i] - s.eigenvalues[j]).norm() > 1e-3 * scale {
                continue;
            }
            let d = eigenvector_distance(&vecs[i], &vecs[j]).unwrap_or(1.0);
            if d < NEAR_DEFECTIVE_D {
                out.push(NearDefective { i, j, distance: d, condition: pair_condition(&vecs[i], &vecs[j]) });
            }
        }
    }
    out
}

/// Writes `mu,seed,block,re,im,classification` rows.
pub fn write_spectrum_csv<W: Write>(mut w: W, spectra: &[SpectrumResult], header: bool) -> Result<()> {
    if header {
        writeln!(w, "mu,seed,block,re,im,classification")?;
    }
    for s in spectra {
        let seed = s.realization_id.map(|x| x.to_string()).unwrap_or_default();
        for (z, c) in s.eigenvalues.iter().zip(&s.classification) {
            writeln!(w, "{},{},{},{:e},{:e},{}", s.mu, seed, s.block_label.as_str(), z.re, z.im, c.as_str())?;
        }
    }
    Ok(())
}
