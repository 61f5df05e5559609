//! Restarted block Arnoldi for a few eigenpairs of a large non-Hermitian
//! block, with shift-invert spectral transformation.
//!
//! The iteration keeps an orthonormal basis `V` and its image `W = A V`
//! explicitly. Each cycle expands `V` block by block, extracts Ritz pairs
//! from `G = V† W`, and restarts on the wanted Ritz vectors plus the
//! residual directions (a block Krylov–Schur restart). Acceptance is decided
//! on the original operator through a caller-supplied map, so the reported
//! pairs always satisfy `‖L v − λ v‖ < tol`.

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::sparse::SparseOperator;
use crate::spectrum::{dense_spectrum_with_limit, residual_norm, Method, SpectrumResult, DEFAULT_DENSE_LIMIT};

const C0: Complex64 = Complex64::new(0.0, 0.0);

/// Largest block factorized densely for shift-invert solves.
pub const DEFAULT_LU_LIMIT: usize = 8192;
/// Residual bound `‖L v − λ v‖` every reported eigenpair satisfies.
pub const DEFAULT_RESIDUAL_TOL: f64 = 1e-8;

pub trait LinearOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>>;

    fn apply_block(&self, xs: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>> {
        xs.iter().map(|x| self.apply(x)).collect()
    }
}

impl LinearOperator for SparseOperator {
    fn dim(&self) -> usize {
        SparseOperator::dim(self)
    }

    fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        Ok(SparseOperator::apply(self, x))
    }
}

/// `(A − σ)^{-1}` through a dense partial-pivoting LU factorization.
pub struct DenseLuSolver {
    lu: faer::linalg::solvers::PartialPivLu<Complex64>,
    dim: usize,
    shift: Complex64,
}

impl DenseLuSolver {
    pub fn new(a: &SparseOperator, shift: Complex64) -> Result<Self> {
        Self::with_limit(a, shift, DEFAULT_LU_LIMIT)
    }

    pub fn with_limit(a: &SparseOperator, shift: Complex64, limit: usize) -> Result<Self> {
        let n = a.dim();
        if n > limit {
            return Err(Error::ResourceLimit(format!("dense LU of dimension {n} exceeds the limit {limit}")));
        }
        let mut m = a.to_dense();
        for i in 0..n {
            m[(i, i)] -= shift;
        }
        let lu = m.partial_piv_lu();
        Ok(Self { lu, dim: n, shift })
    }

    pub fn shift(&self) -> Complex64 {
        self.shift
    }

    /// Ratio of smallest to largest pivot modulus.
    pub fn pivot_ratio(&self) -> f64 {
        let u = self.lu.U();
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for i in 0..self.dim {
            let p = u[(i, i)].norm();
            lo = lo.min(p);
            hi = hi.max(p);
        }
        if hi == 0.0 {
            0.0
        } else {
            lo / hi
        }
    }
}

impl LinearOperator for DenseLuSolver {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply(&self, x: &[Complex64]) -> Result<Vec<Complex64>> {
        Ok(self.apply_block(&[x.to_vec()])?.pop().unwrap())
    }

    fn apply_block(&self, xs: &[Vec<Complex64>]) -> Result<Vec<Vec<Complex64>>> {
        let rhs = Mat::<Complex64>::from_fn(self.dim, xs.len(), |i, j| xs[j][i]);
        let sol = self.lu.solve(&rhs);
        let out: Vec<Vec<Complex64>> = (0..xs.len()).map(|j| (0..self.dim).map(|i| sol[(i, j)]).collect()).collect();
        if out.iter().flatten().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Numeric("shift-invert solve produced non-finite values".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct KrylovOptions {
    pub block_size: usize,
    /// Maximum basis size; `None` picks `max(2·nev + 4·block, 40)`.
    pub basis_size: Option<usize>,
    /// Ritz vectors retained at a restart; `None` keeps `nev + block`.
    pub keep: Option<usize>,
    pub max_restarts: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        Self { block_size: 4, basis_size: None, keep: None, max_restarts: 400, tol: DEFAULT_RESIDUAL_TOL, seed: 0x5eed }
    }
}

/// An accepted eigenpair of the original operator.
#[derive(Debug, Clone)]
pub struct EigenPair {
    pub lambda: Complex64,
    pub vector: Vec<Complex64>,
    pub residual: f64,
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn axpy(y: &mut [Complex64], c: Complex64, x: &[Complex64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += c * xi);
}

/// Orthogonalizes `w` against `basis` twice (classical Gram–Schmidt with
/// reorthogonalization); returns the remaining norm.
fn orthogonalize(w: &mut [Complex64], basis: &[Vec<Complex64>]) -> f64 {
    for _ in 0..2 {
        for q in basis {
            let c = inner(q, w);
            axpy(w, -c, q);
        }
    }
    norm(w)
}

fn combine(vs: &[Vec<Complex64>], coeffs: &Mat<Complex64>, col: usize) -> Vec<Complex64> {
    let mut out = vec![C0; vs[0].len()];
    for (k, v) in vs.iter().enumerate() {
        let c = coeffs[(k, col)];
        if c != C0 {
            axpy(&mut out, c, v);
        }
    }
    out
}

/// Mapping from a Ritz pair `(x, θ)` of the transformed operator to an
/// eigenpair of the original one.
pub type RitzMap<'a> = dyn Fn(&[Complex64], Complex64) -> Result<EigenPair> + 'a;

/// Which end of the transformed spectrum is wanted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    LargestMagnitude,
    LargestReal,
}

impl Which {
    fn key(&self, z: Complex64) -> f64 {
        match self {
            Which::LargestMagnitude => z.norm(),
            Which::LargestReal => z.re,
        }
    }
}

/// The `nev` eigenpairs of `a` selected by `which`, mapped and accepted
/// through `map`.
pub fn eigs_selected(
    a: &dyn LinearOperator,
    nev: usize,
    which: Which,
    opts: &KrylovOptions,
    map: &RitzMap<'_>,
) -> Result<Vec<EigenPair>> {
    let n = a.dim();
    if nev == 0 {
        return Err(invalid("number of requested eigenvalues must be at least 1"));
    }
    let bs = opts.block_size.max(1);
    let m = opts.basis_size.unwrap_or((2 * nev + 4 * bs).max(40)).min(n);
    if nev + bs > m {
        return Err(invalid(format!("basis size {m} too small for {nev} eigenvalues")));
    }
    let keep = opts.keep.unwrap_or(nev + bs).clamp(nev, m - bs.min(m - nev));

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut random_vector = |basis: &[Vec<Complex64>], extra: &[Vec<Complex64>]| -> Option<Vec<Complex64>> {
        for _ in 0..8 {
            let mut v: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5))
                .collect();
            orthogonalize(&mut v, basis);
            let nv = orthogonalize(&mut v, extra);
            if nv > 1e-8 {
                v.iter_mut().for_each(|z| *z /= nv);
                return Some(v);
            }
        }
        None
    };

    let mut v: Vec<Vec<Complex64>> = Vec::with_capacity(m);
    let mut w: Vec<Vec<Complex64>> = Vec::with_capacity(m);
    // Projected matrix G = V† W, grown incrementally (row-major, m × m).
    let mut g = vec![C0; m * m];
    let mut pending: Vec<Vec<Complex64>> = Vec::new();
    for _ in 0..bs.min(n) {
        if let Some(x) = random_vector(&v, &pending) {
            pending.push(x);
        }
    }

    let mut best_residual = f64::INFINITY;
    for restart in 0..=opts.max_restarts {
        while v.len() < m {
            if pending.is_empty() {
                let last = v.len().saturating_sub(bs);
                let mut accepted: Vec<Vec<Complex64>> = Vec::new();
                for j in last..w.len() {
                    let mut c = w[j].clone();
                    let scale = norm(&c).max(1e-300);
                    orthogonalize(&mut c, &v);
                    let r = orthogonalize(&mut c, &accepted);
                    if r > 1e-10 * scale {
                        c.iter_mut().for_each(|z| *z /= r);
                        accepted.push(c);
                    }
                }
                if accepted.is_empty() {
                    match random_vector(&v, &[]) {
                        Some(x) => accepted.push(x),
                        None => break,
                    }
                }
                pending = accepted;
            }
            pending.truncate(m - v.len());
            let images = a.apply_block(&pending)?;
            let old = v.len();
            v.append(&mut pending);
            w.extend(images);
            let size = v.len();
            for i in 0..size {
                for j in 0..size {
                    if i >= old || j >= old {
                        g[i * m + j] = inner(&v[i], &w[j]);
                    }
                }
            }
        }
        let size = v.len();
        let gm = Mat::<Complex64>::from_fn(size, size, |i, j| g[i * m + j]);
        let eig = gm.eigen().map_err(|e| Error::Numeric(format!("projected eigenproblem failed: {e:?}")))?;
        let theta: Vec<Complex64> = (0..size).map(|i| eig.S()[i]).collect();
        let y = eig.U().to_owned();
        let mut order: Vec<usize> = (0..size).collect();
        order.sort_by(|&i, &j| which.key(theta[j]).partial_cmp(&which.key(theta[i])).unwrap());

        // Acceptance on the original operator.
        let mut found = Vec::with_capacity(nev);
        let mut all_ok = true;
        for &i in order.iter().take(nev) {
            let mut x = combine(&v, &y, i);
            let nx = norm(&x);
            x.iter_mut().for_each(|z| *z /= nx);
            let pair = map(&x, theta[i])?;
            if !(pair.residual < opts.tol) {
                all_ok = false;
            }
            found.push(pair);
        }
        let worst = found.iter().map(|p| p.residual).fold(0.0, f64::max);
        best_residual = best_residual.min(worst);
        if all_ok {
            return Ok(found);
        }
        if size == n {
            return Err(Error::Convergence { iterations: restart, best_residual });
        }

        // Restart on the wanted Ritz vectors.
        let idx: Vec<usize> = order.iter().take(keep).copied().collect();
        let ysel = Mat::<Complex64>::from_fn(size, idx.len(), |r, c| y[(r, idx[c])]);
        let q = ysel.qr().compute_thin_Q();
        let new_v: Vec<Vec<Complex64>> = (0..q.ncols()).map(|c| combine(&v, &q, c)).collect();
        let new_w: Vec<Vec<Complex64>> = (0..q.ncols()).map(|c| combine(&w, &q, c)).collect();
        let k = q.ncols();
        // G' = Q† G Q
        let gq = Mat::<Complex64>::from_fn(size, k, |i, c| (0..size).map(|j| g[i * m + j] * q[(j, c)]).sum());
        let mut g2 = vec![C0; m * m];
        for r in 0..k {
            for c in 0..k {
                g2[r * m + c] = (0..size).map(|i| q[(i, r)].conj() * gq[(i, c)]).sum();
            }
        }
        g = g2;
        // Residual directions W' − V' G' continue the expansion.
        let mut resid: Vec<(f64, Vec<Complex64>)> = new_w
            .iter()
            .map(|x| {
                let mut r = x.clone();
                let nr = orthogonalize(&mut r, &new_v);
                (nr, r)
            })
            .collect();
        resid.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut next: Vec<Vec<Complex64>> = Vec::new();
        for (_, mut r) in resid {
            if next.len() == bs {
                break;
            }
            let scale = norm(&r).max(1e-300);
            orthogonalize(&mut r, &new_v);
            let nr = orthogonalize(&mut r, &next);
            if nr > 1e-10 * scale && nr > 1e-14 {
                r.iter_mut().for_each(|z| *z /= nr);
                next.push(r);
            }
        }
        v = new_v;
        w = new_w;
        pending = next;
    }
    Err(Error::Convergence { iterations: opts.max_restarts, best_residual })
}

fn rayleigh_pair(block: &SparseOperator, x: &[Complex64]) -> EigenPair {
    let bx = block.apply(x);
    let lambda = inner(x, &bx);
    let residual = bx
        .iter()
        .zip(x)
        .map(|(b, xi)| (b - lambda * xi).norm_sqr())
        .sum::<f64>()
        .sqrt();
    EigenPair { lambda, vector: x.to_vec(), residual }
}

/// The `k` eigenvalues of `block` nearest `shift`, via shift-invert Arnoldi
/// on a dense LU factorization of `block − shift`.
pub fn krylov_near_zero(block: &SparseOperator, k: usize, shift: Complex64) -> Result<SpectrumResult> {
    krylov_near_shift_with(block, k, shift, &KrylovOptions::default(), DEFAULT_LU_LIMIT)
}

pub fn krylov_near_shift_with(
    block: &SparseOperator,
    k: usize,
    shift: Complex64,
    opts: &KrylovOptions,
    lu_limit: usize,
) -> Result<SpectrumResult> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let n = block.dim();
    if k >= n {
        // Exhaustive request.
        return dense_spectrum_with_limit(block, true, DEFAULT_DENSE_LIMIT.max(lu_limit));
    }
    let mut solver = DenseLuSolver::with_limit(block, shift, lu_limit)?;
    if solver.pivot_ratio() < 1e-13 {
        // The shift sits on an eigenvalue; move off it by a tiny amount.
        let scale = block.max_abs().max(1.0);
        solver = DenseLuSolver::with_limit(block, shift + Complex64::new(1e-7 * scale, 0.0), lu_limit)?;
    }
    let map = |x: &[Complex64], _theta: Complex64| -> Result<EigenPair> { Ok(rayleigh_pair(block, x)) };
    let pairs = eigs_selected(&solver, k, Which::LargestMagnitude, opts, &map)?;
    Ok(pairs_to_spectrum(block, pairs, Method::KrylovShiftInvert))
}

/// The `k` rightmost eigenvalues (largest real part) of `block`, by
/// restarted Arnoldi on the block itself. The rightmost eigenvalue lies on
/// the convex hull of the spectrum, so it is an exterior target and needs no
/// factorization.
pub fn krylov_rightmost(block: &SparseOperator, k: usize, opts: &KrylovOptions) -> Result<SpectrumResult> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if k >= block.dim() {
        return dense_spectrum_with_limit(block, true, block.dim());
    }
    let map = |x: &[Complex64], _theta: Complex64| -> Result<EigenPair> { Ok(rayleigh_pair(block, x)) };
    let pairs = eigs_selected(block, k, Which::LargestReal, opts, &map)?;
    Ok(pairs_to_spectrum(block, pairs, Method::KrylovRightmost))
}

pub(crate) fn pairs_to_spectrum(block: &SparseOperator, pairs: Vec<EigenPair>, method: Method) -> SpectrumResult {
    let mut vals = Vec::with_capacity(pairs.len());
    let mut vecs = Vec::with_capacity(pairs.len());
    let mut res = Vec::with_capacity(pairs.len());
    for p in pairs {
        res.push(residual_norm(block, &p.vector, p.lambda));
        vals.push(p.lambda);
        vecs.push(p.vector);
    }
    SpectrumResult::new(vals, Some(vecs), Some(res), method)
}
