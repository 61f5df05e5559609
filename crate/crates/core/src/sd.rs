//! Large-N Schwinger–Dyson equations of the dissipative SYK model on the
//! closed contour of length `t` that computes `Tr e^{tL}`.
//!
//! The kernel acting on `(ψ⁺, ψ⁻)` is `M = Â ⊗ 1 + dt A − dt² Σ` with the bath
//! term `A_{+−} = −iμ`, `A_{−+} = iμ`, and `G = M⁻¹`. Time is discretized on
//! `m` points with the Cayley derivative `Â = 2(S+1)⁻¹(S−1)`, `S` the
//! antiperiodic shift, so the free propagator is `½ sgn(τ−τ')`.

use std::io::Write;

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, MatRef};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fit::{fit_damped_sine, fit_line};

/// Below this coupling the decay of `G_{++}` is fitted with the oscillatory form.
pub const OSCILLATORY_FIT_BELOW: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdGrid {
    pub t: f64,
    pub m: usize,
    pub dt: f64,
    pub weights: Vec<f64>,
}

impl SdGrid {
    pub fn new(t: f64, m: usize) -> Result<Self> {
        if m < 16 {
            return Err(invalid(format!("the contour needs at least 16 points, got {m}")));
        }
        if m % 2 == 1 {
            // The antiperiodic Cayley derivative is singular for odd m.
            return Err(invalid(format!("the number of contour points must be even, got {m}")));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(invalid(format!("contour length must be positive, got {t}")));
        }
        let dt = t / m as f64;
        Ok(Self { t, m, dt, weights: vec![dt; m] })
    }

    pub fn tau(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdParams {
    pub mu: f64,
    pub j: f64,
    pub q: usize,
}

impl SdParams {
    pub fn validate(&self) -> Result<()> {
        if self.q < 2 || self.q % 2 != 0 {
            return Err(invalid(format!("q must be even and at least 2, got {}", self.q)));
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return Err(invalid(format!("μ must be non-negative, got {}", self.mu)));
        }
        if !self.j.is_finite() {
            return Err(invalid("J must be finite"));
        }
        Ok(())
    }

    /// `t_ab`: 1 on the diagonal, `−(−1)^{q/2}` off it.
    pub fn t_ab(&self, same: bool) -> f64 {
        if same {
            1.0
        } else if (self.q / 2) % 2 == 0 {
            -1.0
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdOptions {
    pub mixing: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Iterations after which a residual 10³ above the best one so far counts
    /// as divergence.
    pub patience: usize,
    /// History length of the Anderson extrapolation; 0 gives plain damped
    /// iteration.
    pub anderson_depth: usize,
}

impl Default for SdOptions {
    fn default() -> Self {
        Self { mixing: 0.3, tol: 1e-8, max_iter: 5000, patience: 200, anderson_depth: 8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    SystemSeeded,
    BathSeeded,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::SystemSeeded => "system_seeded",
            Branch::BathSeeded => "bath_seeded",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    Plus,
    Minus,
}

#[derive(Debug, Clone)]
pub struct SdState {
    pub m: usize,
    /// `2m × 2m`, rows and columns `0..m` are `ψ⁺`, `m..2m` are `ψ⁻`.
    pub g: Mat<Complex64>,
    pub sigma: Mat<Complex64>,
    pub params: SdParams,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
    pub branch: Option<Branch>,
    /// `Re log det M − log|det M₀|` at the returned `G`.
    pub logdet_ratio: f64,
}

fn offset(c: Leg, m: usize) -> usize {
    match c {
        Leg::Plus => 0,
        Leg::Minus => m,
    }
}

impl SdState {
    pub fn block(&self, a: Leg, b: Leg) -> MatRef<'_, Complex64> {
        self.g.as_ref().submatrix(offset(a, self.m), offset(b, self.m), self.m, self.m)
    }

    /// `G_{++}(τ_k, 0)` for `k = 0..m`.
    pub fn g_pp_slice(&self) -> Vec<Complex64> {
        (0..self.m).map(|k| self.g[(k, 0)]).collect()
    }

    /// `max_i |G_{++}(τ_i + dt, τ_i) − ½|` including the antiperiodic wrap.
    pub fn equal_time_deviation(&self) -> f64 {
        let m = self.m;
        let mut worst = 0.0f64;
        for i in 0..m {
            let v = if i + 1 < m { self.g[(i + 1, i)] } else { -self.g[(0, m - 1)] };
            worst = worst.max((v - 0.5).norm());
        }
        worst
    }

    /// `max |G_ab(i,j) + G_ba(j,i)|`.
    pub fn antisymmetry_defect(&self) -> f64 {
        let n = 2 * self.m;
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                worst = worst.max((self.g[(i, j)] + self.g[(j, i)]).norm());
            }
        }
        worst
    }
}

/// `2(S+1)⁻¹(S−1)` with `(Sψ)_i = ψ_{i+1}` and `ψ_m = −ψ_0`.
pub fn cayley_derivative(m: usize) -> Mat<f64> {
    let mut plus = Mat::<f64>::identity(m, m);
    let mut minus = Mat::<f64>::from_fn(m, m, |i, j| if i == j { -2.0 } else { 0.0 });
    for i in 0..m - 1 {
        plus[(i, i + 1)] = 1.0;
        minus[(i, i + 1)] = 2.0;
    }
    plus[(m - 1, 0)] = -1.0;
    minus[(m - 1, 0)] = -2.0;
    plus.partial_piv_lu().solve(&minus)
}

/// `−(m/2) ln(1 − (μ dt/2)²)`: removes the first-order factor the Cayley
/// scheme attaches to the local bath term, so that `J = 0` gives
/// `ln(1 + e^{−μ_eff t})` with `μ_eff = μ + O(dt²)`.
fn bath_term_correction(grid: &SdGrid, mu: f64) -> f64 {
    let x = 0.5 * mu * grid.dt;
    -0.5 * grid.m as f64 * (1.0 - x * x).ln()
}

struct Workspace {
    grid: SdGrid,
    params: SdParams,
    /// `M` without the self-energy.
    bare: Mat<Complex64>,
    logdet_free: f64,
    /// Phase factors multiplying `J²` in `Σ_{++}` and `Σ_{−−}`; 1 for the
    /// physical problem.
    kappa: (Complex64, Complex64),
}

fn log_abs_det(u: MatRef<'_, Complex64>) -> Result<f64> {
    let mut s = 0.0;
    for i in 0..u.nrows() {
        let d = u[(i, i)].norm();
        if d == 0.0 || !d.is_finite() {
            return Err(Error::Numeric("singular Dyson kernel".into()));
        }
        s += d.ln();
    }
    Ok(s)
}

impl Workspace {
    fn new(grid: &SdGrid, params: SdParams) -> Result<Self> {
        params.validate()?;
        let m = grid.m;
        let a = cayley_derivative(m);
        let mut bare = Mat::<Complex64>::zeros(2 * m, 2 * m);
        for i in 0..m {
            for j in 0..m {
                bare[(i, j)] = a[(i, j)].into();
                bare[(m + i, m + j)] = a[(i, j)].into();
            }
        }
        let logdet_free = log_abs_det(bare.partial_piv_lu().U())?;
        let c = Complex64::new(0.0, params.mu * grid.dt);
        for i in 0..m {
            bare[(i, m + i)] -= c;
            bare[(m + i, i)] += c;
        }
        let one = Complex64::new(1.0, 0.0);
        Ok(Self { grid: grid.clone(), params, bare, logdet_free, kappa: (one, one) })
    }

    fn self_energy(&self, g: &Mat<Complex64>) -> Mat<Complex64> {
        let m = self.grid.m;
        let (j2, q) = (self.params.j * self.params.j, self.params.q as i32);
        let cross = self.params.t_ab(false);
        Mat::from_fn(2 * m, 2 * m, |i, k| {
            let w = match (i < m, k < m) {
                (true, true) => self.kappa.0,
                (false, false) => self.kappa.1,
                _ => Complex64::new(cross, 0.0),
            };
            -j2 * w * g[(i, k)].powi(q - 1)
        })
    }

    /// Returns `(M⁻¹, Re log det M − log|det M₀|)` for the given self-energy.
    fn invert(&self, sigma: &Mat<Complex64>) -> Result<(Mat<Complex64>, f64)> {
        let dt2 = self.grid.dt * self.grid.dt;
        let k = Mat::from_fn(self.bare.nrows(), self.bare.ncols(), |i, j| self.bare[(i, j)] - sigma[(i, j)] * dt2);
        let lu = k.partial_piv_lu();
        let logdet = log_abs_det(lu.U())?;
        let g = lu.inverse();
        if !g.col_iter().all(|c| c.iter().all(|v| v.re.is_finite() && v.im.is_finite())) {
            return Err(Error::Numeric("non-finite Green's function".into()));
        }
        Ok((g, logdet - self.logdet_free))
    }

    fn iterate(&self, seed: &Mat<Complex64>, opts: &SdOptions) -> Result<SdState> {
        let m = self.grid.m;
        let n = 2 * m;
        let params = self.params;
        let mut x = flatten(seed);
        let mut trace: Vec<f64> = Vec::new();
        let mut best = f64::INFINITY;
        let mut best_at = 0;
        // With J = 0 the update does not depend on G, so it is taken unmixed.
        let beta = if params.j == 0.0 { 1.0 } else { opts.mixing };
        let mut hist = Anderson::new(opts.anderson_depth);
        for it in 1..=opts.max_iter {
            let sigma = self.self_energy(&unflatten(&x, n));
            let (g_new, _) = self.invert(&sigma)?;
            let gx = flatten(&g_new);
            let f: Vec<Complex64> = gx.iter().zip(&x).map(|(a, b)| a - b).collect();
            let res = f.iter().fold(0.0f64, |w, v| w.max(v.norm()));
            if !res.is_finite() {
                return Err(Error::Numeric(format!("non-finite residual at iteration {it}")));
            }
            trace.push(res);
            if res < best {
                best = res;
                best_at = it;
            }
            if res < opts.tol {
                let sigma = self.self_energy(&g_new);
                let (_, ld) = self.invert(&sigma)?;
                return Ok(SdState { m, g: g_new, sigma, params, converged: true, residual: res, iterations: it, branch: None, logdet_ratio: ld });
            }
            if it > opts.patience && res > 1e3 * best && it - best_at > opts.patience {
                return Err(Error::Diverged { iteration: it, residual: res, trace });
            }
            if res > 10.0 * best {
                hist.clear();
            }
            x = hist.step(&x, &f, beta);
        }
        let g = unflatten(&x, n);
        let sigma = self.self_energy(&g);
        let (g_new, ld) = self.invert(&sigma)?;
        let res = max_abs_diff(&g_new, &g);
        Ok(SdState { m, g, sigma, params, converged: false, residual: res, iterations: opts.max_iter, branch: None, logdet_ratio: ld })
    }
}

fn flatten(g: &Mat<Complex64>) -> Vec<Complex64> {
    let mut v = Vec::with_capacity(g.nrows() * g.ncols());
    for j in 0..g.ncols() {
        v.extend(g.col(j).iter().copied());
    }
    v
}

fn unflatten(v: &[Complex64], n: usize) -> Mat<Complex64> {
    Mat::from_fn(n, n, |i, j| v[j * n + i])
}

/// Anderson acceleration of the map `x ↦ x + f(x)` with a bounded history.
struct Anderson {
    depth: usize,
    dx: Vec<Vec<Complex64>>,
    df: Vec<Vec<Complex64>>,
    last: Option<(Vec<Complex64>, Vec<Complex64>)>,
}

impl Anderson {
    fn new(depth: usize) -> Self {
        Self { depth, dx: Vec::new(), df: Vec::new(), last: None }
    }

    fn clear(&mut self) {
        self.dx.clear();
        self.df.clear();
        self.last = None;
    }

    fn step(&mut self, x: &[Complex64], f: &[Complex64], beta: f64) -> Vec<Complex64> {
        if self.depth > 0 {
            if let Some((px, pf)) = self.last.take() {
                self.dx.push(x.iter().zip(&px).map(|(a, b)| a - b).collect());
                self.df.push(f.iter().zip(&pf).map(|(a, b)| a - b).collect());
                if self.dx.len() > self.depth {
                    self.dx.remove(0);
                    self.df.remove(0);
                }
            }
            self.last = Some((x.to_vec(), f.to_vec()));
        }
        let mut out: Vec<Complex64> = x.iter().zip(f).map(|(a, b)| a + b * beta).collect();
        let k = self.df.len();
        if k == 0 {
            return out;
        }
        let dot = |a: &[Complex64], b: &[Complex64]| a.iter().zip(b).map(|(u, v)| u.conj() * v).sum::<Complex64>();
        let mut gram = Mat::<Complex64>::from_fn(k, k, |i, j| dot(&self.df[i], &self.df[j]));
        let scale = (0..k).map(|i| gram[(i, i)].re).fold(0.0f64, f64::max).max(1e-300);
        for i in 0..k {
            gram[(i, i)] += 1e-12 * scale;
        }
        let rhs = Mat::<Complex64>::from_fn(k, 1, |i, _| dot(&self.df[i], f));
        let gamma = gram.partial_piv_lu().solve(&rhs);
        if !(0..k).all(|i| gamma[(i, 0)].re.is_finite() && gamma[(i, 0)].im.is_finite()) {
            self.clear();
            return out;
        }
        for i in 0..k {
            let c = gamma[(i, 0)];
            for ((o, dx), df) in out.iter_mut().zip(&self.dx[i]).zip(&self.df[i]) {
                *o -= c * (dx + df * beta);
            }
        }
        out
    }
}

fn max_abs_diff(a: &Mat<Complex64>, b: &Mat<Complex64>) -> f64 {
    let mut worst = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            worst = worst.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    worst
}

fn check_seed(grid: &SdGrid, seed: &Mat<Complex64>) -> Result<()> {
    if seed.nrows() != 2 * grid.m || seed.ncols() != 2 * grid.m {
        return Err(Error::DimensionMismatch { left: 2 * grid.m, right: seed.nrows() });
    }
    Ok(())
}

/// The exact `J = 0` state: the self-energy vanishes and one inversion solves
/// the Dyson equation.
pub fn free_state(grid: &SdGrid, mu: f64) -> Result<SdState> {
    let params = SdParams { mu, j: 0.0, q: 4 };
    let ws = Workspace::new(grid, params)?;
    let sigma = Mat::<Complex64>::zeros(2 * grid.m, 2 * grid.m);
    let (g, ld) = ws.invert(&sigma)?;
    Ok(SdState { m: grid.m, g, sigma, params, converged: true, residual: 0.0, iterations: 1, branch: None, logdet_ratio: ld })
}

/// Fixed-point iteration of `G = (∂ − Σ[G])⁻¹`: damped updates
/// `G ← G + α F(G)` with `α = mixing`, extrapolated over the last
/// `anderson_depth` residuals `F`.
///
/// Stops when the max-norm change of `G` drops below `tol`. Running out of
/// iterations returns the last state with `converged = false`; a residual
/// that keeps growing is reported as divergence.
pub fn sd_iterate(grid: &SdGrid, params: SdParams, seed: &Mat<Complex64>, opts: &SdOptions) -> Result<SdState> {
    if !(opts.mixing > 0.0 && opts.mixing <= 1.0) {
        return Err(invalid(format!("mixing must lie in (0, 1], got {}", opts.mixing)));
    }
    check_seed(grid, seed)?;
    Workspace::new(grid, params)?.iterate(seed, opts)
}

/// Phase steps of the continuation from the Euclidean problem.
const PHASE_STEPS: usize = 8;

/// Closed-system (`μ = 0`) saddle with `G_{−−} = G_{++}*`.
///
/// The real-time equations are reached by rotating `J² → −e^{±iφ} J²` in the
/// two copies from the Euclidean problem at `φ = 0` to `φ = π`, each step
/// seeded by the previous one.
pub fn closed_system_state(grid: &SdGrid, j: f64, q: usize, opts: &SdOptions) -> Result<SdState> {
    let params = SdParams { mu: 0.0, j, q };
    let mut ws = Workspace::new(grid, params)?;
    let mut g = free_state(grid, 0.0)?.g;
    let mut last = None;
    let mut phi = 0.0f64;
    let mut step = std::f64::consts::PI / PHASE_STEPS as f64;
    loop {
        let k = -Complex64::from_polar(1.0, phi);
        ws.kappa = (k, k.conj());
        let s = ws.iterate(&g, opts);
        match s {
            Ok(s) if s.converged => {
                g = s.g.clone();
                last = Some(s);
                if phi >= std::f64::consts::PI {
                    break;
                }
            }
            _ if step > 1e-3 && last.is_some() => {
                phi -= step;
                step *= 0.5;
            }
            Ok(s) => return Err(Error::Convergence { iterations: s.iterations, best_residual: s.residual }),
            Err(e) => return Err(e),
        }
        phi = (phi + step).min(std::f64::consts::PI);
    }
    let mut s = last.expect("loop exits after a converged step");
    s.params = params;
    Ok(s)
}

/// Solves from one of the two seeds: the closed-system (`μ = 0`) solution for
/// [`Branch::SystemSeeded`], the `J = 0` dissipative solution for
/// [`Branch::BathSeeded`].
pub fn solve_branch(grid: &SdGrid, params: SdParams, branch: Branch, opts: &SdOptions) -> Result<SdState> {
    params.validate()?;
    let seed = match branch {
        Branch::BathSeeded => free_state(grid, params.mu)?.g,
        Branch::SystemSeeded => closed_system_state(grid, params.j, params.q, opts)?.g,
    };
    let mut s = sd_iterate(grid, params, &seed, opts)?;
    s.branch = Some(branch);
    check_physical(&s, grid, opts)?;
    Ok(s)
}

/// Equal-time deviations up to this many grid steps are accepted.
pub const EQUAL_TIME_STEPS: f64 = 5.0;

/// Rejects fixed points that violate the Majorana normalization or the
/// antisymmetry of `G`; the iteration can land on such states from a poor seed.
/// Non-converged states pass through unchanged.
pub fn check_physical(state: &SdState, grid: &SdGrid, opts: &SdOptions) -> Result<()> {
    if !state.converged {
        return Ok(());
    }
    let eqt = state.equal_time_deviation();
    if !(eqt < EQUAL_TIME_STEPS * grid.dt) {
        return Err(Error::Consistency(format!(
            "unphysical fixed point: equal-time deviation {eqt:.3e} exceeds {EQUAL_TIME_STEPS}·dt"
        )));
    }
    let anti = state.antisymmetry_defect();
    let limit = (100.0 * opts.tol).max(1e-6);
    if !(anti < limit) {
        return Err(Error::Consistency(format!("unphysical fixed point: antisymmetry defect {anti:.3e}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionValue {
    pub t: f64,
    pub is: f64,
    pub branch: Option<Branch>,
    pub converged: bool,
}

/// `iS = ln 2 − μt/2 + ½ log det(M)/det(M₀) − ½ ∑∫∫ Σ_ab G_ab − (J²/2q) ∑ t_ab ∫∫ G_ab^q`
/// per Majorana, with `M₀` the free kernel.
pub fn evaluate_action(state: &SdState, grid: &SdGrid) -> Result<ActionValue> {
    if !state.converged {
        return Err(invalid("the action is only defined at a converged saddle point"));
    }
    if state.m != grid.m {
        return Err(Error::DimensionMismatch { left: state.m, right: grid.m });
    }
    let p = state.params;
    let m = grid.m;
    let dt2 = grid.dt * grid.dt;
    let (same, cross) = (p.t_ab(true), p.t_ab(false));
    let mut sg = Complex64::new(0.0, 0.0);
    let mut gq = Complex64::new(0.0, 0.0);
    for j in 0..2 * m {
        for i in 0..2 * m {
            let g = state.g[(i, j)];
            sg += state.sigma[(i, j)] * g;
            let t = if (i < m) == (j < m) { same } else { cross };
            gq += g.powi(p.q as i32) * t;
        }
    }
    let is = std::f64::consts::LN_2 - 0.5 * p.mu * grid.t + 0.5 * state.logdet_ratio + bath_term_correction(grid, p.mu)
        - 0.5 * dt2 * sg.re
        - p.j * p.j / (2.0 * p.q as f64) * dt2 * gq.re;
    Ok(ActionValue { t: grid.t, is, branch: state.branch, converged: true })
}

/// `J = 0` propagator of the discretized equations at `τ_k`, `0 < k < m`:
/// the continuum form with `μ_eff = (2/dt) artanh(μ dt/2)` and amplitude
/// `1/(1 − (μ dt/2)²)`.
pub fn free_g_pp_lattice(mu: f64, grid: &SdGrid, k: usize) -> f64 {
    let x = 0.5 * mu * grid.dt;
    let mu_eff = 2.0 * x.atanh() / grid.dt;
    free_g_pp(mu_eff, grid.t, grid.tau(k)) / (1.0 - x * x)
}

/// Continuum `J = 0` propagator `G_{++}(τ) = ½ cosh(μ(t/2−τ)) / cosh(μt/2)`, `0 < τ < t`.
pub fn free_g_pp(mu: f64, t: f64, tau: f64) -> f64 {
    0.5 * (mu * (0.5 * t - tau)).cosh() / (0.5 * mu * t).cosh()
}

/// Continuum `J = 0` action `ln(1 + e^{−μt})`.
pub fn free_action(mu: f64, t: f64) -> f64 {
    (-mu * t).exp().ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Transition {
    /// The branches cross transversally at `t_star`.
    FirstOrder { t_star: f64 },
    /// A single saddle, or branches that coincide.
    Crossover,
    /// Distinct branches that do not cross inside the scanned window.
    NoCrossing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominantCurve {
    pub t: Vec<f64>,
    pub is: Vec<f64>,
    pub branch: Vec<Option<Branch>>,
    pub transition: Transition,
}

/// Branches closer than this count as the same saddle.
pub const MERGE_TOL: f64 = 1e-6;

/// Pointwise maximum of the two branch curves and the transition verdict.
/// `system[i]`, `bath[i]` are the actions at `t[i]`, `None` where that branch
/// did not converge.
pub fn dominant_branch(t: &[f64], system: &[Option<f64>], bath: &[Option<f64>]) -> Result<DominantCurve> {
    if system.len() != t.len() || bath.len() != t.len() {
        return Err(Error::DimensionMismatch { left: t.len(), right: system.len().min(bath.len()) });
    }
    let mut is = Vec::with_capacity(t.len());
    let mut branch = Vec::with_capacity(t.len());
    for i in 0..t.len() {
        match (system[i], bath[i]) {
            (Some(a), Some(b)) if a >= b => {
                is.push(a);
                branch.push(Some(Branch::SystemSeeded));
            }
            (Some(_), Some(b)) | (None, Some(b)) => {
                is.push(b);
                branch.push(Some(Branch::BathSeeded));
            }
            (Some(a), None) => {
                is.push(a);
                branch.push(Some(Branch::SystemSeeded));
            }
            (None, None) => {
                is.push(f64::NAN);
                branch.push(None);
            }
        }
    }
    // Signed separation where both branches exist and are distinct.
    let diffs: Vec<(f64, f64)> = (0..t.len())
        .filter_map(|i| match (system[i], bath[i]) {
            (Some(a), Some(b)) if (a - b).abs() > MERGE_TOL => Some((t[i], a - b)),
            _ => None,
        })
        .collect();
    let transition = if diffs.is_empty() {
        Transition::Crossover
    } else {
        match diffs.windows(2).find(|w| w[0].1 * w[1].1 < 0.0) {
            Some(w) => {
                let ((t0, d0), (t1, d1)) = (w[0], w[1]);
                Transition::FirstOrder { t_star: t0 + (t1 - t0) * d0 / (d0 - d1) }
            }
            None => Transition::NoCrossing,
        }
    };
    Ok(DominantCurve { t: t.to_vec(), is, branch, transition })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayForm {
    Oscillatory,
    LogLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub gamma0: f64,
    pub form: DecayForm,
    /// `Ω` of the oscillatory form.
    pub omega: Option<f64>,
    /// Root-mean-square residual in the fitted variable.
    pub rms_residual: f64,
    pub points: usize,
}

/// Fits the decay rate of samples `g(τ)`: oscillatory form
/// `A e^{−Γ0 τ} sin(Ωτ + b)` for `μ < 0.15`, `ln|g| = −Γ0 τ + c` otherwise.
pub fn fit_decay(tau: &[f64], g: &[f64], mu: f64) -> Result<DecayFit> {
    if tau.len() != g.len() {
        return Err(Error::DimensionMismatch { left: tau.len(), right: g.len() });
    }
    if mu < OSCILLATORY_FIT_BELOW {
        let f = fit_damped_sine(tau, g)?;
        let rms = (f.rss / tau.len() as f64).sqrt();
        if !(f.params[1].is_finite()) {
            return Err(Error::FitFailure(format!("oscillatory fit returned {:?}", f.params)));
        }
        return Ok(DecayFit { gamma0: f.params[1], form: DecayForm::Oscillatory, omega: Some(f.params[2]), rms_residual: rms, points: tau.len() });
    }
    let (x, y): (Vec<f64>, Vec<f64>) = tau.iter().zip(g).filter(|(_, v)| v.abs() > 0.0).map(|(&t, &v)| (t, v.abs().ln())).unzip();
    if x.len() < 3 {
        return Err(Error::FitFailure("fewer than 3 non-zero samples in the window".into()));
    }
    let f = fit_line(&x, &y, None)?;
    let rms = (f.chi2 / x.len() as f64).sqrt();
    Ok(DecayFit { gamma0: -f.slope, form: DecayForm::LogLinear, omega: None, rms_residual: rms, points: x.len() })
}

/// Decay rate of `G_{++}(τ)` over `τ ∈ [window.0, window.1]`, `window.1 ≤ t/2`.
pub fn fit_gamma0(state: &SdState, grid: &SdGrid, mu: f64, window: (f64, f64)) -> Result<DecayFit> {
    if !state.converged {
        return Err(invalid("decay fits need a converged state"));
    }
    let (lo, hi) = window;
    if !(lo > 0.0 && lo < hi && hi <= 0.5 * grid.t + 1e-12) {
        return Err(invalid(format!("fit window ({lo}, {hi}) must lie inside (0, t/2]")));
    }
    let g = state.g_pp_slice();
    let (tau, val): (Vec<f64>, Vec<f64>) = (0..grid.m).map(|k| (grid.tau(k), g[k].re)).filter(|(t, _)| *t >= lo && *t <= hi).unzip();
    fit_decay(&tau, &val, mu)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRecord {
    pub mu: f64,
    pub j: f64,
    pub q: usize,
    pub t: f64,
    pub m: usize,
    pub branch: Branch,
    pub is: Option<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
}

/// `τ,G_{++}` rows of a state.
pub fn write_g_pp_csv<W: Write>(mut w: W, state: &SdState, grid: &SdGrid) -> Result<()> {
    writeln!(w, "tau,g_pp_re,g_pp_im")?;
    for (k, v) in state.g_pp_slice().iter().enumerate() {
        writeln!(w, "{:.17e},{:.17e},{:.17e}", grid.tau(k), v.re, v.im)?;
    }
    Ok(())
}

/// Decay rate of the `J = 0` lattice propagator, `(2/dt) artanh(μ dt/2)`.
pub fn free_decay_rate(mu: f64, grid: &SdGrid) -> f64 {
    2.0 * (0.5 * mu * grid.dt).atanh() / grid.dt
}

/// Both seeded branches over an ascending list of contour lengths on a
/// fixed number of grid points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchScan {
    pub params: SdParams,
    pub m: usize,
    pub t: Vec<f64>,
    pub system: Vec<Option<f64>>,
    pub bath: Vec<Option<f64>>,
    pub records: Vec<SolveRecord>,
    pub dominant: DominantCurve,
}

fn record(params: SdParams, grid: &SdGrid, branch: Branch, outcome: &std::result::Result<(SdState, f64), String>) -> SolveRecord {
    let base = SolveRecord {
        mu: params.mu,
        j: params.j,
        q: params.q,
        t: grid.t,
        m: grid.m,
        branch,
        is: None,
        residual: f64::NAN,
        iterations: 0,
        converged: false,
        error: None,
    };
    match outcome {
        Ok((s, is)) => SolveRecord { is: Some(*is), residual: s.residual, iterations: s.iterations, converged: true, ..base },
        Err(e) => SolveRecord { error: Some(e.clone()), ..base },
    }
}

/// Converged, physical solution from `seed` with its action.
fn attempt(grid: &SdGrid, params: SdParams, seed: &Mat<Complex64>, opts: &SdOptions) -> std::result::Result<(SdState, f64), String> {
    let s = sd_iterate(grid, params, seed, opts).map_err(|e| e.to_string())?;
    if !s.converged {
        return Err(format!("not converged after {} iterations (residual {:.3e})", s.iterations, s.residual));
    }
    check_physical(&s, grid, opts).map_err(|e| e.to_string())?;
    let is = evaluate_action(&s, grid).map_err(|e| e.to_string())?.is;
    Ok((s, is))
}

/// Follows both branches through `t_list`.
///
/// The bath branch is continued from its previous solution, falling back to
/// the `J = 0` seed. The system branch is tried from its previous solution
/// and from the closed-system saddle at the same `t` (itself continued in
/// `t`); the larger action among the physical candidates is kept.
pub fn scan_branches(params: SdParams, t_list: &[f64], m: usize, opts: &SdOptions) -> Result<BranchScan> {
    params.validate()?;
    if t_list.is_empty() || t_list.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("contour lengths must be non-empty and strictly ascending"));
    }
    let closed_params = SdParams { mu: 0.0, ..params };
    let (mut prev_bath, mut prev_sys, mut prev_closed): (Option<Mat<Complex64>>, Option<Mat<Complex64>>, Option<Mat<Complex64>>) =
        (None, None, None);
    let mut system = Vec::with_capacity(t_list.len());
    let mut bath = Vec::with_capacity(t_list.len());
    let mut records = Vec::new();
    for &t in t_list {
        let grid = SdGrid::new(t, m)?;

        let mut b = Err("no seed".to_string());
        if let Some(seed) = &prev_bath {
            b = attempt(&grid, params, seed, opts);
        }
        if b.is_err() {
            b = attempt(&grid, params, &free_state(&grid, params.mu)?.g, opts);
        }

        let marched_closed = prev_closed.as_ref().map(|seed| attempt(&grid, closed_params, seed, opts));
        let closed = match marched_closed {
            Some(Ok((c, _))) => Some(c.g),
            _ => closed_system_state(&grid, params.j, params.q, opts)
                .ok()
                .filter(|c| check_physical(c, &grid, opts).is_ok())
                .map(|c| c.g),
        };
        let mut candidates = Vec::new();
        if let Some(seed) = &prev_sys {
            candidates.push(attempt(&grid, params, seed, opts));
        }
        match &closed {
            Some(seed) => candidates.push(attempt(&grid, params, seed, opts)),
            None => candidates.push(Err("closed-system seed unavailable".to_string())),
        }
        let mut sys: std::result::Result<(SdState, f64), String> = Err(String::new());
        for c in candidates {
            sys = match (sys, c) {
                (Ok(a), Ok(b)) => Ok(if b.1 > a.1 { b } else { a }),
                (Ok(a), Err(_)) => Ok(a),
                (Err(_), c) => c,
            };
        }

        records.push(record(params, &grid, Branch::SystemSeeded, &sys));
        records.push(record(params, &grid, Branch::BathSeeded, &b));
        system.push(sys.as_ref().ok().map(|x| x.1));
        bath.push(b.as_ref().ok().map(|x| x.1));
        if let Ok((s, _)) = sys {
            prev_sys = Some(s.g);
        }
        if let Ok((s, _)) = b {
            prev_bath = Some(s.g);
        }
        if closed.is_some() {
            prev_closed = closed;
        }
    }
    let dominant = dominant_branch(t_list, &system, &bath)?;
    Ok(BranchScan { params, m, t: t_list.to_vec(), system, bath, records, dominant })
}

/// `2 a(dt/2) − a(dt)`: removes the first-order grid error of the action.
pub fn richardson(coarse: f64, fine: f64) -> f64 {
    2.0 * fine - coarse
}

/// Branch-wise [`richardson`] combination of two scans on `m` and `2m` points.
pub fn extrapolate_scans(coarse: &BranchScan, fine: &BranchScan) -> Result<BranchScan> {
    if fine.m != 2 * coarse.m || fine.t != coarse.t || fine.params != coarse.params {
        return Err(invalid("extrapolation needs the same scan on m and 2m points"));
    }
    let comb = |a: &[Option<f64>], b: &[Option<f64>]| -> Vec<Option<f64>> {
        a.iter().zip(b).map(|(x, y)| Some(richardson((*x)?, (*y)?))).collect()
    };
    let system = comb(&coarse.system, &fine.system);
    let bath = comb(&coarse.bath, &fine.bath);
    let dominant = dominant_branch(&coarse.t, &system, &bath)?;
    let mut records = coarse.records.clone();
    records.extend(fine.records.iter().cloned());
    Ok(BranchScan { params: coarse.params, m: fine.m, t: coarse.t.clone(), system, bath, records, dominant })
}

/// Fit window used for decay rates unless configured otherwise.
pub const DEFAULT_FIT_WINDOW: (f64, f64) = (2.0, 8.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayPoint {
    pub mu: f64,
    pub is: Option<f64>,
    pub fit: Option<DecayFit>,
    pub error: Option<String>,
    /// `G_{++}(τ_k, 0)` of the solution.
    #[serde(skip)]
    pub g_pp: Vec<Complex64>,
}

/// Bath-branch decay rates for each `μ` on one grid. Solutions are continued
/// from large to small `μ`, falling back to the `J = 0` seed; the result is in
/// ascending `μ`.
pub fn decay_scan(mu_list: &[f64], j: f64, q: usize, grid: &SdGrid, window: (f64, f64), opts: &SdOptions) -> Result<Vec<DecayPoint>> {
    let mut mus = mu_list.to_vec();
    if mus.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(invalid("μ values must be finite and non-negative"));
    }
    mus.sort_by(|a, b| b.partial_cmp(a).unwrap());
    mus.dedup();
    let mut prev: Option<Mat<Complex64>> = None;
    let mut out = Vec::with_capacity(mus.len());
    for &mu in &mus {
        let params = SdParams { mu, j, q };
        params.validate()?;
        let mut r = Err("no seed".to_string());
        if let Some(seed) = &prev {
            r = attempt(grid, params, seed, opts);
        }
        if r.is_err() {
            r = attempt(grid, params, &free_state(grid, mu)?.g, opts);
        }
        let point = match r {
            Ok((s, is)) => {
                let fit = fit_gamma0(&s, grid, mu, window);
                let g_pp = s.g_pp_slice();
                prev = Some(s.g);
                match fit {
                    Ok(f) => DecayPoint { mu, is: Some(is), fit: Some(f), error: None, g_pp },
                    Err(e) => DecayPoint { mu, is: Some(is), fit: None, error: Some(e.to_string()), g_pp },
                }
            }
            Err(e) => DecayPoint { mu, is: None, fit: None, error: Some(e), g_pp: Vec::new() },
        };
        out.push(point);
    }
    out.reverse();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_derivative_inverse_is_half_sign() {
        let a = cayley_derivative(16);
        let g = a.partial_piv_lu().inverse();
        for i in 0..16 {
            for j in 0..16 {
                let want = if i > j { 0.5 } else if i < j { -0.5 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-12, "{i} {j} {}", g[(i, j)]);
            }
        }
    }

    #[test]
    fn line_intersection_of_synthetic_branches() {
        let t: Vec<f64> = (0..11).map(|i| i as f64 * 0.6).collect();
        let a: Vec<Option<f64>> = t.iter().map(|t| Some(-0.1 * t)).collect();
        let b: Vec<Option<f64>> = t.iter().map(|_| Some(-0.3)).collect();
        let d = dominant_branch(&t, &a, &b).unwrap();
        match d.transition {
            Transition::FirstOrder { t_star } => assert!((t_star - 3.0).abs() < 1e-12),
            other => panic!("{other:?}"),
        }
        assert_eq!(d.branch[0], Some(Branch::SystemSeeded));
        assert_eq!(d.branch[10], Some(Branch::BathSeeded));
    }

    #[test]
    fn identical_branches_are_a_crossover() {
        let t = [1.0, 2.0, 3.0];
        let a = [Some(0.5), Some(0.4), Some(0.3)];
        let d = dominant_branch(&t, &a, &a).unwrap();
        assert_eq!(d.transition, Transition::Crossover);
    }

    #[test]
    fn exponential_decay_fit() {
        let tau: Vec<f64> = (1..100).map(|i| 0.1 * i as f64).collect();
        let g: Vec<f64> = tau.iter().map(|t| 0.5 * (-0.2 * t).exp()).collect();
        let f = fit_decay(&tau, &g, 0.3).unwrap();
        assert!((f.gamma0 - 0.2).abs() < 1e-6);
        assert_eq!(f.form, DecayForm::LogLinear);
    }

    #[test]
    fn oscillatory_decay_fit() {
        let tau: Vec<f64> = (0..200).map(|i| 0.5 + 0.1 * i as f64).collect();
        let g: Vec<f64> = tau.iter().map(|&t| 0.4 * (-0.1 * t).exp() * (0.7 * t + 0.3).sin()).collect();
        let f = fit_decay(&tau, &g, 0.05).unwrap();
        assert!((f.gamma0 - 0.1).abs() < 1e-4);
        assert!((f.omega.unwrap() - 0.7).abs() < 1e-4);
    }

    #[test]
    fn bad_arguments() {
        assert!(SdGrid::new(1.0, 8).is_err());
        let g = SdGrid::new(1.0, 16).unwrap();
        let p = SdParams { mu: 0.1, j: 1.0, q: 4 };
        let seed = free_state(&g, 0.1).unwrap().g;
        assert!(sd_iterate(&g, p, &seed, &SdOptions { mixing: 0.0, ..Default::default() }).is_err());
        assert!(sd_iterate(&g, SdParams { q: 3, ..p }, &seed, &SdOptions::default()).is_err());
    }
}
