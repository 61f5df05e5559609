//! SYK Hamiltonian, vectorized Lindblad generator and its parity blocks.
//!
//! The doubled space carries `2N` Majoranas `χ_1 … χ_2N`; the first `N`
//! realize the ket copy `ψ⁺_i = χ_i` and the last `N` the bra copy
//! `ψ⁻_i = χ_{N+i}`. The generator is
//!
//! ```text
//! L = −i H⁺ + i s_h H⁻ + i s_b μ Σ_i ψ⁺_i ψ⁻_i − μ N/2
//! ```
//!
//! where the signs `(s_h, s_b)` are fixed once per interaction order by a
//! self-test: the bath ground state must be annihilated by `L` (so it is the
//! infinite-temperature steady state) and, for `q = 4`, the opposite-parity
//! block at `N = 4` must contain the analytic 2×2 gap block.

use std::collections::BTreeMap;
use std::sync::{Mutex, OnceLock};

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::majorana::{
    build_majoranas, build_majoranas_with_budget, jordan_wigner_string, pauli_sum_to_sparse, MajoranaSet,
    PauliString, DEFAULT_MAX_QUBITS,
};
use crate::sparse::SparseOperator;

const C0: Complex64 = Complex64::new(0.0, 0.0);
const I: Complex64 = Complex64::new(0.0, 1.0);

/// Tolerance of the `[L, P] = 0` check.
pub const COMMUTATION_TOL: f64 = 1e-10;
/// Tolerance for `‖L |I⟩‖` during the build-time self-test.
pub const STEADY_STATE_TOL: f64 = 1e-9;

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Lexicographic enumeration of the sorted index tuples `i_1 < … < i_q`.
pub fn index_tuples(n: usize, q: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(binomial(n, q));
    let mut current: Vec<usize> = (0..q).collect();
    if q > n {
        return out;
    }
    loop {
        out.push(current.clone());
        let mut k = q;
        while k > 0 && current[k - 1] == n - q + k - 1 {
            k -= 1;
        }
        if k == 0 {
            break;
        }
        current[k - 1] += 1;
        for j in k..q {
            current[j] = current[j - 1] + 1;
        }
    }
    out
}

/// Variance `(q−1)!/N^{q−1}` of the Gaussian couplings.
pub fn coupling_variance(n: usize, q: usize) -> f64 {
    factorial(q - 1) / (n as f64).powi(q as i32 - 1)
}

/// One seeded draw of the random couplings `J_{i1…iq}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisorderRealization {
    pub n_majorana: usize,
    pub q: usize,
    pub seed: u64,
    /// Couplings in lexicographic order of their (0-based) index tuples.
    pub couplings: Vec<Coupling>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub indices: Vec<usize>,
    pub value: f64,
}

fn check_orders(n: usize, q: usize) -> Result<()> {
    if n == 0 || n % 2 == 1 {
        return Err(invalid(format!("Majorana count must be even and positive, got {n}")));
    }
    if q == 0 || q % 2 == 1 {
        return Err(invalid(format!("interaction order must be even and positive, got {q}")));
    }
    if q > n {
        return Err(invalid(format!("interaction order {q} exceeds Majorana count {n}")));
    }
    Ok(())
}

pub fn sample_disorder(n: usize, q: usize, seed: u64) -> Result<DisorderRealization> {
    check_orders(n, q)?;
    let sigma = coupling_variance(n, q).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let couplings = index_tuples(n, q)
        .into_iter()
        .map(|indices| Coupling { indices, value: normal.sample(&mut rng) })
        .collect();
    Ok(DisorderRealization { n_majorana: n, q, seed, couplings })
}

impl DisorderRealization {
    /// Realization with explicit coupling values in lexicographic tuple order.
    pub fn from_values(n: usize, q: usize, seed: u64, values: &[f64]) -> Result<Self> {
        check_orders(n, q)?;
        let tuples = index_tuples(n, q);
        if tuples.len() != values.len() {
            return Err(invalid(format!("expected {} couplings, got {}", tuples.len(), values.len())));
        }
        let couplings = tuples
            .into_iter()
            .zip(values)
            .map(|(indices, &value)| Coupling { indices, value })
            .collect();
        Ok(Self { n_majorana: n, q, seed, couplings })
    }

    /// Self-describing replay record (one JSON object).
    pub fn to_record(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_record(text: &str) -> Result<Self> {
        let d: Self = serde_json::from_str(text)?;
        check_orders(d.n_majorana, d.q)?;
        if d.couplings.len() != binomial(d.n_majorana, d.q) {
            return Err(Error::Parse("coupling count does not match (n, q)".into()));
        }
        Ok(d)
    }
}

/// Jordan–Wigner strings of `n` Majoranas (without building the matrices).
fn majorana_strings(n: usize) -> Vec<PauliString> {
    let qubits = (n / 2) as u32;
    (0..n).map(|i| jordan_wigner_string(i, qubits)).collect()
}

fn hamiltonian_terms(d: &DisorderRealization, strings: &[PauliString]) -> Vec<PauliString> {
    let prefactor = I.powu((d.q / 2) as u32);
    d.couplings
        .iter()
        .filter(|c| c.value != 0.0)
        .map(|c| {
            let prod = c
                .indices
                .iter()
                .fold(PauliString::identity(), |acc, &i| acc.mul(&strings[i]));
            prod.scale(prefactor * c.value)
        })
        .collect()
}

/// `H = i^{q/2} Σ J ψ_{i1}…ψ_{iq}`.
pub fn build_hamiltonian(d: &DisorderRealization, m: &MajoranaSet) -> Result<SparseOperator> {
    if m.n() != d.n_majorana {
        return Err(Error::DimensionMismatch { left: m.n(), right: d.n_majorana });
    }
    let h = match m.strings() {
        Some(strings) => pauli_sum_to_sparse(m.qubits(), &hamiltonian_terms(d, strings))?,
        None => {
            let prefactor = I.powu((d.q / 2) as u32);
            let mut h = SparseOperator::zeros(m.dim())?;
            for c in &d.couplings {
                let mut term = SparseOperator::identity(m.dim())?;
                for &i in &c.indices {
                    term = term.mul(m.op(i))?;
                }
                h = h.add_scaled(prefactor * c.value, &term)?;
            }
            h
        }
    };
    Ok(h.with_hermitian_hint(Some(true)))
}

/// Signs of the bra-copy Hamiltonian and of the bath term in the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VectorizationConvention {
    pub hamiltonian_sign: f64,
    pub bath_sign: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockLabel {
    Plus,
    Minus,
    Full,
}

impl BlockLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            BlockLabel::Plus => "plus",
            BlockLabel::Minus => "minus",
            BlockLabel::Full => "full",
        }
    }

    pub fn opposite(&self) -> Self {
        match self {
            BlockLabel::Plus => BlockLabel::Minus,
            BlockLabel::Minus => BlockLabel::Plus,
            BlockLabel::Full => BlockLabel::Full,
        }
    }
}

/// The assembled generator and, after [`parity_decompose`], its blocks.
#[derive(Debug, Clone)]
pub struct LiouvillianBundle {
    pub l: SparseOperator,
    pub h: SparseOperator,
    pub mu: f64,
    pub n_majorana: usize,
    pub q: usize,
    pub seed: u64,
    pub convention: VectorizationConvention,
    /// Vectorized infinite-temperature state, unit norm.
    pub steady_state: Vec<Complex64>,
    pub parity_op: Option<SparseOperator>,
    pub block_plus: Option<SparseOperator>,
    pub block_minus: Option<SparseOperator>,
    pub plus_basis: Vec<usize>,
    pub minus_basis: Vec<usize>,
    pub steady_block_label: Option<BlockLabel>,
}

impl LiouvillianBundle {
    pub fn dim(&self) -> usize {
        self.l.dim()
    }

    pub fn block(&self, label: BlockLabel) -> Result<&SparseOperator> {
        let b = match label {
            BlockLabel::Plus => self.block_plus.as_ref(),
            BlockLabel::Minus => self.block_minus.as_ref(),
            BlockLabel::Full => Some(&self.l),
        };
        b.ok_or_else(|| invalid("bundle has not been parity-decomposed"))
    }

    pub fn steady_label(&self) -> Result<BlockLabel> {
        self.steady_block_label.ok_or_else(|| invalid("bundle has not been parity-decomposed"))
    }

    /// Label of the block of opposite parity to the steady state.
    pub fn gap_label(&self) -> Result<BlockLabel> {
        Ok(self.steady_label()?.opposite())
    }

    pub fn gap_block(&self) -> Result<&SparseOperator> {
        self.block(self.gap_label()?)
    }

    pub fn steady_block(&self) -> Result<&SparseOperator> {
        self.block(self.steady_label()?)
    }

    /// Basis indices (into the full space) spanning the given block.
    pub fn basis(&self, label: BlockLabel) -> Result<Vec<usize>> {
        match label {
            BlockLabel::Plus if self.steady_block_label.is_some() => Ok(self.plus_basis.clone()),
            BlockLabel::Minus if self.steady_block_label.is_some() => Ok(self.minus_basis.clone()),
            BlockLabel::Full => Ok((0..self.dim()).collect()),
            _ => Err(invalid("bundle has not been parity-decomposed")),
        }
    }
}

struct GeneratorTerms {
    /// `−i H⁺ + i s_h H⁻`
    unitary: Vec<PauliString>,
    /// `i s_b Σ ψ⁺_i ψ⁻_i` (without the factor μ)
    bath: Vec<PauliString>,
    /// `i s_b ψ⁺_i ψ⁻_i`, one per site, used to build the steady state.
    bath_sites: Vec<PauliString>,
}

fn generator_terms(d: &DisorderRealization, conv: VectorizationConvention) -> GeneratorTerms {
    let n = d.n_majorana;
    let chi = majorana_strings(2 * n);
    let plus = hamiltonian_terms(d, &chi[..n]);
    let minus = hamiltonian_terms(d, &chi[n..]);
    let mut unitary: Vec<PauliString> = plus.iter().map(|t| t.scale(-I)).collect();
    unitary.extend(minus.iter().map(|t| t.scale(I * conv.hamiltonian_sign)));
    let bath_sites: Vec<PauliString> = (0..n)
        .map(|i| chi[i].mul(&chi[n + i]).scale(I * conv.bath_sign))
        .collect();
    GeneratorTerms { unitary, bath: bath_sites.clone(), bath_sites }
}

fn apply_string(p: &PauliString, x: &[Complex64], y: &mut [Complex64]) {
    for (col, &xc) in x.iter().enumerate() {
        if xc != C0 {
            y[col ^ p.x as usize] += p.amplitude(col as u64) * xc;
        }
    }
}

/// Unique joint `+1/2` eigenvector of the site bath terms, i.e. the
/// vectorized identity (infinite-temperature state).
fn bath_ground_state(qubits: u32, sites: &[PauliString]) -> Result<Vec<Complex64>> {
    let dim = 1usize << qubits;
    // Deterministic start vector with generic overlaps.
    let mut v: Vec<Complex64> = (0..dim)
        .map(|k| {
            let t = (k as f64 + 1.0) * 0.618_033_988_749_895;
            Complex64::new(1.0 + (t * 7.0).sin() * 0.3, (t * 3.0).cos() * 0.2)
        })
        .collect();
    let mut w = vec![C0; dim];
    for p in sites {
        w.iter_mut().zip(&v).for_each(|(wi, vi)| *wi = vi * 0.5);
        apply_string(p, &v, &mut w);
        std::mem::swap(&mut v, &mut w);
    }
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm < 1e-8 {
        return Err(Error::Consistency("bath projector annihilated the start vector".into()));
    }
    // Fix the global phase on the largest component for reproducibility.
    let pivot = v
        .iter()
        .copied()
        .max_by(|a, b| a.norm().partial_cmp(&b.norm()).unwrap())
        .unwrap_or(C0);
    let phase = pivot.conj() / pivot.norm();
    v.iter_mut().for_each(|z| *z *= phase / norm);
    Ok(v)
}

fn vector_norm(v: &[Complex64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

fn assemble(
    d: &DisorderRealization,
    mu: f64,
    conv: VectorizationConvention,
    max_qubits: u32,
) -> Result<LiouvillianBundle> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(invalid(format!("bath coupling must be a finite non-negative number, got {mu}")));
    }
    check_orders(d.n_majorana, d.q)?;
    let n = d.n_majorana;
    let qubits = n as u32;
    if qubits > max_qubits {
        return Err(Error::ResourceLimit(format!(
            "doubled space of {} Majoranas needs 2^{qubits} states, budget is 2^{max_qubits}",
            2 * n
        )));
    }
    let terms = generator_terms(d, conv);
    let mut all = terms.unitary.clone();
    all.extend(terms.bath.iter().map(|t| t.scale(Complex64::new(mu, 0.0))));
    all.push(PauliString { x: 0, z: 0, coeff: Complex64::new(-mu * n as f64 / 2.0, 0.0) });
    let l = pauli_sum_to_sparse(qubits, &all)?.with_hermitian_hint(Some(false));

    let single = build_majoranas_with_budget(n, max_qubits)?;
    let h = build_hamiltonian(d, &single)?;

    let steady_state = bath_ground_state(qubits, &terms.bath_sites)?;
    Ok(LiouvillianBundle {
        l,
        h,
        mu,
        n_majorana: n,
        q: d.q,
        seed: d.seed,
        convention: conv,
        steady_state,
        parity_op: None,
        block_plus: None,
        block_minus: None,
        plus_basis: Vec::new(),
        minus_basis: Vec::new(),
        steady_block_label: None,
    })
}

fn steady_residual(b: &LiouvillianBundle) -> (f64, f64) {
    let right = vector_norm(&b.l.apply(&b.steady_state));
    let left = vector_norm(&b.l.adjoint().apply(&b.steady_state));
    (right, left)
}

/// Checks the convention on a reference realization. Returns a reason on
/// rejection.
fn convention_self_test(q: usize, conv: VectorizationConvention) -> std::result::Result<(), String> {
    let n = q.max(4);
    let values: Vec<f64> = (0..binomial(n, q)).map(|k| 0.37 + 0.11 * k as f64).collect();
    let d = DisorderRealization::from_values(n, q, 0, &values).map_err(|e| e.to_string())?;
    let mu = 0.13;
    let b = assemble(&d, mu, conv, DEFAULT_MAX_QUBITS).map_err(|e| e.to_string())?;
    let (right, left) = steady_residual(&b);
    if right > STEADY_STATE_TOL || left > STEADY_STATE_TOL {
        return Err(format!("vectorized identity is not stationary (residuals {right:.2e}, {left:.2e})"));
    }
    let eig = b.l.to_dense().eigenvalues().map_err(|e| format!("{e:?}"))?;
    let zeros = eig.iter().filter(|z| z.norm() < 1e-9).count();
    if zeros != 1 {
        return Err(format!("expected exactly one zero eigenvalue, found {zeros}"));
    }
    if q == 4 {
        let b = parity_decompose(b).map_err(|e| e.to_string())?;
        let block = n4_gap_subblock(&b).map_err(|e| e.to_string())?;
        let j = values[0] / 2.0;
        let expected = [
            [Complex64::new(-2.0 * mu, -j), Complex64::new(-mu, 0.0)],
            [Complex64::new(-mu, 0.0), Complex64::new(-2.0 * mu, j)],
        ];
        for r in 0..2 {
            for c in 0..2 {
                if (block[r][c] - expected[r][c]).norm() > 1e-12 {
                    return Err(format!("2x2 gap block entry ({r},{c}) = {} differs from {}", block[r][c], expected[r][c]));
                }
            }
        }
    }
    Ok(())
}

/// Resolves (and caches) the sign convention for interaction order `q`.
pub fn resolve_convention(q: usize) -> Result<VectorizationConvention> {
    static CACHE: OnceLock<Mutex<BTreeMap<usize, VectorizationConvention>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    if let Some(c) = cache.lock().unwrap().get(&q) {
        return Ok(*c);
    }
    let literal = if (q / 2) % 2 == 0 { 1.0 } else { -1.0 };
    let candidates = [
        VectorizationConvention { hamiltonian_sign: literal, bath_sign: 1.0 },
        VectorizationConvention { hamiltonian_sign: -literal, bath_sign: 1.0 },
        VectorizationConvention { hamiltonian_sign: literal, bath_sign: -1.0 },
        VectorizationConvention { hamiltonian_sign: -literal, bath_sign: -1.0 },
    ];
    let mut reasons = Vec::new();
    for conv in candidates {
        match convention_self_test(q, conv) {
            Ok(()) => {
                cache.lock().unwrap().insert(q, conv);
                return Ok(conv);
            }
            Err(r) => reasons.push(format!("{conv:?}: {r}")),
        }
    }
    Err(Error::Consistency(format!("no sign convention passed the self-test: {}", reasons.join("; "))))
}

pub fn build_liouvillian(d: &DisorderRealization, mu: f64) -> Result<LiouvillianBundle> {
    build_liouvillian_with_budget(d, mu, DEFAULT_MAX_QUBITS)
}

pub fn build_liouvillian_with_budget(
    d: &DisorderRealization,
    mu: f64,
    max_qubits: u32,
) -> Result<LiouvillianBundle> {
    if !(mu >= 0.0) {
        return Err(invalid(format!("bath coupling must be non-negative, got {mu}")));
    }
    let conv = resolve_convention(d.q)?;
    let b = assemble(d, mu, conv, max_qubits)?;
    let (right, left) = steady_residual(&b);
    if right > STEADY_STATE_TOL || left > STEADY_STATE_TOL {
        return Err(Error::Consistency(format!(
            "vectorized identity is not stationary (residuals {right:.2e}, {left:.2e})"
        )));
    }
    Ok(b)
}

/// Splits the generator into the two eigenspaces of the total parity
/// (normalized product of all `2N` Majoranas).
pub fn parity_decompose(mut b: LiouvillianBundle) -> Result<LiouvillianBundle> {
    let n_total = 2 * b.n_majorana;
    let qubits = b.n_majorana as u32;
    let chi = majorana_strings(n_total);
    let mut p = chi.iter().fold(PauliString::identity(), |acc, s| acc.mul(s));
    // Each χ carries 1/√2; make the coefficient +1.
    let c = p.coeff * 2f64.powi(b.n_majorana as i32);
    let phase = if c.re.abs() > c.im.abs() { c.re.signum() } else { 0.0 };
    let fix = if phase != 0.0 {
        Complex64::new(1.0 / c.re, 0.0)
    } else {
        Complex64::new(0.0, -1.0 / c.im)
    };
    p = p.scale(fix * 2f64.powi(b.n_majorana as i32));
    if (p.coeff - Complex64::new(1.0, 0.0)).norm() > 1e-12 || p.x != 0 {
        return Err(Error::Consistency("parity operator is not a diagonal ±1 string".into()));
    }
    let dim = 1usize << qubits;
    let diag: Vec<Complex64> = (0..dim as u64).map(|k| p.amplitude(k)).collect();
    let parity_op = SparseOperator::diagonal(&diag)?.with_hermitian_hint(Some(true));

    let comm = b.l.commutator(&parity_op)?.max_abs();
    if comm > COMMUTATION_TOL {
        return Err(Error::Consistency(format!("[L, P] = {comm:.2e} exceeds {COMMUTATION_TOL:.0e}")));
    }
    let plus_basis: Vec<usize> = (0..dim).filter(|&k| diag[k].re > 0.0).collect();
    let minus_basis: Vec<usize> = (0..dim).filter(|&k| diag[k].re < 0.0).collect();
    let block_plus = b.l.restrict(&plus_basis)?.with_hermitian_hint(Some(false));
    let block_minus = b.l.restrict(&minus_basis)?.with_hermitian_hint(Some(false));

    let expectation: f64 = b
        .steady_state
        .iter()
        .zip(&diag)
        .map(|(v, d)| v.norm_sqr() * d.re)
        .sum();
    let label = if expectation > 0.5 {
        BlockLabel::Plus
    } else if expectation < -0.5 {
        BlockLabel::Minus
    } else {
        return Err(Error::Consistency(format!("steady state has mixed parity ({expectation})")));
    };

    b.parity_op = Some(parity_op);
    b.block_plus = Some(block_plus);
    b.block_minus = Some(block_minus);
    b.plus_basis = plus_basis;
    b.minus_basis = minus_basis;
    b.steady_block_label = Some(label);
    Ok(b)
}

/// Builds and decomposes in one go.
pub fn build_decomposed(d: &DisorderRealization, mu: f64) -> Result<LiouvillianBundle> {
    parity_decompose(build_liouvillian(d, mu)?)
}

fn inner(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// The 2×2 invariant sub-block of the `N = q = 4` gap block in the basis
/// `(u, −B u)`, where `u` lies in the `−iJ/2` eigenspace of the unitary part
/// and `B` is the bath operator.
pub fn n4_gap_subblock(b: &LiouvillianBundle) -> Result<[[Complex64; 2]; 2]> {
    if b.n_majorana != 4 || b.q != 4 {
        return Err(invalid("the analytic gap block exists only for N = q = 4"));
    }
    let gap = b.gap_label()?;
    let basis = b.basis(gap)?;
    let coupling = recover_n4_coupling(b)?;

    let terms = generator_terms(
        &DisorderRealization::from_values(4, 4, b.seed, &[coupling])?,
        b.convention,
    );
    let unitary = pauli_sum_to_sparse(4, &terms.unitary)?;
    let bath = pauli_sum_to_sparse(4, &terms.bath)?;
    let target = Complex64::new(0.0, -coupling / 2.0);
    let dim = b.dim();
    for &k in &basis {
        let mut e = vec![C0; dim];
        e[k] = Complex64::new(1.0, 0.0);
        // u = ½ (I + K / target) e projects onto the K = target eigenspace.
        let ke = unitary.apply(&e);
        let mut u: Vec<Complex64> = e.iter().zip(&ke).map(|(a, b)| 0.5 * (a + b / target)).collect();
        let nu = vector_norm(&u);
        if nu < 1e-6 {
            continue;
        }
        u.iter_mut().for_each(|z| *z /= nu);
        let mut v: Vec<Complex64> = bath.apply(&u).into_iter().map(|z| -z).collect();
        let nv = vector_norm(&v);
        if nv < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|z| *z /= nv);
        let lu = b.l.apply(&u);
        let lv = b.l.apply(&v);
        let m = [[inner(&u, &lu), inner(&u, &lv)], [inner(&v, &lu), inner(&v, &lv)]];
        // The pair must span an invariant subspace.
        let leak: f64 = lu
            .iter()
            .zip(&u)
            .zip(&v)
            .map(|((l, a), c)| (l - m[0][0] * a - m[1][0] * c).norm_sqr())
            .sum::<f64>()
            .sqrt();
        if leak > 1e-10 {
            return Err(Error::Consistency(format!("2x2 subspace is not invariant (leak {leak:.2e})")));
        }
        return Ok(m);
    }
    Err(Error::Consistency("could not construct the 2x2 gap subspace".into()))
}

fn recover_n4_coupling(b: &LiouvillianBundle) -> Result<f64> {
    // H = i² J ψ1ψ2ψ3ψ4 and Tr(ψ1ψ2ψ3ψ4)² = dim/16, so J = −16 Tr(H Ψ)/dim.
    let single = build_majoranas(4)?;
    let psi = single.op(0).mul(single.op(1))?.mul(single.op(2))?.mul(single.op(3))?;
    let tr = b.h.mul(&psi)?.trace();
    Ok(-16.0 * tr.re / b.h.dim() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tuple_counts() {
        assert_eq!(index_tuples(4, 4), vec![vec![0, 1, 2, 3]]);
        assert_eq!(index_tuples(8, 4).len(), 70);
        assert_eq!(index_tuples(6, 2)[0..3], [vec![0, 1], vec![0, 2], vec![0, 3]]);
    }

    #[test]
    fn disorder_errors() {
        assert!(matches!(sample_disorder(4, 6, 1), Err(Error::InvalidArgument(_))));
        assert!(matches!(sample_disorder(5, 4, 1), Err(Error::InvalidArgument(_))));
        assert!(sample_disorder(8, 4, 1).is_ok());
    }

    #[test]
    fn disorder_is_seed_deterministic() {
        assert_eq!(sample_disorder(8, 4, 42).unwrap(), sample_disorder(8, 4, 42).unwrap());
        assert_ne!(sample_disorder(8, 4, 42).unwrap(), sample_disorder(8, 4, 43).unwrap());
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        let d = sample_disorder(8, 4, 9).unwrap();
        let back = DisorderRealization::from_record(&d.to_record().unwrap()).unwrap();
        for (a, b) in d.couplings.iter().zip(&back.couplings) {
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
    }

    #[test]
    fn negative_mu_rejected() {
        let d = sample_disorder(4, 4, 1).unwrap();
        assert!(matches!(build_liouvillian(&d, -0.1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn convention_resolves_for_q4_and_q2() {
        let c4 = resolve_convention(4).unwrap();
        assert_eq!(c4.hamiltonian_sign, 1.0);
        assert!(resolve_convention(2).is_ok());
    }

    #[test]
    fn block_dimensions_add_up() {
        let d = sample_disorder(6, 4, 3).unwrap();
        let b = build_decomposed(&d, 0.2).unwrap();
        assert_eq!(b.block_plus.as_ref().unwrap().dim() + b.block_minus.as_ref().unwrap().dim(), 64);
        assert_eq!(b.gap_block().unwrap().dim(), 32);
    }

    #[test]
    fn steady_state_has_uniform_modulus_on_its_support() {
        let d = sample_disorder(8, 4, 5).unwrap();
        let b = build_liouvillian(&d, 0.3).unwrap();
        let support: Vec<f64> = b.steady_state.iter().map(|z| z.norm()).filter(|&a| a > 1e-12).collect();
        assert_eq!(support.len(), 16);
        for a in &support {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }
}
