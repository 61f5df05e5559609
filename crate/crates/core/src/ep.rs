//! Eigenvalue continuation in μ and exceptional-point location.

use std::io::Write;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::krylov::{krylov_rightmost, KrylovOptions};
use crate::model::{build_decomposed, BlockLabel, DisorderRealization};
use crate::sparse::SparseOperator;
use crate::spectrum::{dense_spectrum, dense_spectrum_with_limit, spectral_scale, subspace_distance, SpectrumResult};

/// Bisection stops once the μ bracket is narrower than this.
pub const EP_WIDTH: f64 = 1e-6;
/// Tighter width used when D has not yet dropped below [`EP_DISTANCE`].
pub const EP_WIDTH_FALLBACK: f64 = 1e-10;
/// Eigenvector distance below which a coalescence counts as an EP.
pub const EP_DISTANCE: f64 = 1e-4;
/// A match is ambiguous when a competing eigenvalue lies within this factor
/// of the matched distance from the predicted position.
pub const AMBIGUITY_RATIO: f64 = 2.0;
/// Relative distance below which eigenvalues at one μ are treated as copies.
pub const CLUSTER_TOL: f64 = 1e-6;

/// A one-parameter family of non-Hermitian matrices.
pub trait SpectralFamily: Sync {
    /// Spectrum at `mu`; eigenvectors are attached when `want_vectors`.
    fn spectrum(&self, mu: f64, want_vectors: bool) -> Result<SpectrumResult>;

    fn seed(&self) -> Option<u64> {
        None
    }

    fn block_name(&self) -> String {
        "gap".into()
    }
}

/// Gap block (parity opposite to the steady state) of one realization.
/// The block is affine in μ, so it is assembled once as `base + μ·slope`.
#[derive(Debug, Clone)]
pub struct GapBlockFamily {
    pub disorder: DisorderRealization,
    /// Blocks up to this dimension are diagonalized densely.
    pub dense_limit: usize,
    /// Eigenvalues kept per μ for larger blocks.
    pub k: usize,
    label: BlockLabel,
    base: SparseOperator,
    slope: SparseOperator,
}

impl GapBlockFamily {
    pub fn new(disorder: DisorderRealization) -> Result<Self> {
        let b1 = build_decomposed(&disorder, 1.0)?;
        let label = b1.gap_label()?;
        let b2 = build_decomposed(&disorder, 2.0)?;
        if b2.gap_label()? != label {
            return Err(Error::Consistency("gap block label changes with μ".into()));
        }
        let one = Complex64::new(1.0, 0.0);
        let slope = b2.block(label)?.add_scaled(-one, b1.block(label)?)?;
        let base = b1.block(label)?.add_scaled(-one, &slope)?;
        Ok(Self { disorder, dense_limit: crate::spectrum::DEFAULT_DENSE_LIMIT, k: 16, label, base, slope })
    }

    pub fn block(&self, mu: f64) -> Result<SparseOperator> {
        if !(mu >= 0.0) {
            return Err(invalid(format!("μ must be non-negative, got {mu}")));
        }
        self.base.add_scaled(Complex64::new(mu, 0.0), &self.slope)
    }

    pub fn label(&self) -> BlockLabel {
        self.label
    }
}

impl SpectralFamily for GapBlockFamily {
    fn spectrum(&self, mu: f64, want_vectors: bool) -> Result<SpectrumResult> {
        let block = self.block(mu)?;
        let s = if block.dim() <= self.dense_limit {
            dense_spectrum_with_limit(&block, want_vectors, self.dense_limit)?
        } else {
            let opts = KrylovOptions { block_size: 1, basis_size: Some(60), max_restarts: 5000, ..Default::default() };
            krylov_rightmost(&block, self.k, &opts)?
        };
        Ok(s.with_context(self.label, mu, Some(self.disorder.seed), Some(self.disorder.n_majorana)))
    }

    fn seed(&self) -> Option<u64> {
        Some(self.disorder.seed)
    }
}

/// `[[−iα − 2μ, −μ], [−μ, iα − 2μ]]`, whose EP sits at `μ = α`.
#[derive(Debug, Clone, Copy)]
pub struct TwoByTwoFamily {
    pub alpha: f64,
}

impl TwoByTwoFamily {
    pub fn matrix(&self, mu: f64) -> SparseOperator {
        let c = |re: f64, im: f64| Complex64::new(re, im);
        SparseOperator::from_triplets(
            2,
            vec![
                (0, 0, c(-2.0 * mu, -self.alpha)),
                (0, 1, c(-mu, 0.0)),
                (1, 0, c(-mu, 0.0)),
                (1, 1, c(-2.0 * mu, self.alpha)),
            ],
        )
        .expect("2x2 family")
    }
}

impl SpectralFamily for TwoByTwoFamily {
    fn spectrum(&self, mu: f64, want_vectors: bool) -> Result<SpectrumResult> {
        Ok(dense_spectrum(&self.matrix(mu), want_vectors)?.with_context(
            crate::model::BlockLabel::Full,
            mu,
            None,
            None,
        ))
    }

    fn block_name(&self) -> String {
        "synthetic".into()
    }
}

/// Closed-form gap of the `N = q = 4` model.
pub fn n4_oracle_gap(j: f64, mu: f64) -> f64 {
    let a = j.abs() / 2.0;
    if mu < a {
        2.0 * mu
    } else {
        2.0 * mu - (mu * mu - a * a).sqrt()
    }
}

/// Closed-form pair of gap eigenvalues `−2μ ± sqrt(μ² − (J/2)²)`.
pub fn n4_oracle_pair(j: f64, mu: f64) -> [Complex64; 2] {
    let s = Complex64::new(mu * mu - j * j / 4.0, 0.0).sqrt();
    let c = Complex64::new(-2.0 * mu, 0.0);
    [c - s, c + s]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchTrace {
    pub id: usize,
    pub mu_grid: Vec<f64>,
    pub values: Vec<Complex64>,
    /// Number of coincident copies (exact degeneracy) carried by the branch.
    pub multiplicity: usize,
    pub partner_id: Option<usize>,
    pub became_real_at: Option<f64>,
}

impl BranchTrace {
    pub fn value_at(&self, mu: f64) -> Option<Complex64> {
        self.mu_grid
            .iter()
            .position(|&m| m == mu)
            .map(|i| self.values[i])
    }

    pub fn spans(&self, mu: f64) -> bool {
        match (self.mu_grid.first(), self.mu_grid.last()) {
            (Some(&a), Some(&b)) => a <= mu && mu <= b,
            _ => false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub radius_factor: f64,
    pub max_refine_depth: usize,
    pub min_step: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        Self { radius_factor: 3.0, max_refine_depth: 12, min_step: 1e-6 }
    }
}

#[derive(Debug, Clone)]
pub struct Sweep {
    pub traces: Vec<BranchTrace>,
    /// The grid actually sampled (requested points plus refinements).
    pub mu_grid: Vec<f64>,
    pub eps_im: f64,
    pub warnings: Vec<String>,
    pub seed: Option<u64>,
    pub block: String,
}

/// The first `k` eigenvalues with numerically coincident values replaced by
/// their cluster mean. Near a defective point the copies scatter by about
/// the square root of machine precision while their mean stays accurate.
fn take_window(s: &SpectrumResult, k: usize) -> Vec<Complex64> {
    let mut v: Vec<Complex64> = s.eigenvalues.iter().take(k).copied().collect();
    let tol = CLUSTER_TOL * spectral_scale(&s.eigenvalues).max(1e-300);
    let mut label = vec![usize::MAX; v.len()];
    let mut next = 0;
    for i in 0..v.len() {
        if label[i] != usize::MAX {
            continue;
        }
        label[i] = next;
        // Single-linkage growth of the cluster seeded at i.
        let mut frontier = vec![i];
        while let Some(a) = frontier.pop() {
            for b in 0..v.len() {
                if label[b] == usize::MAX && (v[a] - v[b]).norm() < tol {
                    label[b] = next;
                    frontier.push(b);
                }
            }
        }
        next += 1;
    }
    for c in 0..next {
        let members: Vec<usize> = (0..v.len()).filter(|&i| label[i] == c).collect();
        if members.len() > 1 {
            let mean = members.iter().map(|&i| v[i]).sum::<Complex64>() / members.len() as f64;
            for &i in &members {
                v[i] = mean;
            }
        }
    }
    // Copies must sit next to each other so ties in the matching keep them
    // together.
    v.sort_by(|a, b| {
        a.re.abs()
            .partial_cmp(&b.re.abs())
            .unwrap()
            .then(a.im.partial_cmp(&b.im).unwrap())
    });
    v
}

/// Greedy nearest-neighbour assignment of `cur` to `prev`. Returns
/// `(prev index, cur index, distance)` triples.
fn assign(prev: &[Complex64], cur: &[Complex64]) -> Vec<(usize, usize, f64)> {
    let mut cand: Vec<(f64, usize, usize)> = Vec::with_capacity(prev.len() * cur.len());
    for (i, p) in prev.iter().enumerate() {
        for (j, c) in cur.iter().enumerate() {
            cand.push(((p - c).norm(), i, j));
        }
    }
    cand.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_p = vec![false; prev.len()];
    let mut used_c = vec![false; cur.len()];
    let mut out = Vec::new();
    for (d, i, j) in cand {
        if !used_p[i] && !used_c[j] {
            used_p[i] = true;
            used_c[j] = true;
            out.push((i, j, d));
        }
    }
    out
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

struct Sample {
    mu: f64,
    values: Vec<Complex64>,
}

/// Continues the `k` eigenvalues of smallest `|Re|` across `mu_grid`.
pub fn sweep_family(family: &dyn SpectralFamily, mu_grid: &[f64], k: usize, opts: &SweepOptions) -> Result<Sweep> {
    if mu_grid.is_empty() {
        return Err(invalid("empty μ grid"));
    }
    if mu_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("μ grid must be strictly ascending"));
    }
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let track = 2 * k;
    let initial: Vec<Result<Sample>> = mu_grid
        .par_iter()
        .map(|&mu| {
            let s = family.spectrum(mu, false)?;
            Ok(Sample { mu, values: take_window(&s, track) })
        })
        .collect();
    let mut samples: Vec<Sample> = initial.into_iter().collect::<Result<_>>()?;
    let scale = samples
        .iter()
        .map(|s| spectral_scale(&s.values))
        .fold(0.0, f64::max)
        .max(1e-300);
    let eps_im = crate::spectrum::DEFAULT_EPS_IM_REL * scale;
    let floor = 1e-9 * scale;
    let mut warnings = Vec::new();

    // Continuation: each open branch is extrapolated linearly to the next μ
    // and matched there. Where a prediction misses by more than the matching
    // radius the step is halved.
    struct Open {
        mus: Vec<f64>,
        vals: Vec<Complex64>,
    }
    let predict = |o: &Open, mu: f64| -> Complex64 {
        let n = o.vals.len();
        if n < 2 {
            return o.vals[n - 1];
        }
        let ratio = (mu - o.mus[n - 1]) / (o.mus[n - 1] - o.mus[n - 2]);
        o.vals[n - 1] + (o.vals[n - 1] - o.vals[n - 2]) * ratio
    };
    let mut done: Vec<Open> = Vec::new();
    let mut open: Vec<Open> = samples[0]
        .values
        .iter()
        .map(|&v| Open { mus: vec![samples[0].mu], vals: vec![v] })
        .collect();
    let mut i = 0;
    let mut depth = vec![0usize; samples.len()];
    while i + 1 < samples.len() {
        let cur = &samples[i + 1];
        let pred: Vec<Complex64> = open.iter().map(|o| predict(o, cur.mu)).collect();
        let pairs = assign(&pred, &cur.values);
        // Only branches inside the requested window on both sides count;
        // the margin absorbs eigenvalues entering or leaving it.
        let inner: Vec<(f64, f64)> = pairs
            .iter()
            .filter(|p| p.0 < k && p.1 < k)
            .map(|p| ((cur.values[p.1] - open[p.0].vals.last().unwrap()).norm(), p.2))
            .collect();
        let motion = median(inner.iter().map(|x| x.0).collect());
        let radius = opts.radius_factor * motion + floor;
        // A match is also rejected when another distinct eigenvalue sits
        // almost as close to the prediction.
        let ambiguous = pairs.iter().filter(|p| p.0 < k && p.1 < k).any(|&(pi, ci, d1)| {
            let target = cur.values[ci];
            d1 > floor
                && cur.values.iter().any(|&c| c != target && (c - pred[pi]).norm() < AMBIGUITY_RATIO * d1)
        });
        let violated = ambiguous || inner.iter().any(|x| x.1 > radius);
        let step = cur.mu - samples[i].mu;
        if violated && depth[i + 1] < opts.max_refine_depth && step / 2.0 >= opts.min_step {
            let mid = 0.5 * (samples[i].mu + cur.mu);
            let s = family.spectrum(mid, false)?;
            let d = depth[i + 1] + 1;
            samples.insert(i + 1, Sample { mu: mid, values: take_window(&s, track) });
            depth.insert(i + 1, d);
            depth[i + 2] = d;
            continue;
        }
        if violated {
            warnings.push(format!(
                "matching radius exceeded between μ = {} and μ = {} after refinement",
                samples[i].mu, cur.mu
            ));
        }
        let mut next: Vec<Option<Open>> = (0..cur.values.len()).map(|_| None).collect();
        let mut taken = vec![false; open.len()];
        for &(pi, ci, _) in &pairs {
            taken[pi] = true;
            let mut o = Open { mus: std::mem::take(&mut open[pi].mus), vals: std::mem::take(&mut open[pi].vals) };
            o.mus.push(cur.mu);
            o.vals.push(cur.values[ci]);
            next[ci] = Some(o);
        }
        for (pi, o) in open.into_iter().enumerate() {
            if !taken[pi] {
                done.push(o);
            }
        }
        open = next
            .into_iter()
            .enumerate()
            .map(|(ci, o)| o.unwrap_or_else(|| Open { mus: vec![cur.mu], vals: vec![cur.values[ci]] }))
            .collect();
        i += 1;
    }
    done.extend(open);

    // Merge exactly coincident copies into one branch with multiplicity.
    let coincide_tol = 1e-8 * scale.max(1.0);
    let mut merged: Vec<(Open, usize)> = Vec::new();
    'outer: for o in done {
        for (m, mult) in merged.iter_mut() {
            if m.mus == o.mus && m.vals.iter().zip(&o.vals).all(|(a, b)| (a - b).norm() < coincide_tol) {
                *mult += 1;
                continue 'outer;
            }
        }
        merged.push((o, 1));
    }
    // Deterministic order: by starting μ, then by value at the start.
    merged.sort_by(|a, b| {
        a.0.mus[0]
            .partial_cmp(&b.0.mus[0])
            .unwrap()
            .then(a.0.vals[0].re.abs().partial_cmp(&b.0.vals[0].re.abs()).unwrap())
            .then(a.0.vals[0].im.partial_cmp(&b.0.vals[0].im).unwrap())
    });
    let mut traces: Vec<BranchTrace> = merged
        .into_iter()
        .enumerate()
        .map(|(id, (o, mult))| {
            let mut became = None;
            let mut was_complex = false;
            for (mu, v) in o.mus.iter().zip(&o.vals) {
                if v.im.abs() >= eps_im {
                    was_complex = true;
                    became = None;
                } else if was_complex && became.is_none() {
                    became = Some(*mu);
                }
            }
            BranchTrace { id, mu_grid: o.mus, values: o.vals, multiplicity: mult, partner_id: None, became_real_at: became }
        })
        .collect();

    // Conjugate partners. Avoided crossings can exchange partners along the
    // sweep, so the partner recorded is the one at the last complex sample
    // before the branch turns real, or at the first sample otherwise.
    let pair_tol = 1e-7 * scale.max(1.0);
    let anchor = |t: &BranchTrace| -> Option<(f64, Complex64, Option<f64>)> {
        match t.became_real_at {
            Some(m) => {
                let i = t.mu_grid.iter().position(|&x| x == m)?;
                (i > 0).then(|| (t.mu_grid[i - 1], t.values[i - 1], Some(m)))
            }
            None => t.values.iter().position(|v| v.im.abs() >= eps_im).map(|i| (t.mu_grid[i], t.values[i], None)),
        }
    };
    for a in 0..traces.len() {
        if traces[a].partner_id.is_some() {
            continue;
        }
        let Some((mu, z, real_at)) = anchor(&traces[a]) else { continue };
        let found = (0..traces.len()).find(|&b| {
            b != a
                && traces[b].partner_id.is_none()
                && traces[b].became_real_at == real_at
                && traces[b].value_at(mu).is_some_and(|w| (w - z.conj()).norm() < pair_tol)
        });
        if let Some(b) = found {
            traces[a].partner_id = Some(b);
            traces[b].partner_id = Some(a);
        }
    }

    Ok(Sweep {
        traces,
        mu_grid: samples.iter().map(|s| s.mu).collect(),
        eps_im,
        warnings,
        seed: family.seed(),
        block: family.block_name(),
    })
}

/// Continues the gap-block branches of one realization.
pub fn sweep_branches(d: &DisorderRealization, mu_grid: &[f64], k: usize) -> Result<Sweep> {
    sweep_family(&GapBlockFamily::new(d.clone())?, mu_grid, k, &SweepOptions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpEvent {
    pub mu_ep: f64,
    pub lambda_ep: Complex64,
    pub branch_ids: (usize, usize),
    /// `(μ, D)` samples on the approach from the complex side, ascending in μ.
    pub d_trace: Vec<(f64, f64)>,
    pub d_at_ep: f64,
    pub refinement_width: f64,
    pub seed: Option<u64>,
    pub block: String,
}

/// The pair `b1`, `b2` followed through a bisection by matching each new
/// sample against the last accepted complex-side sample.
struct PairTracker<'a> {
    family: &'a dyn SpectralFamily,
    mu: f64,
    vals: Vec<Complex64>,
    i1: usize,
    i2: usize,
}

struct PairSample {
    z1: Complex64,
    z2: Complex64,
    spectrum: SpectrumResult,
    vals: Vec<Complex64>,
    j1: usize,
    j2: usize,
}

fn nearest_index(vals: &[Complex64], z: Complex64, skip: Option<usize>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, v) in vals.iter().enumerate() {
        let d = (v - z).norm();
        if Some(i) != skip && d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

impl<'a> PairTracker<'a> {
    fn start(family: &'a dyn SpectralFamily, mu: f64, z1: Complex64, z2: Complex64) -> Result<Self> {
        let s = family.spectrum(mu, false)?;
        let vals = take_window(&s, s.len());
        let i1 = nearest_index(&vals, z1, None);
        let i2 = nearest_index(&vals, z2, Some(i1));
        Ok(Self { family, mu, vals, i1, i2 })
    }

    fn sample(&self, mu: f64, want_vectors: bool) -> Result<PairSample> {
        let spectrum = self.family.spectrum(mu, want_vectors)?;
        let vals = take_window(&spectrum, spectrum.len());
        let pairs = assign(&self.vals, &vals);
        let find = |i: usize| {
            pairs
                .iter()
                .find(|p| p.0 == i)
                .map(|p| p.1)
                .ok_or_else(|| Error::NoEpFound("tracked eigenvalue left the computed window".into()))
        };
        let (j1, j2) = (find(self.i1)?, find(self.i2)?);
        Ok(PairSample { z1: vals[j1], z2: vals[j2], spectrum, vals, j1, j2 })
    }

    fn advance(&mut self, mu: f64, p: PairSample) {
        self.mu = mu;
        self.vals = p.vals;
        self.i1 = p.j1;
        self.i2 = p.j2;
    }
}

fn is_complex_pair(z1: Complex64, z2: Complex64, eps_im: f64) -> bool {
    z1.im.abs() >= eps_im && z2.im.abs() >= eps_im && z1.im * z2.im < 0.0
}

/// Eigenvectors whose eigenvalues fall in the cluster at `z`.
fn cluster_vectors(s: &SpectrumResult, z: Complex64) -> Result<Vec<Vec<Complex64>>> {
    let vecs = s.eigenvectors.as_ref().ok_or_else(|| invalid("eigenvectors required"))?;
    let tol = CLUSTER_TOL * spectral_scale(&s.eigenvalues).max(1e-300);
    Ok(s
        .eigenvalues
        .iter()
        .zip(vecs)
        .filter(|(l, _)| (*l - z).norm() < tol)
        .map(|(_, v)| v.clone())
        .collect())
}

fn sample_distance(p: &PairSample) -> Result<f64> {
    if p.z1 == p.z2 {
        return Ok(0.0);
    }
    subspace_distance(&cluster_vectors(&p.spectrum, p.z1)?, &cluster_vectors(&p.spectrum, p.z2)?)
}

/// Locates the EP where the conjugate partners `b1`, `b2` reach the real
/// axis. The bracket from the sweep is bisected on the sign of `Im²` of the
/// continued pair down to [`EP_WIDTH`].
pub fn locate_ep(b1: &BranchTrace, b2: &BranchTrace, family: &dyn SpectralFamily, eps_im: f64) -> Result<EpEvent> {
    // Last complex sample followed by a real one on b1.
    let mut bracket = None;
    for w in 0..b1.values.len().saturating_sub(1) {
        let (z0, z1) = (b1.values[w], b1.values[w + 1]);
        if z0.im.abs() >= eps_im && z1.im.abs() < eps_im {
            bracket = Some((b1.mu_grid[w], b1.mu_grid[w + 1], z0));
        }
    }
    let (mut lo, mut hi, z_lo) =
        bracket.ok_or_else(|| Error::NoEpFound(format!("branch {} does not turn real", b1.id)))?;
    let w_lo = b2
        .value_at(lo)
        .ok_or_else(|| Error::NoEpFound(format!("branch {} does not cover μ = {lo}", b2.id)))?;
    if !is_complex_pair(z_lo, w_lo, eps_im) {
        return Err(Error::NoEpFound(format!("branches {} and {} are not a conjugate pair at μ = {lo}", b1.id, b2.id)));
    }
    if let Some(w_hi) = b2.value_at(hi) {
        if w_hi.im.abs() >= eps_im {
            return Err(Error::NoEpFound(format!("branches {} and {} do not coalesce together", b1.id, b2.id)));
        }
    }
    let lo0 = lo;
    let mut tracker = PairTracker::start(family, lo, z_lo, w_lo)?;
    let start = (tracker.mu, tracker.vals.clone(), tracker.i1, tracker.i2);
    let bisect = |tracker: &mut PairTracker, lo: &mut f64, hi: &mut f64, width: f64| -> Result<()> {
        while *hi - *lo > width {
            let mid = 0.5 * (*lo + *hi);
            let p = tracker.sample(mid, false)?;
            if is_complex_pair(p.z1, p.z2, eps_im) {
                *lo = mid;
                tracker.advance(mid, p);
            } else {
                *hi = mid;
            }
        }
        Ok(())
    };
    bisect(&mut tracker, &mut lo, &mut hi, EP_WIDTH)?;
    let mut mu_ep = 0.5 * (lo + hi);
    let mut at = tracker.sample(mu_ep, true)?;
    let mut d_at_ep = sample_distance(&at)?;
    if d_at_ep >= EP_DISTANCE {
        // Closely spaced EPs make D steep; tighten before deciding.
        bisect(&mut tracker, &mut lo, &mut hi, EP_WIDTH_FALLBACK)?;
        mu_ep = 0.5 * (lo + hi);
        at = tracker.sample(mu_ep, true)?;
        d_at_ep = sample_distance(&at)?;
    }
    let lambda_ep = 0.5 * (at.z1 + at.z2);

    // Approach from the complex side at geometrically shrinking offsets,
    // continued from the start of the bracket.
    let mut offsets = Vec::new();
    let mut offset = 0.5 * (mu_ep - lo0);
    while offset >= 2.0 * EP_WIDTH {
        offsets.push(offset);
        offset /= 2.0;
    }
    let mut approach = PairTracker { family, mu: start.0, vals: start.1, i1: start.2, i2: start.3 };
    let mut d_trace = Vec::new();
    for off in offsets {
        let mu = mu_ep - off;
        let p = approach.sample(mu, true)?;
        d_trace.push((mu, sample_distance(&p)?));
        approach.advance(mu, p);
    }
    d_trace.push((mu_ep, d_at_ep));

    if lambda_ep.im.abs() >= eps_im.max(1e-6 * lambda_ep.norm()) || d_at_ep >= EP_DISTANCE {
        return Err(Error::NoEpFound(format!(
            "real crossing at μ = {mu_ep} without eigenvector coalescence (D = {d_at_ep:.3e})"
        )));
    }
    Ok(EpEvent {
        mu_ep,
        lambda_ep: Complex64::new(lambda_ep.re, 0.0),
        branch_ids: (b1.id, b2.id),
        d_trace,
        d_at_ep,
        refinement_width: hi - lo,
        seed: family.seed(),
        block: family.block_name(),
    })
}

/// Every EP crossed by a conjugate pair in the sweep. Failures to confirm a
/// crossing are collected separately.
pub fn locate_all(sweep: &Sweep, family: &dyn SpectralFamily) -> (Vec<EpEvent>, Vec<String>) {
    let mut events = Vec::new();
    let mut failures = Vec::new();
    for t in &sweep.traces {
        let Some(p) = t.partner_id else { continue };
        if p < t.id || t.became_real_at.is_none() {
            continue;
        }
        match locate_ep(t, &sweep.traces[p], family, sweep.eps_im) {
            Ok(e) => events.push(e),
            Err(e) => failures.push(format!("branches ({}, {}): {e}", t.id, p)),
        }
    }
    events.sort_by(|a, b| a.mu_ep.partial_cmp(&b.mu_ep).unwrap());
    (events, failures)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealCount {
    pub mu: f64,
    /// Distinct real branches.
    pub real: usize,
    /// Real eigenvalues counted with multiplicity.
    pub real_with_multiplicity: usize,
    pub ep_born: usize,
    pub intruders: usize,
}

/// Per-μ counts of real branches, EP-born branches and intruders (real at
/// every sampled μ of a sweep-spanning branch).
pub fn count_real_and_intruders(traces: &[BranchTrace], mu_grid: &[f64], eps_im: f64) -> Vec<RealCount> {
    let (first, last) = match (mu_grid.first(), mu_grid.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => return Vec::new(),
    };
    let intruder: Vec<bool> = traces
        .iter()
        .map(|t| t.spans(first) && t.spans(last) && t.values.iter().all(|v| v.im.abs() < eps_im))
        .collect();
    mu_grid
        .iter()
        .map(|&mu| {
            let mut c = RealCount { mu, real: 0, real_with_multiplicity: 0, ep_born: 0, intruders: 0 };
            for (t, &intr) in traces.iter().zip(&intruder) {
                let Some(v) = t.value_at(mu) else { continue };
                if v.im.abs() < eps_im {
                    c.real += 1;
                    c.real_with_multiplicity += t.multiplicity;
                    if intr {
                        c.intruders += 1;
                    }
                    if t.became_real_at.is_some_and(|b| b <= mu) {
                        c.ep_born += 1;
                    }
                }
            }
            c
        })
        .collect()
}

/// `branch_id,mu,re,im,multiplicity,partner_id` rows.
pub fn write_traces_csv<W: Write>(mut w: W, traces: &[BranchTrace]) -> Result<()> {
    writeln!(w, "branch_id,mu,re,im,multiplicity,partner_id")?;
    for t in traces {
        let partner = t.partner_id.map(|p| p.to_string()).unwrap_or_default();
        for (mu, v) in t.mu_grid.iter().zip(&t.values) {
            writeln!(w, "{},{},{:e},{:e},{},{}", t.id, mu, v.re, v.im, t.multiplicity, partner)?;
        }
    }
    Ok(())
}

pub fn write_events_json<W: Write>(mut w: W, events: &[EpEvent]) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, events)?;
    writeln!(w)?;
    Ok(())
}
