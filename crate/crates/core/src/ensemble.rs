//! Disorder ensembles of dissipative gaps and finite-size extrapolation.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fit::fit_line;
use crate::krylov::{krylov_rightmost, KrylovOptions};
use crate::model::{build_decomposed, sample_disorder};
use crate::spectrum::{dense_eig, dissipative_gap, GapValue, SpectrumResult};

/// Gap blocks up to this dimension are diagonalized densely.
pub const GAP_DENSE_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n_list: Vec<usize>,
    pub mu_list: Vec<f64>,
    pub samples_per_point: usize,
    pub base_seed: u64,
    #[serde(default = "default_q")]
    pub q: usize,
}

fn default_q() -> usize {
    4
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_point == 0 {
            return Err(invalid("samples_per_point must be at least 1"));
        }
        if self.n_list.is_empty() || self.mu_list.is_empty() {
            return Err(invalid("n_list and mu_list must be non-empty"));
        }
        if let Some(&mu) = self.mu_list.iter().find(|&&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(invalid(format!("μ must be finite and non-negative, got {mu}")));
        }
        for &n in &self.n_list {
            if n < self.q || n % 2 != 0 {
                return Err(invalid(format!("N = {n} must be even and at least q = {}", self.q)));
            }
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<Task> {
        let mut out = Vec::new();
        for &n in &self.n_list {
            for (mi, &mu) in self.mu_list.iter().enumerate() {
                for s in 0..self.samples_per_point {
                    out.push(Task { n, mu_index: mi, mu, sample: s, seed: sample_seed(self.base_seed, n, mi, s) });
                }
            }
        }
        out
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable per-sample seed; independent of the other grid entries.
pub fn sample_seed(base_seed: u64, n: usize, mu_index: usize, sample: usize) -> u64 {
    let mut h = splitmix64(base_seed);
    for v in [n as u64, mu_index as u64, sample as u64] {
        h = splitmix64(h ^ v);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub n: usize,
    pub mu_index: usize,
    pub mu: f64,
    pub sample: usize,
    pub seed: u64,
}

impl Task {
    fn key(&self) -> (usize, usize, usize) {
        (self.n, self.mu_index, self.sample)
    }
}

/// One journal line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapRecord {
    pub n: usize,
    pub n_total: usize,
    pub mu_index: usize,
    pub mu: f64,
    pub sample: usize,
    pub seed: u64,
    pub gamma0: Option<f64>,
    pub method: String,
    pub error: Option<String>,
}

impl GapRecord {
    fn key(&self) -> (usize, usize, usize) {
        (self.n, self.mu_index, self.sample)
    }

    pub fn gap_value(&self) -> Option<GapValue> {
        self.gamma0.map(|g| GapValue { gamma0: g, mu: self.mu, n_total: self.n_total, realization_id: Some(self.seed) })
    }
}

/// Slowest decay rate of the gap block for one realization.
pub fn compute_gap(n: usize, q: usize, seed: u64, mu: f64) -> Result<(GapValue, &'static str)> {
    let d = sample_disorder(n, q, seed)?;
    let b = build_decomposed(&d, mu)?;
    let label = b.gap_label()?;
    let block = b.block(label)?;
    let (s, method) = if block.dim() <= GAP_DENSE_LIMIT {
        let (vals, _) = dense_eig(&block.to_dense(), false)?;
        (SpectrumResult::new(vals, None, None, crate::spectrum::Method::Dense), "dense")
    } else {
        let opts = KrylovOptions { block_size: 1, basis_size: Some(60), keep: Some(8), max_restarts: 5000, ..Default::default() };
        (krylov_rightmost(block, 4, &opts)?, "krylov_rightmost")
    };
    let s = s.with_context(label, mu, Some(seed), Some(n));
    Ok((dissipative_gap(&s, false)?, method))
}

/// Reads a journal; any unparsable line is an error.
pub fn read_journal(path: &Path) -> Result<Vec<GapRecord>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: GapRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("corrupt journal {} line {}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct EnsembleOutcome {
    /// All records of the spec, sorted by (N, μ index, sample).
    pub records: Vec<GapRecord>,
    pub resumed: usize,
}

impl EnsembleOutcome {
    pub fn values(&self) -> Vec<GapValue> {
        self.records.iter().filter_map(|r| r.gap_value()).collect()
    }

    pub fn failures(&self) -> Vec<&GapRecord> {
        self.records.iter().filter(|r| r.gamma0.is_none()).collect()
    }
}

/// Runs every (N, μ, sample) task of `spec`. With a journal path, finished
/// tasks found there are reused, new results are appended as they complete,
/// and the file is rewritten in canonical order at the end.
pub fn run_ensemble(spec: &EnsembleSpec, journal: Option<&Path>) -> Result<EnsembleOutcome> {
    spec.validate()?;
    let tasks = spec.tasks();
    let mut done: BTreeMap<(usize, usize, usize), GapRecord> = BTreeMap::new();
    if let Some(p) = journal {
        if p.exists() {
            for r in read_journal(p)? {
                let Some(t) = tasks.iter().find(|t| t.key() == r.key()) else { continue };
                if t.seed != r.seed || t.mu.to_bits() != r.mu.to_bits() {
                    return Err(Error::Consistency(format!(
                        "journal record (N={}, μ index {}, sample {}) does not belong to this spec",
                        r.n, r.mu_index, r.sample
                    )));
                }
                // Failed tasks are retried.
                if r.gamma0.is_some() {
                    done.insert(r.key(), r);
                }
            }
        }
    }
    let resumed = done.len();
    let mut pending: Vec<Task> = tasks.iter().filter(|t| !done.contains_key(&t.key())).copied().collect();
    // Largest systems first so the tail of the queue is short.
    pending.sort_by(|a, b| b.n.cmp(&a.n).then(a.key().cmp(&b.key())));

    let writer = match journal {
        Some(p) => Some(Mutex::new(OpenOptions::new().create(true).append(true).open(p)?)),
        None => None,
    };
    let fresh: Vec<Result<GapRecord>> = pending
        .par_iter()
        .map(|t| {
            let r = match compute_gap(t.n, spec.q, t.seed, t.mu) {
                Ok((g, m)) => GapRecord {
                    n: t.n,
                    n_total: 2 * t.n,
                    mu_index: t.mu_index,
                    mu: t.mu,
                    sample: t.sample,
                    seed: t.seed,
                    gamma0: Some(g.gamma0),
                    method: m.into(),
                    error: None,
                },
                Err(e) => GapRecord {
                    n: t.n,
                    n_total: 2 * t.n,
                    mu_index: t.mu_index,
                    mu: t.mu,
                    sample: t.sample,
                    seed: t.seed,
                    gamma0: None,
                    method: String::new(),
                    error: Some(e.to_string()),
                },
            };
            if let Some(w) = &writer {
                let line = serde_json::to_string(&r)?;
                let mut f = w.lock().expect("journal lock");
                writeln!(f, "{line}")?;
                f.flush()?;
            }
            Ok(r)
        })
        .collect();
    drop(writer);
    for r in fresh {
        let r = r?;
        done.insert(r.key(), r);
    }
    let records: Vec<GapRecord> = done.into_values().collect();
    if let Some(p) = journal {
        let tmp = p.with_extension("tmp");
        {
            let mut f = File::create(&tmp)?;
            for r in &records {
                writeln!(f, "{}", serde_json::to_string(r)?)?;
            }
        }
        fs::rename(&tmp, p)?;
    }
    Ok(EnsembleOutcome { records, resumed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n_total: usize,
    pub mean: f64,
    pub sem: f64,
    pub samples: usize,
}

/// Mean and standard error of the mean per (N_tot, μ index).
pub fn aggregate(records: &[GapRecord]) -> BTreeMap<usize, (f64, Vec<ScalingPoint>)> {
    let mut groups: BTreeMap<(usize, usize), (f64, Vec<f64>)> = BTreeMap::new();
    for r in records {
        if let Some(g) = r.gamma0 {
            groups.entry((r.mu_index, r.n_total)).or_insert((r.mu, Vec::new())).1.push(g);
        }
    }
    let mut out: BTreeMap<usize, (f64, Vec<ScalingPoint>)> = BTreeMap::new();
    for ((mi, nt), (mu, mut v)) in groups {
        // Sorted summation keeps the mean independent of record order.
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (mean, sem) = mean_sem(&v);
        out.entry(mi).or_insert((mu, Vec::new())).1.push(ScalingPoint { n_total: nt, mean, sem, samples: v.len() });
    }
    out
}

pub fn mean_sem(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub mu: f64,
    pub gamma0_inf: f64,
    pub b: f64,
    pub stderr_gamma0: f64,
    pub stderr_b: f64,
    pub weighted: bool,
    pub points: Vec<ScalingPoint>,
}

/// Weighted fit of `Γ0(N_tot) = Γ0 + b/N_tot`.
pub fn fit_scaling(points: &[ScalingPoint], mu: f64) -> Result<ScalingFit> {
    if points.len() < 3 {
        return Err(invalid(format!("finite-size fit needs at least 3 sizes, got {}", points.len())));
    }
    let mut sizes: Vec<usize> = points.iter().map(|p| p.n_total).collect();
    sizes.sort_unstable();
    sizes.dedup();
    if sizes.len() != points.len() {
        return Err(invalid("sizes in a finite-size fit must be distinct"));
    }
    let x: Vec<f64> = points.iter().map(|p| 1.0 / p.n_total as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean).collect();
    let s: Vec<f64> = points.iter().map(|p| p.sem).collect();
    let single = points.iter().any(|p| p.samples <= 1);
    let f = fit_line(&x, &y, if single { None } else { Some(&s) })?;
    if !f.intercept.is_finite() || !f.slope.is_finite() || !f.chi2.is_finite() {
        return Err(Error::Numeric("non-finite scaling fit".into()));
    }
    Ok(ScalingFit {
        mu,
        gamma0_inf: f.intercept,
        b: f.slope,
        stderr_gamma0: f.stderr_intercept,
        stderr_b: f.stderr_slope,
        weighted: f.weighted,
        points: points.to_vec(),
    })
}

/// Refit without the smallest size. Returns the shifted fit and the
/// intercept change.
pub fn drop_smallest(fit: &ScalingFit) -> Result<(ScalingFit, f64)> {
    let min = fit.points.iter().map(|p| p.n_total).min().ok_or_else(|| invalid("empty fit"))?;
    let rest: Vec<ScalingPoint> = fit.points.iter().filter(|p| p.n_total != min).copied().collect();
    let g = fit_scaling(&rest, fit.mu)?;
    let delta = g.gamma0_inf - fit.gamma0_inf;
    Ok((g, delta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapCurve {
    pub mu: Vec<f64>,
    pub gamma0: Vec<f64>,
    pub stderr: Vec<f64>,
    pub local_maxima: Vec<f64>,
    pub local_minima: Vec<f64>,
}

impl GapCurve {
    pub fn from_points(mu: &[f64], gamma0: &[f64], stderr: &[f64]) -> Result<Self> {
        if mu.len() != gamma0.len() || mu.len() != stderr.len() {
            return Err(Error::DimensionMismatch { left: mu.len(), right: gamma0.len() });
        }
        let mut idx: Vec<usize> = (0..mu.len()).collect();
        idx.sort_by(|&a, &b| mu[a].partial_cmp(&mu[b]).unwrap());
        let mu: Vec<f64> = idx.iter().map(|&i| mu[i]).collect();
        let g: Vec<f64> = idx.iter().map(|&i| gamma0[i]).collect();
        let e: Vec<f64> = idx.iter().map(|&i| stderr[i]).collect();
        let (mut maxima, mut minima) = (Vec::new(), Vec::new());
        for i in 1..g.len().saturating_sub(1) {
            if g[i] > g[i - 1] && g[i] > g[i + 1] {
                maxima.push(mu[i]);
            }
            if g[i] < g[i - 1] && g[i] < g[i + 1] {
                minima.push(mu[i]);
            }
        }
        Ok(Self { mu, gamma0: g, stderr: e, local_maxima: maxima, local_minima: minima })
    }

    pub fn is_monotonic(&self) -> bool {
        self.local_maxima.is_empty() && self.local_minima.is_empty()
    }
}

/// Extrapolated Γ0(μ) with its interior extrema.
pub fn gap_curve(fits: &[ScalingFit]) -> Result<GapCurve> {
    let mu: Vec<f64> = fits.iter().map(|f| f.mu).collect();
    let g: Vec<f64> = fits.iter().map(|f| f.gamma0_inf).collect();
    let e: Vec<f64> = fits.iter().map(|f| f.stderr_gamma0).collect();
    GapCurve::from_points(&mu, &g, &e)
}

/// Fits every μ of an aggregated ensemble that has enough sizes.
pub fn fit_all(records: &[GapRecord]) -> (Vec<ScalingFit>, Vec<String>) {
    let mut fits = Vec::new();
    let mut notes = Vec::new();
    for (_, (mu, pts)) in aggregate(records) {
        match fit_scaling(&pts, mu) {
            Ok(f) => fits.push(f),
            Err(e) => notes.push(format!("μ = {mu}: {e}")),
        }
    }
    (fits, notes)
}

/// Gap-block eigenvalue nearest the imaginary axis, used for summaries.
pub fn slowest_mode(s: &SpectrumResult) -> Option<Complex64> {
    s.eigenvalues.first().copied()
}
