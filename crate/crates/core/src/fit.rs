//! Least-squares fitting: weighted straight lines and small nonlinear models.

use faer::linalg::solvers::Solve;
use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub intercept: f64,
    pub slope: f64,
    pub stderr_intercept: f64,
    pub stderr_slope: f64,
    /// Weighted sum of squared residuals.
    pub chi2: f64,
    pub weighted: bool,
}

/// Fits `y = a + b x`. With `sigma` given and all entries positive the fit
/// is weighted by `1/σ²` and the covariance is the inverse normal matrix;
/// otherwise it is unweighted and the covariance is scaled by the residual
/// variance.
pub fn fit_line(x: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Result<LineFit> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch { left: n, right: y.len() });
    }
    if n < 2 {
        return Err(invalid("a line fit needs at least 2 points"));
    }
    let weights: Option<Vec<f64>> = match sigma {
        Some(s) if s.len() != n => return Err(Error::DimensionMismatch { left: n, right: s.len() }),
        Some(s) if s.iter().all(|&v| v > 0.0 && v.is_finite()) => Some(s.iter().map(|v| 1.0 / (v * v)).collect()),
        _ => None,
    };
    let w = |i: usize| weights.as_ref().map_or(1.0, |w| w[i]);
    let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        sw += w(i);
        sx += w(i) * x[i];
        sy += w(i) * y[i];
    }
    let (xm, ym) = (sx / sw, sy / sw);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for i in 0..n {
        let dx = x[i] - xm;
        sxx += w(i) * dx * dx;
        sxy += w(i) * dx * (y[i] - ym);
    }
    if sxx <= 0.0 {
        return Err(invalid("abscissae must not all coincide"));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = (0..n).map(|i| w(i) * (y[i] - intercept - slope * x[i]).powi(2)).sum();
    let var_slope = 1.0 / sxx;
    let var_intercept = 1.0 / sw + xm * xm / sxx;
    let scale = if weights.is_some() {
        1.0
    } else if n > 2 {
        chi2 / (n - 2) as f64
    } else {
        0.0
    };
    Ok(LineFit {
        intercept,
        slope,
        stderr_intercept: (var_intercept * scale).sqrt(),
        stderr_slope: (var_slope * scale).sqrt(),
        chi2,
        weighted: weights.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonlinearFit {
    pub params: Vec<f64>,
    pub rss: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-14 }
    }
}

/// Levenberg–Marquardt on `Σ (model(x_i; p) − y_i)²` with a forward
/// difference Jacobian.
pub fn levenberg_marquardt<F>(model: F, x: &[f64], y: &[f64], p0: &[f64], opts: LmOptions) -> Result<NonlinearFit>
where
    F: Fn(f64, &[f64]) -> f64,
{
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { left: x.len(), right: y.len() });
    }
    let np = p0.len();
    if x.len() < np {
        return Err(invalid("fewer data points than parameters"));
    }
    let residuals = |p: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(&xi, &yi)| model(xi, p) - yi).collect() };
    let rss_of = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>();
    let mut p = p0.to_vec();
    let mut r = residuals(&p);
    let mut rss = rss_of(&r);
    if !rss.is_finite() {
        return Err(Error::Numeric("non-finite residual at the starting point".into()));
    }
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut it = 0;
    while it < opts.max_iter {
        it += 1;
        let mut jac = Mat::<f64>::zeros(x.len(), np);
        for k in 0..np {
            let h = 1e-7 * p[k].abs().max(1e-3);
            let mut q = p.clone();
            q[k] += h;
            let rq = residuals(&q);
            for i in 0..x.len() {
                jac[(i, k)] = (rq[i] - r[i]) / h;
            }
        }
        let jtj = jac.transpose() * &jac;
        let mut jtr = Mat::<f64>::zeros(np, 1);
        for k in 0..np {
            jtr[(k, 0)] = (0..x.len()).map(|i| jac[(i, k)] * r[i]).sum();
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut a = jtj.clone();
            for k in 0..np {
                a[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            let step = a.partial_piv_lu().solve(&jtr);
            let q: Vec<f64> = (0..np).map(|k| p[k] - step[(k, 0)]).collect();
            let rq = residuals(&q);
            let rss_q = rss_of(&rq);
            if rss_q.is_finite() && rss_q <= rss {
                let rel = (rss - rss_q) / rss.max(1e-300);
                let step_norm: f64 = (0..np).map(|k| step[(k, 0)].powi(2)).sum::<f64>().sqrt();
                let p_norm: f64 = p.iter().map(|v| v * v).sum::<f64>().sqrt();
                p = q;
                r = rq;
                rss = rss_q;
                lambda = (lambda / 3.0).max(1e-15);
                improved = true;
                if rel < opts.tol || step_norm < opts.tol * (1.0 + p_norm) || rss < 1e-30 {
                    converged = true;
                }
                break;
            }
            lambda *= 4.0;
        }
        if converged || !improved {
            converged = true;
            break;
        }
    }
    Ok(NonlinearFit { params: p, rss, iterations: it, converged })
}

/// `A e^{−Γτ} sin(Ωτ + b)`; parameters `[A, Γ, Ω, b]`.
pub fn damped_sine(tau: f64, p: &[f64]) -> f64 {
    p[0] * (-p[1] * tau).exp() * (p[2] * tau + p[3]).sin()
}

/// Multi-start fit of [`damped_sine`]. Returns the start with the smallest
/// residual.
pub fn fit_damped_sine(tau: &[f64], y: &[f64]) -> Result<NonlinearFit> {
    if tau.len() < 6 {
        return Err(Error::FitFailure("at least 6 samples needed for the oscillatory fit".into()));
    }
    let span = tau[tau.len() - 1] - tau[0];
    if span <= 0.0 {
        return Err(Error::FitFailure("degenerate time window".into()));
    }
    let amp = y.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    // Log-linear estimate of the envelope decay seeds Γ.
    let pos: Vec<(f64, f64)> = tau.iter().zip(y).filter(|(_, v)| v.abs() > 1e-300).map(|(&t, &v)| (t, v.abs().ln())).collect();
    let gamma_guess = if pos.len() >= 2 {
        let (xs, ys): (Vec<f64>, Vec<f64>) = pos.into_iter().unzip();
        fit_line(&xs, &ys, None).map(|f| (-f.slope).max(0.0)).unwrap_or(0.1)
    } else {
        0.1
    };
    let crossings = y.windows(2).filter(|w| w[0] * w[1] < 0.0).count() as f64;
    let omega_guess = (std::f64::consts::PI * crossings / span).max(0.5 * std::f64::consts::PI / span);
    // Frequencies above the sampling limit alias onto lower ones.
    let spacing = tau.windows(2).map(|w| (w[1] - w[0]).abs()).filter(|d| *d > 0.0).fold(f64::INFINITY, f64::min);
    let nyquist = std::f64::consts::PI / spacing;
    let mut best: Option<NonlinearFit> = None;
    for &om in &[omega_guess, 0.5 * omega_guess, 2.0 * omega_guess, 1.5 * omega_guess] {
        for &ph in &[0.3, 1.2, 2.0, -0.8] {
            for &g in &[gamma_guess, 0.5 * gamma_guess + 0.01] {
                let p0 = [amp * (g * tau[0]).exp(), g, om, ph];
                let Ok(f) = levenberg_marquardt(damped_sine, tau, y, &p0, LmOptions::default()) else { continue };
                if !(f.params[2].abs() < nyquist) {
                    continue;
                }
                if best.as_ref().map_or(true, |b| f.rss < b.rss) {
                    best = Some(f);
                }
            }
        }
    }
    let mut f = best.ok_or_else(|| Error::FitFailure("no start converged".into()))?;
    // Canonical form: A > 0, Ω > 0, b in (−π, π].
    if f.params[2] < 0.0 {
        f.params[2] = -f.params[2];
        f.params[3] = -f.params[3];
        f.params[0] = -f.params[0];
    }
    if f.params[0] < 0.0 {
        f.params[0] = -f.params[0];
        f.params[3] += std::f64::consts::PI;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    f.params[3] = (f.params[3] + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if !f.params.iter().all(|v| v.is_finite()) {
        return Err(Error::FitFailure(format!("non-finite parameters {:?}", f.params)));
    }
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let x: Vec<f64> = [24.0, 28.0, 32.0, 36.0, 40.0, 44.0].iter().map(|n| 1.0 / n).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.2 + 1.2 * v).collect();
        let f = fit_line(&x, &y, None).unwrap();
        assert!((f.intercept - 0.2).abs() < 1e-12);
        assert!((f.slope - 1.2).abs() < 1e-12);
        let s = vec![0.01; 6];
        let g = fit_line(&x, &y, Some(&s)).unwrap();
        assert!(g.weighted);
        assert!((g.intercept - 0.2).abs() < 1e-12);
    }

    #[test]
    fn zero_sigma_falls_back_to_unweighted() {
        let f = fit_line(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0], Some(&[0.1, 0.0, 0.1])).unwrap();
        assert!(!f.weighted);
        assert!((f.intercept - 1.0).abs() < 1e-15 && f.slope.abs() < 1e-15);
    }

    #[test]
    fn damped_sine_recovered() {
        let tau: Vec<f64> = (0..200).map(|i| 0.5 + 0.1 * i as f64).collect();
        let y: Vec<f64> = tau.iter().map(|&t| 0.4 * (-0.1 * t).exp() * (0.7 * t + 0.3).sin()).collect();
        let f = fit_damped_sine(&tau, &y).unwrap();
        assert!((f.params[1] - 0.1).abs() < 1e-4, "{:?}", f.params);
        assert!((f.params[2] - 0.7).abs() < 1e-4, "{:?}", f.params);
    }

    #[test]
    fn lm_rejects_underdetermined() {
        assert!(levenberg_marquardt(damped_sine, &[1.0], &[1.0], &[1.0, 1.0, 1.0, 1.0], LmOptions::default()).is_err());
    }
}
