//! End-to-end acceptance checks, one test per criterion group. Each check
//! prints a `PASS`/`FAIL` line to the real stdout so the report survives
//! output capture.

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use lsyk::ensemble::{fit_all, gap_curve, read_journal, GapCurve, GapRecord};
use lsyk::ep::{count_real_and_intruders, locate_all, n4_oracle_gap, n4_oracle_pair, sweep_family, GapBlockFamily, SpectralFamily, SweepOptions, EP_DISTANCE};
use lsyk::krylov::{krylov_near_zero, krylov_rightmost, KrylovOptions};
use lsyk::model::{build_decomposed, build_liouvillian, n4_gap_subblock, sample_disorder, BlockLabel, DisorderRealization};
use lsyk::sd::{
    decay_scan, evaluate_action, free_g_pp_lattice, scan_branches, solve_branch, Branch, SdGrid, SdOptions, SdParams, Transition,
    DEFAULT_FIT_WINDOW, EQUAL_TIME_STEPS,
};
use lsyk::spectrum::{dense_spectrum, dense_spectrum_with_limit, dissipative_gap, write_spectrum_csv, SpectrumResult};

fn line(id: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    let text = format!("acceptance {id}: {} {}\n", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
    pass
}

fn finish(results: &[bool]) {
    assert!(results.iter().all(|&p| p), "{} of {} checks failed", results.iter().filter(|&&p| !p).count(), results.len());
}

fn grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn n4(j: f64) -> DisorderRealization {
    DisorderRealization::from_values(4, 4, 0, &[j]).unwrap()
}

#[test]
fn criterion_1_n4_closed_form() {
    let mut r = Vec::new();
    let mut block_err: f64 = 0.0;
    let mut pair_err: f64 = 0.0;
    let mut gap_err: f64 = 0.0;
    let mut ep_err: f64 = 0.0;
    let mut d_ok = true;
    let mut worst_d: f64 = 0.0;
    for seed in 0..8u64 {
        let d = sample_disorder(4, 4, seed).unwrap();
        let j = d.couplings[0].value;
        let mus = grid(0.0, 2.0 * j.abs(), 41);
        for &mu in mus.iter().step_by(4) {
            let b = build_decomposed(&d, mu).unwrap();
            let m = n4_gap_subblock(&b).unwrap();
            let want = [
                [Complex64::new(-2.0 * mu, -j / 2.0), Complex64::new(-mu, 0.0)],
                [Complex64::new(-mu, 0.0), Complex64::new(-2.0 * mu, j / 2.0)],
            ];
            for a in 0..2 {
                for c in 0..2 {
                    block_err = block_err.max((m[a][c] - want[a][c]).norm());
                }
            }
        }
        let fam = GapBlockFamily::new(d).unwrap();
        let sweep = sweep_family(&fam, &mus, 8, &SweepOptions::default()).unwrap();
        for &mu in &sweep.mu_grid {
            let vals: Vec<Complex64> = sweep.traces.iter().filter_map(|t| t.value_at(mu)).collect();
            let pair = n4_oracle_pair(j, mu);
            for v in &vals {
                pair_err = pair_err.max(pair.iter().map(|p| (p - v).norm()).fold(f64::INFINITY, f64::min));
            }
            let g = vals.iter().map(|v| v.re.abs()).fold(f64::INFINITY, f64::min);
            gap_err = gap_err.max((g - n4_oracle_gap(j, mu)).abs());
        }
        let (events, failures) = locate_all(&sweep, &fam);
        if events.len() != 1 || !failures.is_empty() {
            ep_err = f64::INFINITY;
            d_ok = false;
            continue;
        }
        ep_err = ep_err.max((events[0].mu_ep - j.abs() / 2.0).abs());
        let d: Vec<f64> = events[0].d_trace.iter().map(|p| p.1).collect();
        worst_d = worst_d.max(events[0].d_at_ep);
        d_ok &= events[0].d_at_ep < EP_DISTANCE && d.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
    }
    r.push(line("1 gap block entrywise", block_err < 1e-12, format!("max |L_gap - closed form| = {block_err:.2e} (tol 1e-12), 8 realizations")));
    r.push(line("1 eigenvalue branches", pair_err < 1e-10, format!("max error = {pair_err:.2e} on mu in [0, 2J] (tol 1e-10)")));
    r.push(line("1 EP location", ep_err < 1e-6, format!("max |mu_EP - J/2| = {ep_err:.2e} (tol 1e-6)")));
    r.push(line("1 gamma0 closed form", gap_err < 1e-9, format!("max |Gamma0 - closed form| = {gap_err:.2e} (tol 1e-9)")));
    r.push(line("1 eigenvector coalescence", d_ok, format!("D decreases toward the EP, max D at EP = {worst_d:.2e} (< {EP_DISTANCE:e})")));

    // The figure value of the coupling.
    let fam = GapBlockFamily::new(n4(0.244)).unwrap();
    let sweep = sweep_family(&fam, &grid(0.0, 0.488, 41), 8, &SweepOptions::default()).unwrap();
    let (events, _) = locate_all(&sweep, &fam);
    let ok = events.len() == 1 && (events[0].mu_ep - 0.122).abs() < 1e-6;
    r.push(line("1 EP at J = 0.244", ok, format!("mu_EP = {:?}", events.first().map(|e| e.mu_ep))));
    finish(&r);
}

#[test]
fn criterion_2_mean_coupling() {
    let samples = 100_000u64;
    let sum: f64 = (0..samples).map(|s| sample_disorder(4, 4, s).unwrap().couplings[0].value.abs()).sum();
    let mean = sum / samples as f64;
    let analytic = (6.0f64 / 64.0).sqrt() * (2.0 / std::f64::consts::PI).sqrt();
    let r = [
        line("2 mean |J| vs 0.2443", (mean / 0.2443 - 1.0).abs() < 0.01, format!("mean |J| = {mean:.5} over {samples} samples (tol 1%)")),
        line("2 mean |J| vs sigma sqrt(2/pi)", (mean / analytic - 1.0).abs() < 0.01, format!("analytic {analytic:.5}")),
    ];
    finish(&r);
}

#[test]
fn criterion_3_n12_spectral_structure() {
    let d = sample_disorder(12, 4, 1).unwrap();
    let fam = GapBlockFamily::new(d).unwrap();
    let spec = |mu: f64| -> SpectrumResult { dense_spectrum_with_limit(&fam.block(mu).unwrap(), false, 4096).unwrap() };
    let mut r = Vec::new();

    let s0 = spec(0.0);
    let max_re = s0.eigenvalues.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    r.push(line("3(i) mu = 0 purely imaginary", max_re < 1e-10, format!("max |Re| = {max_re:.2e} over {} eigenvalues", s0.len())));

    let mus = [0.3, 0.4, 0.5, 0.6, 0.8, 1.0, 1.2, 1.5];
    let spectra: Vec<SpectrumResult> = mus.iter().map(|&m| spec(m)).collect();
    let counts: Vec<usize> = spectra.iter().map(|s| s.real_count()).collect();
    let monotone = counts.windows(2).all(|w| w[1] >= w[0]);
    r.push(line("3(ii) real count non-decreasing for mu >= 0.3", monotone, format!("mu {mus:?} -> real counts {counts:?}")));

    // Cluster centres are the eigenvalues of the bath term alone, which is
    // linear in mu.
    let zeros = vec![0.0; fam.disorder.couplings.len()];
    let bath_only = GapBlockFamily::new(DisorderRealization::from_values(12, 4, 1, &zeros).unwrap()).unwrap();
    let mut unit: Vec<f64> = dense_spectrum_with_limit(&bath_only.block(1.0).unwrap(), false, 4096)
        .unwrap()
        .eigenvalues
        .iter()
        .map(|z| z.re)
        .collect();
    unit.sort_by(|a, b| a.partial_cmp(b).unwrap());
    unit.dedup_by(|a, b| (*a - *b).abs() < 1e-8);
    let spacing_ok = unit.windows(2).all(|w| (w[1] - w[0] - 2.0).abs() < 1e-8);
    r.push(line(
        "3(iii) bath-term levels spaced by 2 mu",
        unit.len() > 1 && spacing_ok,
        format!("levels / mu = {:?}", unit.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()),
    ));
    for (mu, s) in mus.iter().zip(&spectra).filter(|(m, _)| **m >= 1.0) {
        let real = s.real_eigenvalues();
        let near = real
            .iter()
            .filter(|&&x| unit.iter().any(|c| (x - mu * c).abs() <= 0.2))
            .count();
        let frac = near as f64 / real.len().max(1) as f64;
        r.push(line(
            &format!("3(iii) clustering at mu = {mu}"),
            !real.is_empty() && frac >= 0.8,
            format!("{near} of {} real eigenvalues within 0.2 of a bath-term level ({:.1}%)", real.len(), 100.0 * frac),
        ));
    }
    finish(&r);
}

fn desk_journal() -> Vec<GapRecord> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    let mut all = read_journal(&dir.join("ensemble_n16_28.jsonl")).unwrap();
    all.extend(read_journal(&dir.join("ensemble_n32.jsonl")).unwrap());
    all
}

fn spectral_curve() -> GapCurve {
    let (fits, notes) = fit_all(&desk_journal());
    assert!(notes.is_empty(), "{notes:?}");
    gap_curve(&fits).unwrap()
}

fn curve_text(c: &GapCurve) -> String {
    c.mu.iter().zip(&c.gamma0).zip(&c.stderr).map(|((m, g), e)| format!("{m}:{g:.4}±{e:.4}")).collect::<Vec<_>>().join(" ")
}

#[test]
fn criterion_4_extrapolated_gap() {
    let records = desk_journal();
    let mut sizes: Vec<usize> = records.iter().map(|r| r.n_total).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let min_samples = |nt: usize| {
        let mut per: std::collections::BTreeMap<usize, usize> = Default::default();
        for r in records.iter().filter(|r| r.n_total == nt && r.gamma0.is_some()) {
            *per.entry(r.mu_index).or_default() += 1;
        }
        per.values().copied().min().unwrap_or(0)
    };
    let coverage = sizes == vec![16, 20, 24, 28, 32] && sizes.iter().all(|&n| min_samples(n) >= if n == 32 { 5 } else { 20 });
    let c = spectral_curve();
    let non_monotonic = !c.is_monotonic();
    let bracket: Vec<f64> = c.local_maxima.iter().copied().filter(|m| (0.05..=0.2).contains(m)).collect();
    let r = [
        line("4 ensemble coverage", coverage, format!("sizes {sizes:?}, min samples per point {:?}", sizes.iter().map(|&n| min_samples(n)).collect::<Vec<_>>())),
        line("4 extrapolated gap non-monotonic", non_monotonic, format!("maxima {:?} minima {:?}; {}", c.local_maxima, c.local_minima, curve_text(&c))),
        line("4 local maximum in [0.05, 0.2]", !bracket.is_empty(), format!("local maxima {:?}", c.local_maxima)),
    ];
    finish(&r);
}

#[test]
fn criterion_5_i_to_iv_schwinger_dyson() {
    let opts = SdOptions::default();
    let mut r = Vec::new();

    let g = SdGrid::new(0.02, 256).unwrap();
    let p = SdParams { mu: 0.2, j: 1.0, q: 4 };
    let s = solve_branch(&g, p, Branch::SystemSeeded, &opts).unwrap();
    let is = evaluate_action(&s, &g).unwrap().is;
    r.push(line("5(i) iS(t -> 0) = ln 2", (is - std::f64::consts::LN_2).abs() < 1e-2, format!("iS(t = 0.02, m = 256) = {is:.6}")));

    let mut free_err: f64 = 0.0;
    for &(mu, t, m) in &[(0.3, 4.0, 64), (0.1, 10.0, 200), (0.5, 6.0, 128)] {
        let g = SdGrid::new(t, m).unwrap();
        let s = solve_branch(&g, SdParams { mu, j: 0.0, q: 4 }, Branch::BathSeeded, &opts).unwrap();
        let gp = s.g_pp_slice();
        for k in 1..m {
            free_err = free_err.max((gp[k].re - free_g_pp_lattice(mu, &g, k)).abs()).max(gp[k].im.abs());
        }
    }
    r.push(line("5(ii) J = 0 propagator", free_err < 1e-6, format!("max |G - closed form| = {free_err:.2e} (tol 1e-6)")));

    let mut worst: f64 = 0.0;
    for &(mu, t, m) in &[(0.15, 4.0, 64), (0.35, 8.0, 100), (0.2, 12.0, 120)] {
        let g = SdGrid::new(t, m).unwrap();
        for b in [Branch::SystemSeeded, Branch::BathSeeded] {
            let s = solve_branch(&g, SdParams { mu, j: 1.0, q: 4 }, b, &opts).unwrap();
            worst = worst.max(s.equal_time_deviation() / g.dt);
        }
    }
    r.push(line("5(iii) equal-time G_++ = 1/2", worst < EQUAL_TIME_STEPS, format!("max |G_++(0+) - 1/2| = {worst:.2} dt (tol 5 dt)")));

    let t: Vec<f64> = grid(2.0, 10.0, 9);
    let a = scan_branches(SdParams { mu: 0.15, j: 1.0, q: 4 }, &t, 100, &opts).unwrap();
    let both = a.system.iter().filter(|x| x.is_some()).count() >= 8 && a.bath.iter().filter(|x| x.is_some()).count() >= 7;
    let first_order = matches!(a.dominant.transition, Transition::FirstOrder { .. });
    r.push(line(
        "5(iv) mu = 0.15 first-order transition",
        both && first_order,
        format!("{:?}; system {:?}; bath {:?}", a.dominant.transition, fmt_opt(&a.system), fmt_opt(&a.bath)),
    ));
    let b = scan_branches(SdParams { mu: 0.35, j: 1.0, q: 4 }, &t, 100, &opts).unwrap();
    r.push(line("5(iv) mu = 0.35 crossover", b.dominant.transition == Transition::Crossover, format!("{:?}; dominant {:?}", b.dominant.transition, fmt_opt(&b.system))));
    finish(&r);
}

fn fmt_opt(v: &[Option<f64>]) -> Vec<String> {
    v.iter().map(|x| x.map(|y| format!("{y:.4}")).unwrap_or_else(|| "-".into())).collect()
}

#[test]
fn criterion_5_v_and_6_decay_rates() {
    let mus = [0.05, 0.075, 0.1, 0.125, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.5];
    let g = SdGrid::new(24.0, 240).unwrap();
    let pts = decay_scan(&mus, 1.0, 4, &g, DEFAULT_FIT_WINDOW, &SdOptions::default()).unwrap();
    let fitted: Vec<(f64, f64)> = pts.iter().filter_map(|p| p.fit.as_ref().map(|f| (p.mu, f.gamma0))).collect();
    let (m, v): (Vec<f64>, Vec<f64>) = fitted.iter().copied().unzip();
    let sd = GapCurve::from_points(&m, &v, &vec![0.0; m.len()]).unwrap();
    let at_005 = pts.iter().find(|p| p.mu == 0.05).and_then(|p| p.fit.as_ref()).map(|f| f.gamma0);
    let all_fitted = fitted.len() == mus.len();
    let mut r = vec![
        line("5(v) decay rate finite at mu = 0.05", at_005.is_some_and(|x| x.is_finite() && x > 0.0), format!("Gamma0(0.05) = {at_005:?}")),
        line(
            "5(v) decay rate non-monotonic on [0.05, 0.5]",
            all_fitted && !sd.is_monotonic(),
            format!("maxima {:?} minima {:?}; {}", sd.local_maxima, sd.local_minima, curve_text(&sd)),
        ),
    ];

    let spectral = spectral_curve();
    let low = |c: &GapCurve| {
        c.mu.iter().zip(&c.gamma0).filter(|(m, _)| c.local_minima.contains(m)).min_by(|a, b| a.1.partial_cmp(b.1).unwrap()).map(|x| *x.0)
    };
    let (a, b) = (low(&spectral), low(&sd));
    let ratio = match (a, b) {
        (Some(x), Some(y)) => Some(x / y),
        _ => None,
    };
    r.push(line(
        "6 both Gamma0 curves non-monotonic",
        !spectral.is_monotonic() && !sd.is_monotonic(),
        format!("spectral minima {:?}, large-N minima {:?}", spectral.local_minima, sd.local_minima),
    ));
    r.push(line(
        "6 minimum positions reported",
        ratio.is_some(),
        format!("spectral minimum at {a:?}, large-N minimum at {b:?}, ratio {ratio:?}; reported unadjusted"),
    ));
    finish(&r);
}

fn nearest(a: &[Complex64], z: Complex64) -> f64 {
    a.iter().map(|w| (w - z).norm()).fold(f64::INFINITY, f64::min)
}

#[test]
fn criterion_7_oracle_regressions() {
    let mut r = Vec::new();
    let mut worst: f64 = 0.0;
    let mut blocks = 0;
    for n in [4usize, 6, 8, 10] {
        let d = sample_disorder(n, 4, 11).unwrap();
        for &mu in &[0.1, 0.6] {
            let b = build_decomposed(&d, mu).unwrap();
            for label in [BlockLabel::Plus, BlockLabel::Minus] {
                let op = b.block(label).unwrap();
                let dense = dense_spectrum(op, false).unwrap();
                let k = (op.dim() / 4).clamp(1, 6);
                let opts = KrylovOptions { block_size: 1, basis_size: Some(40), keep: Some(10), max_restarts: 5000, ..Default::default() };
                let right = krylov_rightmost(op, k, &opts).unwrap();
                let near = krylov_near_zero(op, k, Complex64::new(-0.05, 0.01)).unwrap();
                for z in right.eigenvalues.iter().chain(&near.eigenvalues) {
                    worst = worst.max(nearest(&dense.eigenvalues, *z));
                }
                blocks += 1;
            }
        }
    }
    r.push(line("7 dense vs Krylov", worst < 1e-8, format!("max distance {worst:.2e} over {blocks} blocks, N <= 10 (tol 1e-8)")));

    let mut union_err: f64 = 0.0;
    for n in [4usize, 6] {
        let d = sample_disorder(n, 4, 5).unwrap();
        for &mu in &[0.0, 0.3, 1.0] {
            let b = build_decomposed(&d, mu).unwrap();
            let full = dense_spectrum(&build_liouvillian(&d, mu).unwrap().l, false).unwrap().eigenvalues;
            let mut parts = dense_spectrum(b.block(BlockLabel::Plus).unwrap(), false).unwrap().eigenvalues;
            parts.extend(dense_spectrum(b.block(BlockLabel::Minus).unwrap(), false).unwrap().eigenvalues);
            if parts.len() != full.len() {
                union_err = f64::INFINITY;
                continue;
            }
            // Multiset comparison through sorted keys.
            let key = |z: &Complex64| ((z.re * 1e6).round() as i64, (z.im * 1e6).round() as i64);
            let mut a: Vec<_> = full.iter().collect();
            let mut c: Vec<_> = parts.iter().collect();
            a.sort_by_key(|z| key(z));
            c.sort_by_key(|z| key(z));
            for (x, y) in a.iter().zip(&c) {
                union_err = union_err.max((**x - **y).norm());
            }
        }
    }
    r.push(line("7 parity blocks union = full spectrum", union_err < 1e-8, format!("max mismatch {union_err:.2e} for N <= 6")));

    let render = || {
        let d = sample_disorder(8, 4, 3).unwrap();
        let fam = GapBlockFamily::new(d.clone()).unwrap();
        let spectra: Vec<SpectrumResult> = [0.1, 0.4].iter().map(|&mu| fam.spectrum(mu, false).unwrap()).collect();
        let mut buf = Vec::new();
        write_spectrum_csv(&mut buf, &spectra, true).unwrap();
        let sweep = sweep_family(&fam, &grid(0.05, 0.5, 8), 32, &SweepOptions::default()).unwrap();
        lsyk::ep::write_traces_csv(&mut buf, &sweep.traces).unwrap();
        let (events, _) = locate_all(&sweep, &fam);
        lsyk::ep::write_events_json(&mut buf, &events).unwrap();
        for c in count_real_and_intruders(&sweep.traces, &sweep.mu_grid, sweep.eps_im) {
            writeln!(buf, "{c:?}").unwrap();
        }
        let g = dissipative_gap(&spectra[0], false).unwrap();
        writeln!(buf, "{g:?}").unwrap();
        buf
    };
    let (a, b) = (render(), render());
    r.push(line("7 deterministic outputs", a == b, format!("{} bytes, byte-identical across runs", a.len())));
    finish(&r);
}
