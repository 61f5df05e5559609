use lsyk::ep::*;
use lsyk::model::DisorderRealization;
use num_complex::Complex64;

fn grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn n4(j: f64) -> DisorderRealization {
    DisorderRealization::from_values(4, 4, 0, &[j]).unwrap()
}

#[test]
fn n4_branches_follow_closed_form() {
    let j = 0.244;
    let fam = GapBlockFamily::new(n4(j)).unwrap();
    let sweep = sweep_family(&fam, &grid(0.0, 2.0 * j, 41), 8, &SweepOptions::default()).unwrap();
    assert_eq!(sweep.traces.len(), 2, "{:?}", sweep.traces);
    for t in &sweep.traces {
        assert_eq!(t.multiplicity, 4);
        for (&mu, &v) in t.mu_grid.iter().zip(&t.values) {
            let pair = n4_oracle_pair(j, mu);
            let err = pair.iter().map(|p| (p - v).norm()).fold(f64::INFINITY, f64::min);
            assert!(err < 1e-10, "mu {mu}: {v} vs {pair:?}");
        }
    }
    let (events, failures) = locate_all(&sweep, &fam);
    assert!(failures.is_empty(), "{failures:?}");
    assert_eq!(events.len(), 1);
    assert!((events[0].mu_ep - j / 2.0).abs() < 1e-6);
    assert!(events[0].d_at_ep < EP_DISTANCE);
    let counts = count_real_and_intruders(&sweep.traces, &sweep.mu_grid, sweep.eps_im);
    for c in &counts {
        assert_eq!(c.intruders, 0);
        if c.mu > j / 2.0 + 1e-9 {
            assert_eq!(c.ep_born, 2, "{c:?}");
        }
    }
}

#[test]
fn n4_ep_location_over_random_couplings() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let j: f64 = rng.gen_range(0.05..2.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let fam = GapBlockFamily::new(n4(j)).unwrap();
        let top = 1.5 * j.abs();
        let sweep = sweep_family(&fam, &grid(0.0, top, 13), 8, &SweepOptions::default()).unwrap();
        let (events, failures) = locate_all(&sweep, &fam);
        assert!(failures.is_empty(), "J = {j}: {failures:?}");
        assert_eq!(events.len(), 1, "J = {j}");
        assert!((events[0].mu_ep - j.abs() / 2.0).abs() < 1e-6, "J = {j}: {}", events[0].mu_ep);
    }
}

#[test]
fn unit_coupling_ep_at_half() {
    let fam = GapBlockFamily::new(n4(1.0)).unwrap();
    let sweep = sweep_family(&fam, &grid(0.0, 1.0, 11), 8, &SweepOptions::default()).unwrap();
    let (events, _) = locate_all(&sweep, &fam);
    assert_eq!(events.len(), 1);
    assert!((events[0].mu_ep - 0.5).abs() < 1e-6);
}

#[test]
fn n4_distance_shrinks_toward_ep() {
    let fam = GapBlockFamily::new(n4(0.244)).unwrap();
    let sweep = sweep_family(&fam, &grid(0.0, 0.3, 16), 8, &SweepOptions::default()).unwrap();
    let (events, _) = locate_all(&sweep, &fam);
    let d: Vec<f64> = events[0].d_trace.iter().map(|p| p.1).collect();
    assert!(d.windows(2).all(|w| w[1] < w[0]), "{d:?}");
}

#[test]
fn weak_coupling_grid_has_no_ep() {
    let fam = GapBlockFamily::new(n4(0.244)).unwrap();
    let sweep = sweep_family(&fam, &grid(0.0, 0.1, 11), 8, &SweepOptions::default()).unwrap();
    let (events, _) = locate_all(&sweep, &fam);
    assert!(events.is_empty());
}

#[test]
fn bath_only_generator_is_real() {
    let d = DisorderRealization::from_values(6, 4, 0, &[0.0; 15]).unwrap();
    let fam = GapBlockFamily::new(d).unwrap();
    let sweep = sweep_family(&fam, &grid(0.05, 1.0, 8), 32, &SweepOptions::default()).unwrap();
    for t in &sweep.traces {
        assert!(t.values.iter().all(|v: &Complex64| v.im.abs() < sweep.eps_im));
    }
}

#[test]
fn n8_refined_grid_has_same_topology() {
    let d = lsyk::model::sample_disorder(8, 4, 21).unwrap();
    let fam = GapBlockFamily::new(d).unwrap();
    let coarse = grid(0.05, 0.6, 12);
    let fine = grid(0.05, 0.6, 23);
    let k = fam.block(0.05).unwrap().dim();
    let a = sweep_family(&fam, &coarse, k, &SweepOptions::default()).unwrap();
    let b = sweep_family(&fam, &fine, k, &SweepOptions::default()).unwrap();
    let (ea, fa) = locate_all(&a, &fam);
    let (eb, fb) = locate_all(&b, &fam);
    assert!(fa.is_empty() && fb.is_empty(), "{fa:?} {fb:?}");
    let spanning = |s: &Sweep| s.traces.iter().filter(|t| t.spans(0.05) && t.spans(0.6)).count();
    println!("coarse {} branches {} eps, fine {} branches {} eps", spanning(&a), ea.len(), spanning(&b), eb.len());
    assert_eq!(spanning(&a), spanning(&b));
    assert_eq!(ea.len(), eb.len());
}

#[test]
fn grid_values_match_fresh_diagonalization() {
    let d = lsyk::model::sample_disorder(6, 4, 3).unwrap();
    let fam = GapBlockFamily::new(d).unwrap();
    let sweep = sweep_family(&fam, &grid(0.0, 0.5, 9), 32, &SweepOptions::default()).unwrap();
    for t in &sweep.traces {
        for (&mu, v) in t.mu_grid.iter().zip(&t.values) {
            let s = fam.spectrum(mu, false).unwrap();
            let best = s.eigenvalues.iter().map(|z| (z - v).norm()).fold(f64::INFINITY, f64::min);
            assert!(best < 1e-9);
        }
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]

    #[test]
    fn branches_repel_along_real_axis_after_ep(j in 0.05f64..2.0, negative in proptest::prelude::any::<bool>()) {
        let j = if negative { -j } else { j };
        let ep = j.abs() / 2.0;
        let mut mu = grid(0.0, 0.9 * ep, 10);
        mu.extend([ep * 1.01, ep * 1.02]);
        let fam = GapBlockFamily::new(n4(j)).unwrap();
        let sweep = sweep_family(&fam, &mu, 8, &SweepOptions::default()).unwrap();
        proptest::prop_assert_eq!(sweep.traces.len(), 2);
        // Traces carry the refined grid; the last two points lie past the EP.
        let step: Vec<f64> = sweep
            .traces
            .iter()
            .map(|t| {
                let v = &t.values[t.values.len() - 2..];
                assert_eq!(t.mu_grid[t.mu_grid.len() - 2], ep * 1.01);
                assert!(v.iter().all(|z| z.im.abs() < sweep.eps_im), "{v:?}");
                v[1].re - v[0].re
            })
            .collect();
        proptest::prop_assert!(step[0] * step[1] < 0.0, "steps {step:?}");
    }
}
