//! Acceptance criteria. Each test writes one `criterion N: PASS|FAIL` line to
//! stderr (bypassing the harness capture) and then asserts.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use sandreg::counterexample::{find_delta_for_eta, CounterexampleSpec, Law, QuadratureSettings};
use sandreg::dispersion::{minimize_dispersion, DispersionObjective, ObjectiveKind, OptimizerSettings};
use sandreg::inference::jackknife_variance;
use sandreg::qml::{fit, solve_wls};
use sandreg::sandwich::{loo_beta, sandwich_loss, LooCache};
use sandreg::sim::{jackknife_calibration, run_mse_experiment, DgpKind, DgpSpec, ExperimentSettings, MethodSpec};
use sandreg::working_cov::{arma_autocorrelation, arma_autocovariance};
use sandreg::{ClusterData, ClusterDataset, CovarianceStructure, DispersionParams, GlmFamily, ScaleMode, TargetContrast};

fn report(n: usize, pass: bool, detail: &str) {
    let line = format!("criterion {n}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn random_dataset(rng: &mut ChaCha8Rng, clusters: usize, sizes: (usize, usize), p: usize) -> ClusterDataset {
    let data = (0..clusters)
        .map(|_| {
            let n = rng.random_range(sizes.0..=sizes.1);
            let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
            let u: f64 = rng.sample(StandardNormal);
            let y = DVector::from_fn(n, |k, _| x.row(k).sum() + u + rng.sample::<f64, _>(StandardNormal));
            ClusterData::new(y, x).unwrap()
        })
        .collect();
    ClusterDataset::new(data).unwrap()
}

/// Random positive definite working structure: exchangeable or AR(1) with a free scale.
fn random_structure(rng: &mut ChaCha8Rng) -> (CovarianceStructure, DispersionParams) {
    let phi = rng.random_range(0.5..3.0);
    if rng.random::<bool>() {
        (CovarianceStructure::exchangeable(ScaleMode::Free), DispersionParams::from_slice(&[rng.random_range(-0.15..0.9), phi]))
    } else {
        (CovarianceStructure::ar1(ScaleMode::Free), DispersionParams::from_slice(&[rng.random_range(-0.9..0.9), phi]))
    }
}

#[test]
fn criterion_1_linear_loo_exact() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ds = random_dataset(&mut rng, 30, (2, 6), 3);
        let (s, g) = random_structure(&mut rng);
        let sol = solve_wls(&ds, &s, &g).unwrap();
        for i in 0..30 {
            let approx = &sol.beta + loo_beta(&sol, i).unwrap();
            let exact = fit(&ds.without(i).unwrap(), &GlmFamily::gaussian(), &s, &g, None).unwrap().beta;
            worst = worst.max((&approx - &exact).norm() / exact.norm());
        }
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-10 && elapsed < Duration::from_secs(5);
    report(1, pass, &format!("max relative error {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_2_hc3() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(10..40);
        let p = rng.random_range(1..4);
        let x: DMatrix<f64> = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let y = DVector::from_fn(n, |k, _| x[(k, p - 1)] + (1.0 + x[(k, p - 1)].abs()) * rng.sample::<f64, _>(StandardNormal));
        let ds = ClusterDataset::new(
            (0..n).map(|k| ClusterData::new(DVector::from_element(1, y[k]), x.rows(k, 1).into_owned()).unwrap()).collect(),
        )
        .unwrap();
        let c = TargetContrast::new(DVector::from_fn(p, |_, _| rng.random_range(-1.0..1.0))).unwrap();
        let loss = sandwich_loss(&ds, &GlmFamily::gaussian(), &CovarianceStructure::independence(), &DispersionParams::empty(), &c).unwrap();
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let r = &y - &x * (&xtx_inv * x.transpose() * &y);
        let mut meat = DMatrix::zeros(p, p);
        for k in 0..n {
            let xk = x.row(k).transpose();
            let h = (xk.transpose() * &xtx_inv * &xk)[(0, 0)];
            meat += &xk * xk.transpose() * (r[k] / (1.0 - h)).powi(2);
        }
        let hc3 = (c.vector().transpose() * &xtx_inv * meat * &xtx_inv * c.vector())[(0, 0)];
        worst = worst.max((loss.value - hc3).abs() / hc3.abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(1);
    report(2, pass, &format!("max relative error {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_3_woodbury() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let ds = random_dataset(&mut rng, 12, (2, 6), 3);
        let (s, g) = random_structure(&mut rng);
        let sol = solve_wls(&ds, &s, &g).unwrap();
        let cache = LooCache::build(&sol).unwrap();
        for (term, ct) in cache.terms.iter().zip(&sol.terms) {
            let direct = (&sol.info - &ct.dtwd).try_inverse().unwrap();
            worst = worst.max((&term.t - &direct).amax() / direct.amax());
        }
    }
    let pass = worst <= 1e-8;
    report(3, pass, &format!("max relative error {worst:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_4_degenerate_jackknife() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let ds = random_dataset(&mut rng, 25, (2, 6), 3);
        let s = CovarianceStructure::exchangeable(ScaleMode::Free);
        let obj = DispersionObjective::sandwich(TargetContrast::coordinate(3, 1).unwrap());
        let settings = OptimizerSettings { restarts: 2, ..Default::default() };
        let f = minimize_dispersion(&ds, &GlmFamily::gaussian(), &s, &obj, &settings).unwrap();
        let v = jackknife_variance(&f, &ds, &GlmFamily::gaussian(), &obj, 0).unwrap();
        let cache = LooCache::build(&f.solution).unwrap();
        let big_i = ds.num_clusters() as f64;
        let tst = cache.terms.iter().fold(DMatrix::zeros(3, 3), |acc, t| acc + &t.t * &t.s * &t.t) * ((big_i - 1.0) / big_i);
        worst = worst.max((&v.vhat - &tst).amax() / tst.amax());
    }
    let pass = worst <= 1e-12;
    report(4, pass, &format!("max relative difference {worst:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_5_counterexample() {
    let start = Instant::now();
    let q = QuadratureSettings::default();
    let spec = CounterexampleSpec::new(1.0, 1.0, 0.5, 5.0).unwrap();
    let mut ok = (spec.c1() - 0.8).abs() < 1e-12 && (spec.c2() - 0.4).abs() < 1e-12;
    let (g1, g2): (f64, f64) = spec.population_minimizers();
    ok &= (g1 - 1.2).abs() < 1e-12 && (g2 - 0.8).abs() < 1e-12;
    let mut detail = String::new();
    for delta in [5.0, 20.0, 100.0] {
        let law = Law::new(spec.with_delta(delta), q).unwrap();
        let mass = law.expect(|_| 1.0).unwrap();
        let m2 = law.expect(|x| x * x).unwrap();
        ok &= (mass - 1.0).abs() < 1e-7 && (m2 - 1.0).abs() < 1e-7;
        let gq = law.population_minimizers_quadrature().unwrap();
        ok &= (gq.0 - 1.2).abs() < 1e-7 && (gq.1 - 0.8).abs() < 1e-7;
        let r = law.divergence().unwrap();
        ok &= r.ratio > 0.05 * r.b_delta;
        detail += &format!("delta={delta}: ratio {:.4} > {:.4}; ", r.ratio, 0.05 * r.b_delta);
    }
    let d = find_delta_for_eta(1.0, 1.0, 0.5, 10.0, &q).unwrap();
    ok &= d <= 500.0;
    let elapsed = start.elapsed();
    let pass = ok && elapsed < Duration::from_secs(30);
    report(5, pass, &format!("{detail}delta*(eta=10) = {d}, {elapsed:.2?}"));
    assert!(pass);
}

fn linear_methods() -> Vec<MethodSpec> {
    let s = CovarianceStructure::exchangeable(ScaleMode::Free);
    vec![
        MethodSpec::new("sandwich", ObjectiveKind::Sandwich, s.clone()),
        MethodSpec::new("eqml", ObjectiveKind::Eqml, s.clone()),
        MethodSpec::new("gee", ObjectiveKind::Gee, s),
    ]
}

#[test]
fn criterion_6_misspecified_linear() {
    let dgp = DgpSpec::new(DgpKind::LinearMultilevel { lambda: 3.0 }, 200).unwrap();
    let r = run_mse_experiment(&[dgp], &linear_methods(), &ExperimentSettings::new(500, 6)).unwrap();
    let label = &r.designs[0].label;
    let row = |m: &str| r.row(label, m).unwrap().clone();
    let (s, e, g) = (row("sandwich"), row("eqml"), row("gee"));
    let de = r.paired_difference(label, "sandwich", "eqml").unwrap();
    let dg = r.paired_difference(label, "sandwich", "gee").unwrap();
    let pass = s.mse_ratio < e.mse_ratio && s.mse_ratio < g.mse_ratio && de.z() <= -2.0 && dg.z() <= -2.0;
    report(
        6,
        pass,
        &format!(
            "ratios sandwich {:.4}, eqml {:.4}, gee {:.4}; paired z vs eqml {:.2}, vs gee {:.2}",
            s.mse_ratio,
            e.mse_ratio,
            g.mse_ratio,
            de.z(),
            dg.z()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_7_well_specified_linear() {
    let dgp = DgpSpec::new(DgpKind::LinearMultilevel { lambda: 0.0 }, 200).unwrap();
    let methods: Vec<MethodSpec> = linear_methods().into_iter().take(2).collect();
    let r = run_mse_experiment(&[dgp], &methods, &ExperimentSettings::new(500, 7)).unwrap();
    let label = &r.designs[0].label;
    let s = r.row(label, "sandwich").unwrap().mse_ratio;
    let e = r.row(label, "eqml").unwrap().mse_ratio;
    let pass = s <= 1.15 * e;
    report(7, pass, &format!("ratios sandwich {s:.4}, eqml {e:.4}, bound {:.4}", 1.15 * e));
    assert!(pass);
}

#[test]
fn criterion_8_jackknife_calibration() {
    let dgp = DgpSpec::new(DgpKind::LinearMultilevel { lambda: 0.0 }, 100).unwrap();
    let method = MethodSpec::new("sandwich", ObjectiveKind::Sandwich, CovarianceStructure::exchangeable(ScaleMode::Free));
    let c = jackknife_calibration(&dgp, &method, 1, &ExperimentSettings::new(500, 8)).unwrap();
    let ratio = c.ratio();
    let pass = (0.7..=1.4).contains(&ratio);
    report(
        8,
        pass,
        &format!(
            "mean jackknife variance {:.4e}, empirical variance {:.4e}, ratio {ratio:.4} ({} reps)",
            c.mean_estimated_variance, c.empirical_variance, c.reps
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_9_arma() {
    let mut ok = true;
    let mut worst_ar1 = 0.0f64;
    for phi in [-0.9f64, -0.3, 0.0, 0.5, 0.95] {
        let g = arma_autocovariance(&[phi], &[], 1.7, 10).unwrap();
        for (k, v) in g.iter().enumerate() {
            let closed = 1.7 * phi.powi(k as i32) / (1.0 - phi * phi);
            worst_ar1 = worst_ar1.max((v - closed).abs() / closed.abs().max(1.0));
        }
    }
    ok &= worst_ar1 <= 1e-10;

    let (ar, ma) = ([0.4, 0.5], [-0.9, 0.4]);
    let acf = arma_autocorrelation(&ar, &ma, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let n = 10_000_000;
    let burn = 1000;
    let mut x = vec![0.0f64; n + burn];
    let (mut e1, mut e2) = (0.0f64, 0.0f64);
    for t in 0..n + burn {
        let e: f64 = rng.sample(StandardNormal);
        let x1 = if t >= 1 { x[t - 1] } else { 0.0 };
        let x2 = if t >= 2 { x[t - 2] } else { 0.0 };
        x[t] = ar[0] * x1 + ar[1] * x2 + e + ma[0] * e1 + ma[1] * e2;
        e2 = e1;
        e1 = e;
    }
    let x = &x[burn..];
    let mean = x.iter().sum::<f64>() / n as f64;
    let gamma = |k: usize| (0..n - k).map(|t| (x[t] - mean) * (x[t + k] - mean)).sum::<f64>() / n as f64;
    let g0 = gamma(0);
    let worst_arma = (0..=5).map(|k| (gamma(k) / g0 - acf[k]).abs()).fold(0.0, f64::max);
    ok &= worst_arma <= 2e-2;
    report(9, ok, &format!("AR(1) max error {worst_ar1:.2e}; ARMA(2,2) max ACF deviation {worst_arma:.2e} over lags 0-5"));
    assert!(ok);
}

#[test]
fn criterion_10_out_of_scope() {
    let _ = std::io::stderr().write_all(
        b"criterion 10: SKIP large-N AIC table and the two real-data analyses are not reproducible here\n",
    );
}
