//! Frozen-value oracle tests: expected values computed with independent
//! integrators (dense trapezoid rules, two-resolution quadrature
//! cross-checks) before being asserted against the library paths.

use fbsde::problems::Terminal;
use fbsde::quantizer::{self, TrainingSchedule};
use fbsde::reference::{burgers_exact, kpz_exact, Quadrature};

/// Dense trapezoid integration of f against the standard normal density,
/// independent of the Gauss-Hermite code path.
fn trapezoid_gaussian(f: impl Fn(f64) -> f64, span: f64, steps: usize) -> f64 {
    let dx = 2.0 * span / steps as f64;
    let mut acc = 0.0;
    for i in 0..=steps {
        let x = -span + i as f64 * dx;
        let phi = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
        acc += w * f(x) * phi * dx;
    }
    acc
}

#[test]
fn hermite_rule_matches_trapezoid_oracle() {
    let q = Quadrature::gauss_hermite(2000);
    assert_eq!(q.expect(|_| 1.0), 1.0);
    assert!((q.expect(|x| x[0] * x[0]) - 1.0).abs() < 1e-10);
    assert!((q.expect(|x| x[0].powi(6)) - 15.0).abs() < 1e-8);
    for f in [
        (|x: f64| (1.3 * x).sin() + x.cos()) as fn(f64) -> f64,
        |x: f64| (-(x - 0.7) * (x - 0.7)).exp(),
    ] {
        let oracle = trapezoid_gaussian(f, 10.0, 400_000);
        let gh = q.expect(|x| f(x[0]));
        assert!((gh - oracle).abs() < 1e-9, "{gh} vs {oracle}");
    }
}

#[test]
fn burgers_sine_reference_two_resolution_cross_check() {
    // Two-resolution agreement pins the quadrature error; the dense
    // trapezoid oracle pins the value itself.
    let sine = Terminal::sine();
    let q500 = Quadrature::gauss_hermite(500);
    let q2000 = Quadrature::gauss_hermite(2000);
    let a = burgers_exact(0.15, &sine, 0.0, 0.25, 1.0, &q500).unwrap();
    let b = burgers_exact(0.15, &sine, 0.0, 0.25, 1.0, &q2000).unwrap();
    assert!((a - b).abs() < 1e-8, "{a} vs {b}");

    let eps = 0.15f64;
    let sd = eps; // eps * sqrt(T - t) at t = 0, T = 1
    let inner =
        |y: f64| (1.0 - (2.0 * std::f64::consts::PI * y).cos()) / (2.0 * std::f64::consts::PI);
    let phi = |y: f64| (-(inner(y)) / (eps * eps)).exp();
    let h = |y: f64| (2.0 * std::f64::consts::PI * y).sin();
    let num = trapezoid_gaussian(|g| h(0.25 + sd * g) * phi(0.25 + sd * g), 10.0, 400_000);
    let den = trapezoid_gaussian(|g| phi(0.25 + sd * g), 10.0, 400_000);
    let oracle = num / den;
    assert!((a - oracle).abs() < 1e-7, "{a} vs oracle {oracle}");
}

#[test]
fn kpz_reference_two_resolution_cross_check() {
    let prod = Terminal::new("prod", |x: &[f64]| {
        (2.0 * std::f64::consts::PI * x[0]).sin() * (2.0 * std::f64::consts::PI * x[1]).sin()
    });
    let sigma = [1.0, 0.0, 0.8, 0.6];
    let q200 = Quadrature::gauss_hermite_2d(200);
    let q500 = Quadrature::gauss_hermite_2d(500);
    let a = kpz_exact(0.3, &sigma, &prod, 0.0, &[0.25, 0.25], 0.5, &q200).unwrap();
    let b = kpz_exact(0.3, &sigma, &prod, 0.0, &[0.25, 0.25], 0.5, &q500).unwrap();
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn two_point_quantizer_matches_analytic_optimum() {
    // 1-D oracle: the optimal two-point quantizer puts its points at
    // +-E[Z | Z > 0] = +-sqrt(2/pi) with equal weights, and its squared
    // distortion is 1 - 2/pi. Recomputed here by one-sided trapezoid
    // integration over [0, 10] where the integrands are smooth.
    let half_density = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let one_sided = |f: &dyn Fn(f64) -> f64| {
        let steps = 400_000usize;
        let dx = 10.0 / steps as f64;
        let mut acc = 0.0;
        for i in 0..=steps {
            let x = i as f64 * dx;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            acc += w * f(x) * half_density(x) * dx;
        }
        acc
    };
    let centroid = one_sided(&|x| x) / one_sided(&|_| 1.0);
    assert!((centroid - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-6);

    let sched = TrainingSchedule::default();
    let grid = quantizer::train(1, 2, 7, &sched).unwrap();
    assert!((grid.point(0)[0] + centroid).abs() < 0.01, "{:?}", grid.point(0));
    assert!((grid.point(1)[0] - centroid).abs() < 0.01, "{:?}", grid.point(1));
    assert!((grid.weight(0) - 0.5).abs() < 0.01);
    let d2_expected = 1.0 - 2.0 / std::f64::consts::PI;
    assert!(
        (grid.distortion2() - d2_expected).abs() < 0.02 * d2_expected,
        "{} vs {}",
        grid.distortion2(),
        d2_expected
    );
    // The measured 2-distortion agrees with sqrt(1 - 2/pi).
    let d = grid.distortion(2.0, 400_000, 99);
    assert!((d - d2_expected.sqrt()).abs() < 0.02 * d2_expected.sqrt(), "{d}");
}

#[test]
fn scaled_increment_mean_error_scales_with_grid_size() {
    // E|g(dB) - dB| <= C sqrt(h) M^{-1/d}: calibrate C at M = 50 and
    // check M = 100, 200 against it with slack.
    let sched = TrainingSchedule {
        lloyd_samples: 100_000,
        clvq_samples: 200_000,
        weight_samples: 400_000,
        distortion_samples: 200_000,
        ..Default::default()
    };
    let h = 0.01f64;
    let mean_err = |m: usize| {
        let grid = quantizer::train(1, m, 11, &sched).unwrap();
        let d1 = grid.distortion(1.0, 400_000, 5);
        // L1 distortion of the scaled increment is sqrt(h) times the
        // unit-variance distortion.
        h.sqrt() * d1
    };
    let e50 = mean_err(50);
    let c = e50 * 50.0 / h.sqrt();
    for m in [100usize, 200] {
        let e = mean_err(m);
        let bound = 1.25 * c * h.sqrt() / m as f64;
        assert!(e <= bound, "M = {m}: {e} vs bound {bound}");
    }
}
