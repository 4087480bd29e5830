//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with the measured quantities (run with --nocapture to
//! see the lines for passing criteria).

use std::sync::OnceLock;

use fbsde::diagnostics::{compare, compare_fields, convergence_study, StudyConfig};
use fbsde::grid::GridSpec;
use fbsde::problems::{
    make_burgers_backward, make_burgers_coupled, make_kpz_benchmark, make_porous_media, Problem,
    Terminal,
};
use fbsde::quantizer::{self, QuantizerGrid, TrainingSchedule};
use fbsde::reference::{burgers_exact, kpz_exact, porous_exact_grad, Quadrature};
use fbsde::sim;
use fbsde::solver::{
    porous_differentiated, solve, solve_differentiated, SolverConfig, Variant,
};

fn quantizer_1d_160() -> &'static QuantizerGrid {
    static GRID: OnceLock<QuantizerGrid> = OnceLock::new();
    GRID.get_or_init(|| quantizer::train(1, 160, 7, &TrainingSchedule::default()).unwrap())
}

fn verdict(criterion: &str, pass: bool, details: &str) {
    println!(
        "ACCEPTANCE {criterion}: {} — {details}",
        if pass { "PASS" } else { "FAIL" }
    );
}

/// Criterion 1: Burgers truncation benchmark. H(x) = exp(-x^2/2), T = 1,
/// h = 0.02, rho = 3, delta = rho/500, M = 250, R = 1; max abs error vs
/// the Cole-Hopf reference on [-1, 1] at most 0.06.
#[test]
fn criterion_1_burgers_truncation() {
    let quant = quantizer::train(1, 250, 7, &TrainingSchedule::default()).unwrap();
    let problem = make_burgers_coupled(0.15, Terminal::gaussian_bump());
    let spec = GridSpec::truncated(1, 3.0 / 500.0, 1.0, 3.0, 50, 1.0);
    let config = SolverConfig::new(spec, Variant::Full31);
    let solution = solve(&problem, &config, &quant).unwrap();
    let quad = Quadrature::gauss_hermite(500);
    let bump = Terminal::gaussian_bump();
    let reference = |x: &[f64]| burgers_exact(0.15, &bump, 0.0, x[0], 1.0, &quad).unwrap();
    let report = compare(&solution, 0, &reference, Some(&[(-1.0, 1.0)])).unwrap();
    let pass = report.max_abs <= 0.06;
    verdict(
        "1 burgers-truncation",
        pass,
        &format!("max abs on [-1, 1] = {:.5} (tolerance 0.06)", report.max_abs),
    );
    assert!(pass, "max abs {}", report.max_abs);
}

/// Criterion 2: with the periodic sine benchmark, the pure-backward
/// algorithm's max abs error exceeds the coupled algorithm's by a factor
/// of at least 2.
#[test]
fn criterion_2_coupled_beats_backward() {
    let quant = quantizer_1d_160();
    let spec = GridSpec::periodic(1, 1e-3, 1.0, 100, 1.0);
    let quad = Quadrature::gauss_hermite(500);
    let sine = Terminal::sine();
    let reference = |x: &[f64]| burgers_exact(0.15, &sine, 0.0, x[0], 1.0, &quad).unwrap();

    let mut coupled = make_burgers_coupled(0.15, Terminal::sine());
    coupled.period = Some(vec![1.0]);
    let sol_c = solve(&coupled, &SolverConfig::new(spec.clone(), Variant::Full31), quant).unwrap();
    let err_c = compare(&sol_c, 0, &reference, None).unwrap().max_abs;

    let mut backward = make_burgers_backward(0.15, Terminal::sine());
    backward.period = Some(vec![1.0]);
    let sol_b = solve(&backward, &SolverConfig::new(spec, Variant::PureBackward), quant).unwrap();
    let err_b = compare(&sol_b, 0, &reference, None).unwrap().max_abs;

    let ratio = err_b / err_c;
    let pass = ratio >= 2.0;
    verdict(
        "2 coupled-vs-backward",
        pass,
        &format!("coupled {err_c:.5}, backward {err_b:.5}, ratio {ratio:.2} (need >= 2)"),
    );
    assert!(pass, "ratio {ratio}");
}

/// Criterion 3: KPZ desk scale. nu = 0.3, T = 0.5, h = 0.02, M = 160,
/// theta = 0.8, delta = 5e-3; max relative error (sup normalization)
/// against the log-exponential reference at most 0.35.
///
/// Known red: the measured error is dominated by the first-order time
/// bias of the explicit driver near the oscillatory terminal and sits
/// near 0.40 regardless of delta or M (see the solver documentation on
/// the time-step regime). The criterion is asserted as stated.
#[test]
fn criterion_3_kpz_desk_scale() {
    let quant = quantizer::train(2, 160, 7, &TrainingSchedule::default()).unwrap();
    let problem = make_kpz_benchmark(0.3, 0.8).unwrap();
    let spec = GridSpec::periodic(2, 5e-3, 1.0, 25, 0.5);
    let config = SolverConfig::new(spec, Variant::Full31);
    let solution = solve(&problem, &config, &quant).unwrap();
    let quad = Quadrature::gauss_hermite_2d(60);
    let sigma = [1.0, 0.0, 0.8, 0.6];
    let terminal = problem.terminal().clone();
    let reference =
        |x: &[f64]| kpz_exact(0.3, &sigma, &terminal, 0.0, &[x[0], x[1]], 0.5, &quad).unwrap();
    let report = compare(&solution, 0, &reference, None).unwrap();
    let pass = report.max_rel_sup <= 0.35;
    verdict(
        "3 kpz-desk-scale",
        pass,
        &format!(
            "max rel (sup norm) = {:.4}, max abs = {:.5}, pointwise rel unbounded at zeros \
             (tolerance 0.35)",
            report.max_rel_sup, report.max_abs
        ),
    );
    assert!(pass, "max rel {}", report.max_rel_sup);
}

/// Optional reproduction target attached to criterion 3: the full-delta
/// run (delta = 5e-4, about 4e6 nodes) must reach 0.25. Long; run with
/// --ignored to reproduce.
#[test]
#[ignore = "full-resolution reproduction run (tens of minutes)"]
fn criterion_3_kpz_full_resolution() {
    let quant = quantizer::train(2, 160, 7, &TrainingSchedule::default()).unwrap();
    let problem = make_kpz_benchmark(0.3, 0.8).unwrap();
    let spec = GridSpec::periodic(2, 5e-4, 1.0, 25, 0.5);
    let config = SolverConfig::new(spec, Variant::Full31);
    let solution = solve(&problem, &config, &quant).unwrap();
    let quad = Quadrature::gauss_hermite_2d(60);
    let sigma = [1.0, 0.0, 0.8, 0.6];
    let terminal = problem.terminal().clone();
    let reference =
        |x: &[f64]| kpz_exact(0.3, &sigma, &terminal, 0.0, &[x[0], x[1]], 0.5, &quad).unwrap();
    let report = compare(&solution, 0, &reference, None).unwrap();
    let pass = report.max_rel_sup <= 0.25;
    verdict(
        "3-optional kpz-full-delta",
        pass,
        &format!("max rel (sup norm) = {:.4} (target 0.25)", report.max_rel_sup),
    );
    assert!(pass, "max rel {}", report.max_rel_sup);
}

/// Criterion 4: porous media on [T/2, T] with h = 0.02, delta = L/500,
/// M = 160. The differentiated algorithm's pointwise gradient error must
/// be at most half the value-scheme reconstruction's error away from the
/// degeneracy at x = L/2 (a 3-delta neighborhood is excluded).
#[test]
fn criterion_4_porous_differentiated_gradient() {
    let l = 2.0 * std::f64::consts::SQRT_2 * std::f64::consts::PI;
    let quant = quantizer_1d_160();
    let delta = l / 500.0;
    let spec = GridSpec::periodic(1, delta, l, 25, 0.5);

    let porous = make_porous_media(l, 1.0);
    let sol_31 = solve(&porous, &SolverConfig::new(spec.clone(), Variant::Full31), quant).unwrap();
    let pair = porous_differentiated(l, 1.0);
    let sol_53 =
        solve_differentiated(&pair, &SolverConfig::new(spec, Variant::Differentiated), quant)
            .unwrap();

    // Value-scheme gradient reconstruction dx u ~ vbar / sqrt(2 ubar+),
    // set to zero where the diffusion degenerates.
    let s31 = sol_31.slice(0).unwrap();
    let vbar = s31.vbar.as_ref().unwrap();
    let recon: Vec<f64> = s31
        .ubar
        .iter()
        .zip(vbar)
        .map(|(&u, &v)| {
            let s = (2.0 * u.max(0.0)).sqrt();
            if s > 1e-6 {
                v / s
            } else {
                0.0
            }
        })
        .collect();

    let grid = &sol_31.grid;
    let margin = 3.0 * delta;
    // Real time of the solver origin is T/2 = 0.5.
    let worst = |values: &[f64]| {
        let mut worst = 0.0f64;
        for (idx, x) in grid.nodes(0) {
            if (x[0] - l / 2.0).abs() <= margin {
                continue;
            }
            let r = porous_exact_grad(l, 0.5, x[0]).unwrap();
            worst = worst.max((values[idx.0] - r).abs());
        }
        worst
    };
    let err_31 = worst(&recon);
    let err_53 = worst(sol_53.slice(0).unwrap().wbar.as_ref().unwrap());
    let pass = err_53 <= 0.5 * err_31;
    verdict(
        "4 porous-gradient",
        pass,
        &format!(
            "reconstruction {err_31:.5}, differentiated {err_53:.5}, factor {:.2} (need >= 2)",
            err_31 / err_53
        ),
    );
    assert!(pass, "factor {}", err_31 / err_53);
}

/// Criterion 5: quantizer rate. In d = 1, p = 2 the product M * D2 varies
/// by less than 25% across M in {50, 100, 200}, and the M = 2 distortion
/// matches sqrt(1 - 2/pi) within 2%.
#[test]
fn criterion_5_quantizer_rate() {
    let sched = TrainingSchedule::default();
    let mut products = Vec::new();
    for m in [50usize, 100, 200] {
        let grid = quantizer::train(1, m, 7, &sched).unwrap();
        let d2 = grid.distortion(2.0, 400_000, 21);
        products.push(m as f64 * d2);
    }
    let lo = products.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = products.iter().cloned().fold(0.0, f64::max);
    let spread = (hi - lo) / lo;

    let g2 = quantizer::train(1, 2, 7, &sched).unwrap();
    let d2 = g2.distortion(2.0, 400_000, 22);
    let analytic = (1.0 - 2.0 / std::f64::consts::PI).sqrt();
    let m2_rel = (d2 - analytic).abs() / analytic;

    let pass = spread < 0.25 && m2_rel < 0.02;
    verdict(
        "5 quantizer-rate",
        pass,
        &format!(
            "M*D2 products {products:?} (spread {:.1}%), M=2 distortion {d2:.5} vs {analytic:.5} \
             ({:.2}% off)",
            100.0 * spread,
            100.0 * m2_rel
        ),
    );
    assert!(pass, "spread {spread}, m2_rel {m2_rel}");
}

/// Criterion 6: exactness suite. Constant preservation to 1e-12 at every
/// slice; bitwise equality of the two inductions when the gradient never
/// enters; exhaustive two-step Feynman-Kac enumeration to 1e-12; the jump
/// bound on every step of 1e4 simulated paths.
#[test]
fn criterion_6_exactness_suite() {
    let sched = TrainingSchedule {
        lloyd_samples: 100_000,
        clvq_samples: 200_000,
        weight_samples: 500_000,
        distortion_samples: 200_000,
        ..Default::default()
    };
    let quant = quantizer::train(1, 32, 3, &sched).unwrap();

    // (a) constant terminal, zero driver.
    let constant = Problem::builder(1)
        .diffusion(|_x, _y, out| out[0] = 1.0)
        .terminal(Terminal::new("const", |_| 2.5))
        .build();
    let config = SolverConfig {
        store_all_slices: true,
        ..SolverConfig::new(GridSpec::truncated(1, 0.05, 1.0, 2.0, 100, 1.0), Variant::Full31)
    };
    let sol = solve(&constant, &config, &quant).unwrap();
    let mut worst_const = 0.0f64;
    for k in 0..=100 {
        for &u in &sol.slice(k).unwrap().ubar {
            worst_const = worst_const.max((u - 2.5).abs());
        }
    }
    let pass_const = worst_const <= 1e-12 * 2.5;

    // (b) bitwise variant equality for z-independent coefficients.
    let mut coupled = make_burgers_coupled(0.15, Terminal::sine());
    coupled.period = Some(vec![1.0]);
    let spec = GridSpec::periodic(1, 0.005, 1.0, 40, 0.4);
    let mut cfg = SolverConfig::new(spec, Variant::Full31);
    cfg.store_all_slices = true;
    let a = solve(&coupled, &cfg, &quant).unwrap();
    cfg.variant = Variant::Simple3910;
    let b = solve(&coupled, &cfg, &quant).unwrap();
    let pass_bitwise = (0..=40).all(|k| {
        let (sa, sb) = (a.slice(k).unwrap(), b.slice(k).unwrap());
        sa.ubar == sb.ubar && sa.vbar == sb.vbar
    });

    // (c) N = 2, M = 2 exhaustive Feynman-Kac enumeration. The oracle
    // walks every quantized-outcome sequence with the public transition
    // machinery, independent of the backward recursion.
    let hand = QuantizerGrid::new(1, vec![-1.0, 1.0], vec![0.5, 0.5], 0.36).unwrap();
    let mut tiny = make_burgers_backward(0.5, Terminal::sine());
    tiny.period = Some(vec![1.0]);
    let cfg2 = SolverConfig {
        store_all_slices: true,
        ..SolverConfig::new(GridSpec::periodic(1, 0.05, 1.0, 2, 0.2), Variant::Full31)
    };
    let sol2 = solve(&tiny, &cfg2, &hand).unwrap();
    let grid = &sol2.grid;
    let h = grid.h();
    let x0 = vec![0.5];
    let mut expectation = 0.0;
    for (i0, i1) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        let mut weight = 1.0;
        let mut x = x0.clone();
        let mut driver_sum = 0.0;
        for (k, pick) in [(0usize, i0), (1usize, i1)] {
            weight *= hand.weight(pick);
            let g = h.sqrt() * hand.point(pick)[0];
            let node = grid.node_of(k, &x).unwrap();
            let next_idx = grid.project_step_index(k + 1, &x);
            let slice_next = sol2.slice(k + 1).unwrap();
            let u_next = slice_next.ubar[next_idx.0];
            let z = sol2.slice(k).unwrap().vbar.as_ref().unwrap()[node.0];
            let mut bb = [0.0];
            tiny.drift(&x, u_next, &[z], &mut bb);
            let mut sg = [0.0];
            tiny.diffusion(&x, u_next, &mut sg);
            driver_sum += h * tiny.driver(&x, u_next, &[z]);
            let target = [x[0] + h * bb[0] + sg[0] * g];
            x = grid.project_step(k + 1, &target);
        }
        let terminal = tiny.terminal_value(&x);
        expectation += weight * (terminal + driver_sum);
    }
    let y0 = sol2.slice(0).unwrap().ubar[grid.node_of(0, &x0).unwrap().0];
    let fk_gap = (expectation - y0).abs();
    let pass_fk = fk_gap <= 1e-12;

    // (d) jump bound over 1e4 simulated paths of the truncated benchmark.
    let bump_problem = make_burgers_coupled(0.15, Terminal::gaussian_bump());
    let spec = GridSpec::truncated(1, 3.0 / 500.0, 1.0, 3.0, 50, 1.0);
    let cfg3 = SolverConfig {
        store_all_slices: true,
        ..SolverConfig::new(spec, Variant::Full31)
    };
    let sol3 = solve(&bump_problem, &cfg3, quantizer_1d_160()).unwrap();
    let ens = sim::simulate(&sol3, &bump_problem, quantizer_1d_160(), &[0.0], 10_000, 123).unwrap();
    let pass_jump = ens.max_jump_excess <= 1e-12;

    let pass = pass_const && pass_bitwise && pass_fk && pass_jump;
    verdict(
        "6 exactness-suite",
        pass,
        &format!(
            "constant dev {worst_const:.2e}, bitwise {pass_bitwise}, FK enumeration gap \
             {fk_gap:.2e}, jump excess {:.2e} over 1e4 paths (exit fraction {:.4})",
            ens.max_jump_excess,
            ens.exit_fraction()
        ),
    );
    assert!(pass_const, "constant deviation {worst_const}");
    assert!(pass_bitwise, "variants diverged");
    assert!(pass_fk, "Feynman-Kac gap {fk_gap}");
    assert!(pass_jump, "jump excess {}", ens.max_jump_excess);
}

/// Criterion 6 companion: the truncated-run exit fraction stays below the
/// analytic truncation budget plus Monte Carlo slack.
#[test]
fn criterion_6b_exit_fraction_within_budget() {
    let problem = make_burgers_coupled(0.15, Terminal::gaussian_bump());
    let spec = GridSpec::truncated(1, 3.0 / 500.0, 1.0, 3.0, 50, 1.0);
    let cfg = SolverConfig {
        store_all_slices: true,
        ..SolverConfig::new(spec, Variant::Full31)
    };
    let sol = solve(&problem, &cfg, quantizer_1d_160()).unwrap();
    let n_paths = 10_000;
    let ens =
        sim::simulate(&sol, &problem, quantizer_1d_160(), &[0.0], n_paths, 123).unwrap();
    let p_exit = ens.exit_fraction();
    // The truncation budget R/(R+rho) bounds the exit probability from
    // above; allow three binomial standard errors on top.
    let budget = 1.0 / 4.0;
    let se = (budget * (1.0 - budget) / n_paths as f64).sqrt();
    let pass = p_exit <= budget + 3.0 * se;
    verdict(
        "6b exit-fraction",
        pass,
        &format!("empirical exit fraction {p_exit:.4} vs budget {budget} + 3 se"),
    );
    assert!(pass, "exit fraction {p_exit}");
}

/// Criterion 7: convergence trend. Periodic sine benchmark under the
/// gamma = 1/2 schedule at h in {0.04, 0.02, 0.01}: the measured sup
/// error decreases strictly and err(0.01) <= 0.6 err(0.04).
#[test]
fn criterion_7_convergence_trend() {
    let mut problem = make_burgers_coupled(0.15, Terminal::sine());
    problem.period = Some(vec![1.0]);
    let quad = Quadrature::gauss_hermite(500);
    let sine = Terminal::sine();
    let reference = move |x: &[f64]| burgers_exact(0.15, &sine, 0.0, x[0], 1.0, &quad).unwrap();
    let study = StudyConfig {
        horizon: 1.0,
        gamma: 0.5,
        p: 4.0,
        eta_extra: 0.25,
        radius: 1.0,
        quantizer_seed: 7,
        training: TrainingSchedule::default(),
        window: None,
        cache_dir: None,
    };
    let report = convergence_study(&problem, &study, &[0.04, 0.02, 0.01], &reference).unwrap();
    let errs: Vec<f64> = report.rows.iter().map(|r| r.sup_abs_err).collect();
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let ratio = errs[2] / errs[0];
    let pass = decreasing && ratio <= 0.6;
    verdict(
        "7 convergence-trend",
        pass,
        &format!(
            "sup errors {errs:?}, err(0.01)/err(0.04) = {ratio:.3} (need <= 0.6), slope {:?}",
            report.slope
        ),
    );
    assert!(pass, "errors {errs:?}");
}

/// Criterion 8: determinism. Re-rendering the benchmark runs under a
/// single-thread and a maximal thread pool produces bit-identical CSVs.
#[test]
#[cfg(feature = "parallel")]
fn criterion_8_thread_count_invariance() {
    let render = || -> Vec<String> {
        let mut outputs = Vec::new();
        // Criterion 1 solve.
        let quant = quantizer::train(1, 250, 7, &TrainingSchedule::default()).unwrap();
        let problem = make_burgers_coupled(0.15, Terminal::gaussian_bump());
        let spec = GridSpec::truncated(1, 3.0 / 500.0, 1.0, 3.0, 50, 1.0);
        let cfg = SolverConfig {
            store_all_slices: true,
            ..SolverConfig::new(spec, Variant::Full31)
        };
        let sol = solve(&problem, &cfg, &quant).unwrap();
        outputs.push(sol.slice_csv(0).unwrap());
        // Criterion 2 pure-backward solve.
        let mut backward = make_burgers_backward(0.15, Terminal::sine());
        backward.period = Some(vec![1.0]);
        let spec = GridSpec::periodic(1, 1e-3, 1.0, 100, 1.0);
        let sol_b =
            solve(&backward, &SolverConfig::new(spec, Variant::PureBackward), quantizer_1d_160())
                .unwrap();
        outputs.push(sol_b.slice_csv(0).unwrap());
        // Criterion 3 KPZ solve at a reduced mesh (same kernel, kept
        // quick because it runs four times across the two pools).
        let q2 = quantizer::train(2, 60, 7, &TrainingSchedule::default()).unwrap();
        let kpz = make_kpz_benchmark(0.3, 0.8).unwrap();
        let sol_k = solve(
            &kpz,
            &SolverConfig::new(GridSpec::periodic(2, 0.01, 1.0, 25, 0.5), Variant::Full31),
            &q2,
        )
        .unwrap();
        outputs.push(sol_k.slice_csv(0).unwrap());
        // Criterion 4 differentiated solve.
        let l = 2.0 * std::f64::consts::SQRT_2 * std::f64::consts::PI;
        let pair = porous_differentiated(l, 1.0);
        let sol_d = solve_differentiated(
            &pair,
            &SolverConfig::new(GridSpec::periodic(1, l / 500.0, l, 25, 0.5), Variant::Differentiated),
            quantizer_1d_160(),
        )
        .unwrap();
        outputs.push(sol_d.slice_csv(0).unwrap());
        // Path ensemble summary.
        let sol_sim = {
            let spec = GridSpec::periodic(1, 1e-3, 1.0, 100, 1.0);
            let mut coupled = make_burgers_coupled(0.15, Terminal::sine());
            coupled.period = Some(vec![1.0]);
            let cfg = SolverConfig {
                store_all_slices: true,
                ..SolverConfig::new(spec, Variant::Full31)
            };
            let sol = solve(&coupled, &cfg, quantizer_1d_160()).unwrap();
            let ens =
                sim::simulate(&sol, &coupled, quantizer_1d_160(), &[0.5], 2000, 11).unwrap();
            let fk = sim::feynman_kac_residual(&ens, &sol, &coupled);
            format!("{:?} {:?} {:?}", fk.mean, fk.std_error, ens.exit_fraction())
        };
        outputs.push(sol_sim);
        outputs
    };

    let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let many = rayon::ThreadPoolBuilder::new().build().unwrap();
    let a = single.install(render);
    let b = many.install(render);
    let c = many.install(render);
    let pass = a == b && b == c;
    verdict(
        "8 determinism",
        pass,
        &format!(
            "{} rendered outputs bit-identical across 1-thread and {}-thread pools",
            a.len(),
            many.current_num_threads()
        ),
    );
    assert!(pass);
}

/// Uniform boundedness along the sweep (discrete maximum-principle
/// analogue) for both periodic Burgers schemes.
#[test]
fn solution_fields_stay_uniformly_bounded() {
    let quant = quantizer_1d_160();
    let spec = GridSpec::periodic(1, 1e-3, 1.0, 100, 1.0);
    for (problem, variant) in [
        (make_burgers_coupled(0.15, Terminal::sine()), Variant::Full31),
        (make_burgers_backward(0.15, Terminal::sine()), Variant::PureBackward),
    ] {
        let mut problem = problem;
        problem.period = Some(vec![1.0]);
        let cfg = SolverConfig {
            store_all_slices: true,
            ..SolverConfig::new(spec.clone(), variant)
        };
        let sol = solve(&problem, &cfg, quant).unwrap();
        let mut sup = 0.0f64;
        for k in 0..=100 {
            for &u in &sol.slice(k).unwrap().ubar {
                sup = sup.max(u.abs());
            }
        }
        // max |H| = 1, driver contributes nothing at the true solution.
        assert!(sup <= 1.0 + 0.1, "{variant:?}: sup {sup}");
    }
}

/// Periodic shift equivariance: shifting the terminal data by one period
/// leaves every slice invariant node for node.
#[test]
fn periodic_shift_equivariance() {
    let quant = quantizer_1d_160();
    let spec = GridSpec::periodic(1, 0.01, 1.0, 20, 0.2);
    let mut base = make_burgers_coupled(0.15, Terminal::sine());
    base.period = Some(vec![1.0]);
    let shifted_terminal = Terminal::new("sin(2 pi (x+1))", |x: &[f64]| {
        (2.0 * std::f64::consts::PI * (x[0] + 1.0)).sin()
    })
    .with_gradient(|x, out| {
        out[0] = 2.0 * std::f64::consts::PI * (2.0 * std::f64::consts::PI * (x[0] + 1.0)).cos()
    });
    let mut shifted = make_burgers_coupled(0.15, shifted_terminal);
    shifted.period = Some(vec![1.0]);
    let cfg = SolverConfig {
        store_all_slices: true,
        ..SolverConfig::new(spec, Variant::Full31)
    };
    let a = solve(&base, &cfg, quant).unwrap();
    let b = solve(&shifted, &cfg, quant).unwrap();
    for k in 0..=20 {
        let (sa, sb) = (a.slice(k).unwrap(), b.slice(k).unwrap());
        for (u, v) in sa.ubar.iter().zip(&sb.ubar) {
            assert!((u - v).abs() < 1e-11, "k = {k}: {u} vs {v}");
        }
    }
}

/// The periodic Feynman-Kac residual is pure Monte Carlo noise: within
/// three standard errors of zero at 1e5 paths.
#[test]
fn feynman_kac_residual_is_mc_noise_periodic() {
    let quant = quantizer_1d_160();
    let mut problem = make_burgers_coupled(0.15, Terminal::sine());
    problem.period = Some(vec![1.0]);
    let cfg = SolverConfig {
        store_all_slices: true,
        ..SolverConfig::new(GridSpec::periodic(1, 1e-3, 1.0, 100, 1.0), Variant::Full31)
    };
    let sol = solve(&problem, &cfg, quant).unwrap();
    let ens = sim::simulate(&sol, &problem, quant, &[0.5], 100_000, 2024).unwrap();
    let fk = sim::feynman_kac_residual(&ens, &sol, &problem);
    assert!(
        fk.mean.abs() <= 3.0 * fk.std_error,
        "residual {} vs 3 se {}",
        fk.mean,
        3.0 * fk.std_error
    );
}

/// Path-space L2 errors against the Cole-Hopf reference shrink when the
/// discretization is refined under the schedule.
#[test]
fn path_l2_errors_decrease_under_refinement() {
    let quad = Quadrature::gauss_hermite(300);
    let sine = Terminal::sine();
    let results: Vec<f64> = [(25usize, 0.04f64, 84usize), (100, 0.01, 563)]
        .iter()
        .map(|&(n_steps, h, m)| {
            let delta = 1.0 / (1.0f64 / h.powf(1.5)).round();
            let quant = quantizer::train(1, m, 7, &TrainingSchedule::default()).unwrap();
            let mut problem = make_burgers_coupled(0.15, Terminal::sine());
            problem.period = Some(vec![1.0]);
            let cfg = SolverConfig {
                store_all_slices: true,
                ..SolverConfig::new(GridSpec::periodic(1, delta, 1.0, n_steps, 1.0), Variant::Full31)
            };
            let sol = solve(&problem, &cfg, &quant).unwrap();
            let ens = sim::simulate(&sol, &problem, &quant, &[0.5], 4000, 5).unwrap();
            let problem_ref = problem.clone();
            let quad_ref = &quad;
            let sine_ref = &sine;
            let ref_u = move |t: f64, x: &[f64]| {
                burgers_exact(0.15, sine_ref, t, x[0], 1.0, quad_ref).unwrap()
            };
            let ref_v = move |t: f64, x: &[f64]| {
                fbsde::reference::reference_gradient(
                    |t, x| burgers_exact(0.15, sine_ref, t, x[0], 1.0, quad_ref).unwrap(),
                    &problem_ref,
                    t,
                    x,
                    1e-4,
                )
            };
            let l2 = sim::l2_errors(&ens, &sol, &ref_u, &ref_v);
            l2.value_sup
        })
        .collect();
    assert!(
        results[1] < results[0],
        "value sup errors did not decrease: {results:?}"
    );
}
