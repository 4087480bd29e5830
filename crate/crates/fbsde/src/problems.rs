//! Problem definitions: the coefficient bundle (b, f, sigma, H) of the
//! forward-backward system together with validation metadata, plus the
//! built-in benchmark problems (Burgers, deterministic KPZ, porous media).
//!
//! Coefficients are time independent and must be pure: the solver calls
//! them concurrently from node-parallel loops. The drift writes a d-vector,
//! the diffusion a row-major d x d matrix, the driver returns a scalar. The
//! gradient argument `z` always stands for `grad_x u * sigma(x, u)`.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("sigma * sigma^T is not positive definite")]
    NotPositiveDefinite,
    #[error("invalid problem parameter: {0}")]
    InvalidParam(String),
}

type ScalarFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
type DriftFn = dyn Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync;
type DriverFn = dyn Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync;
type DiffusionFn = dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync;

/// Terminal condition H with optional analytic gradient and, for 1-D data,
/// optional antiderivative from 0 (used by the Cole-Hopf reference).
#[derive(Clone)]
pub struct Terminal {
    pub name: String,
    value: Arc<ScalarFn>,
    gradient: Option<Arc<GradFn>>,
    antiderivative: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl Terminal {
    pub fn new(name: impl Into<String>, value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Terminal {
            name: name.into(),
            value: Arc::new(value),
            gradient: None,
            antiderivative: None,
        }
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn with_antiderivative(mut self, a: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.antiderivative = Some(Arc::new(a));
        self
    }

    /// H(x) = sin(2 pi x) on the line, 1-periodic.
    pub fn sine() -> Self {
        Terminal::new("sin(2*pi*x)", |x: &[f64]| (2.0 * PI * x[0]).sin())
            .with_gradient(|x, out| out[0] = 2.0 * PI * (2.0 * PI * x[0]).cos())
            .with_antiderivative(|y| (1.0 - (2.0 * PI * y).cos()) / (2.0 * PI))
    }

    /// H(x) = exp(-x^2/2) on the line.
    pub fn gaussian_bump() -> Self {
        Terminal::new("exp(-x^2/2)", |x: &[f64]| (-x[0] * x[0] / 2.0).exp())
            .with_gradient(|x, out| out[0] = -x[0] * (-x[0] * x[0] / 2.0).exp())
            .with_antiderivative(|y| (PI / 2.0).sqrt() * libm::erf(y / std::f64::consts::SQRT_2))
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn has_gradient(&self) -> bool {
        self.gradient.is_some()
    }

    /// Analytic gradient when present, otherwise central differences with
    /// the given step.
    pub fn gradient(&self, x: &[f64], fd_step: f64, out: &mut [f64]) {
        match &self.gradient {
            Some(g) => g(x, out),
            None => {
                let mut xp = x.to_vec();
                for j in 0..x.len() {
                    xp[j] = x[j] + fd_step;
                    let up = (self.value)(&xp);
                    xp[j] = x[j] - fd_step;
                    let um = (self.value)(&xp);
                    xp[j] = x[j];
                    out[j] = (up - um) / (2.0 * fd_step);
                }
            }
        }
    }

    /// Antiderivative from 0 when a closed form is attached.
    pub fn antiderivative(&self, y: f64) -> Option<f64> {
        self.antiderivative.as_ref().map(|a| a(y))
    }
}

impl std::fmt::Debug for Terminal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Terminal").field("name", &self.name).finish()
    }
}

/// Declared Lipschitz constants and ellipticity lower bound. Metadata for
/// validation only; the solver never reads these.
#[derive(Debug, Clone, Default)]
pub struct DeclaredBounds {
    pub lipschitz_b: Option<f64>,
    pub lipschitz_f: Option<f64>,
    pub lipschitz_sigma: Option<f64>,
    /// Claimed lower bound on the eigenvalues of sigma * sigma^T.
    pub ellipticity: Option<f64>,
}

/// Coefficient bundle of the quasi-linear problem.
#[derive(Clone)]
pub struct Problem {
    pub name: String,
    pub dimension: usize,
    drift: Arc<DriftFn>,
    driver: Arc<DriverFn>,
    diffusion: Arc<DiffusionFn>,
    terminal: Terminal,
    pub drift_depends_on_z: bool,
    pub driver_depends_on_z: bool,
    /// Per-axis periods of the solution, when it is periodic.
    pub period: Option<Vec<f64>>,
    pub bounds: DeclaredBounds,
    /// Known deviations from the standing assumptions, for reporting.
    pub assumption_notes: Vec<String>,
}

impl std::fmt::Debug for Problem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Problem")
            .field("name", &self.name)
            .field("dimension", &self.dimension)
            .field("drift_depends_on_z", &self.drift_depends_on_z)
            .field("driver_depends_on_z", &self.driver_depends_on_z)
            .field("period", &self.period)
            .finish()
    }
}

impl Problem {
    pub fn builder(dimension: usize) -> ProblemBuilder {
        ProblemBuilder {
            name: "custom".into(),
            dimension,
            drift: None,
            driver: None,
            diffusion: None,
            terminal: None,
            drift_depends_on_z: false,
            driver_depends_on_z: false,
            period: None,
            bounds: DeclaredBounds::default(),
            assumption_notes: Vec::new(),
        }
    }

    #[inline]
    pub fn drift(&self, x: &[f64], y: f64, z: &[f64], out: &mut [f64]) {
        (self.drift)(x, y, z, out)
    }

    #[inline]
    pub fn driver(&self, x: &[f64], y: f64, z: &[f64]) -> f64 {
        (self.driver)(x, y, z)
    }

    /// Row-major d x d diffusion matrix.
    #[inline]
    pub fn diffusion(&self, x: &[f64], y: f64, out: &mut [f64]) {
        (self.diffusion)(x, y, out)
    }

    #[inline]
    pub fn terminal_value(&self, x: &[f64]) -> f64 {
        self.terminal.value(x)
    }

    /// Terminal gradient: analytic if attached, otherwise central finite
    /// differences with the given step (callers pass the mesh step).
    pub fn terminal_gradient(&self, x: &[f64], fd_step: f64, out: &mut [f64]) {
        self.terminal.gradient(x, fd_step, out)
    }

    pub fn terminal(&self) -> &Terminal {
        &self.terminal
    }
}

pub struct ProblemBuilder {
    name: String,
    dimension: usize,
    drift: Option<Arc<DriftFn>>,
    driver: Option<Arc<DriverFn>>,
    diffusion: Option<Arc<DiffusionFn>>,
    terminal: Option<Terminal>,
    drift_depends_on_z: bool,
    driver_depends_on_z: bool,
    period: Option<Vec<f64>>,
    bounds: DeclaredBounds,
    assumption_notes: Vec<String>,
}

impl ProblemBuilder {
    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn drift(
        mut self,
        depends_on_z: bool,
        f: impl Fn(&[f64], f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.drift = Some(Arc::new(f));
        self.drift_depends_on_z = depends_on_z;
        self
    }

    pub fn driver(
        mut self,
        depends_on_z: bool,
        f: impl Fn(&[f64], f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.driver = Some(Arc::new(f));
        self.driver_depends_on_z = depends_on_z;
        self
    }

    pub fn diffusion(mut self, f: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }

    pub fn terminal(mut self, t: Terminal) -> Self {
        self.terminal = Some(t);
        self
    }

    pub fn period(mut self, period: Vec<f64>) -> Self {
        self.period = Some(period);
        self
    }

    pub fn bounds(mut self, bounds: DeclaredBounds) -> Self {
        self.bounds = bounds;
        self
    }

    pub fn note(mut self, note: impl Into<String>) -> Self {
        self.assumption_notes.push(note.into());
        self
    }

    pub fn build(self) -> Problem {
        let d = self.dimension;
        Problem {
            name: self.name,
            dimension: d,
            drift: self
                .drift
                .unwrap_or_else(|| Arc::new(|_x: &[f64], _y, _z: &[f64], out: &mut [f64]| out.fill(0.0))),
            driver: self.driver.unwrap_or_else(|| Arc::new(|_, _, _| 0.0)),
            diffusion: self.diffusion.unwrap_or_else(|| {
                Arc::new(move |_x: &[f64], _y, out: &mut [f64]| {
                    out.fill(0.0);
                    for j in 0..d {
                        out[j * d + j] = 1.0;
                    }
                })
            }),
            terminal: self.terminal.unwrap_or_else(|| Terminal::new("zero", |_| 0.0)),
            drift_depends_on_z: self.drift_depends_on_z,
            driver_depends_on_z: self.driver_depends_on_z,
            period: self.period,
            bounds: self.bounds,
            assumption_notes: self.assumption_notes,
        }
    }
}

/// Burgers in coupled form: drift -y, constant diffusion epsilon, zero
/// driver. The nonlinearity sits entirely in the drift, so no gradient
/// predictor is needed.
pub fn make_burgers_coupled(epsilon: f64, terminal: Terminal) -> Problem {
    assert!(epsilon > 0.0);
    Problem::builder(1)
        .name(format!("burgers_coupled(eps={epsilon}, H={})", terminal.name))
        .drift(false, |_x, y, _z, out| out[0] = -y)
        .diffusion(move |_x, _y, out| out[0] = epsilon)
        .terminal(terminal)
        .bounds(DeclaredBounds {
            lipschitz_b: Some(1.0),
            lipschitz_f: Some(0.0),
            lipschitz_sigma: Some(0.0),
            ellipticity: Some(epsilon * epsilon),
        })
        .build()
}

/// Burgers in pure backward form: zero drift, constant diffusion epsilon,
/// driver -y z / epsilon. The product driver is not globally Lipschitz.
pub fn make_burgers_backward(epsilon: f64, terminal: Terminal) -> Problem {
    assert!(epsilon > 0.0);
    Problem::builder(1)
        .name(format!("burgers_backward(eps={epsilon}, H={})", terminal.name))
        .driver(true, move |_x, y, z| -y * z[0] / epsilon)
        .diffusion(move |_x, _y, out| out[0] = epsilon)
        .terminal(terminal)
        .bounds(DeclaredBounds {
            lipschitz_b: Some(0.0),
            // Unit-ball constant; the product driver grows quadratically.
            lipschitz_f: Some(1.0 / epsilon),
            lipschitz_sigma: Some(0.0),
            ellipticity: Some(epsilon * epsilon),
        })
        .note("driver f(y, z) = -y z / epsilon is only locally Lipschitz")
        .build()
}

/// Deterministic KPZ in dimension 2: zero drift, driver (nu/2)|z|^2,
/// constant diffusion matrix (row-major). Attaches the product-sine
/// terminal, 1-periodic per axis.
pub fn make_kpz(nu: f64, sigma: [f64; 4]) -> Result<Problem, ProblemError> {
    if !(nu > 0.0) {
        return Err(ProblemError::InvalidParam("nu must be positive".into()));
    }
    // sigma sigma^T of a real square matrix is PSD; definiteness fails
    // exactly when sigma is singular.
    let det = sigma[0] * sigma[3] - sigma[1] * sigma[2];
    if det.abs() < 1e-14 {
        return Err(ProblemError::NotPositiveDefinite);
    }
    let terminal = Terminal::new("prod sin(2*pi*x_i)", |x: &[f64]| {
        (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin()
    })
    .with_gradient(|x, out| {
        out[0] = 2.0 * PI * (2.0 * PI * x[0]).cos() * (2.0 * PI * x[1]).sin();
        out[1] = 2.0 * PI * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).cos();
    });
    Ok(Problem::builder(2)
        .name(format!("kpz2d(nu={nu})"))
        .driver(true, move |_x, _y, z| 0.5 * nu * (z[0] * z[0] + z[1] * z[1]))
        .diffusion(move |_x, _y, out| out.copy_from_slice(&sigma))
        .terminal(terminal)
        .period(vec![1.0, 1.0])
        .bounds(DeclaredBounds {
            lipschitz_b: Some(0.0),
            // Unit-ball constant; the quadratic driver exceeds it for |z| > 1.
            lipschitz_f: Some(nu),
            lipschitz_sigma: Some(0.0),
            ellipticity: Some(min_eigenvalue_2x2_aat(&sigma)),
        })
        .note("driver (nu/2)|z|^2 is only locally Lipschitz")
        .build())
}

/// The KPZ benchmark coefficients: sigma sigma^T = [[1, theta], [theta, 1]]
/// realized by the lower-triangular Cholesky factor.
pub fn make_kpz_benchmark(nu: f64, theta: f64) -> Result<Problem, ProblemError> {
    if !(theta.abs() < 1.0) {
        return Err(ProblemError::NotPositiveDefinite);
    }
    make_kpz(nu, [1.0, 0.0, theta, (1.0 - theta * theta).sqrt()])
}

/// Porous-media problem: sigma = sqrt(2 max(y, 0)), drift z / sigma (the
/// differentiated-coefficient reading, zero where sigma degenerates),
/// driver y^2, L-periodic terminal (4/(3T)) cos^2(pi x / L).
///
/// Violates the standing assumptions: sigma is degenerate at y = 0 and the
/// coefficients grow quadratically. The benchmark runs on [T/2, T].
pub fn make_porous_media(l: f64, t_terminal: f64) -> Problem {
    assert!(l > 0.0 && t_terminal > 0.0);
    let t = t_terminal;
    Problem::builder(1)
        .name(format!("porous_media(L={l}, T={t})"))
        .drift(true, |_x, y, z, out| {
            let s2 = 2.0 * y.max(0.0);
            out[0] = if s2 > 1e-12 { z[0] / s2.sqrt() } else { 0.0 };
        })
        .driver(false, |_x, y, _z| y * y)
        .diffusion(|_x, y, out| out[0] = (2.0 * y.max(0.0)).sqrt())
        .terminal(
            Terminal::new("(4/3T) cos^2(pi x / L)", move |x: &[f64]| {
                let c = (PI * x[0] / l).cos();
                4.0 / (3.0 * t) * c * c
            })
            .with_gradient(move |x, out| {
                let a = PI * x[0] / l;
                out[0] = -(8.0 * PI) / (3.0 * l * t) * a.cos() * a.sin();
            }),
        )
        .period(vec![l])
        .note("sigma(x, y) = sqrt(2 y+) degenerates at y = 0 (no uniform ellipticity)")
        .note("coefficients grow quadratically (not globally Lipschitz)")
        .build()
}

/// Built-in benchmark problems selectable by name.
#[derive(Debug, Clone, PartialEq)]
pub enum BuiltinProblem {
    BurgersCoupledPeriodic { epsilon: f64 },
    BurgersCoupledGaussian { epsilon: f64 },
    BurgersPureBackward { epsilon: f64 },
    Kpz2d { nu: f64, sigma: [f64; 4] },
    PorousMedia { l: f64, t_terminal: f64 },
}

impl BuiltinProblem {
    pub fn build(&self) -> Result<Problem, ProblemError> {
        Ok(match *self {
            BuiltinProblem::BurgersCoupledPeriodic { epsilon } => {
                let mut p = make_burgers_coupled(epsilon, Terminal::sine());
                p.period = Some(vec![1.0]);
                p
            }
            BuiltinProblem::BurgersCoupledGaussian { epsilon } => {
                make_burgers_coupled(epsilon, Terminal::gaussian_bump())
            }
            BuiltinProblem::BurgersPureBackward { epsilon } => {
                let mut p = make_burgers_backward(epsilon, Terminal::sine());
                p.period = Some(vec![1.0]);
                p
            }
            BuiltinProblem::Kpz2d { nu, sigma } => make_kpz(nu, sigma)?,
            BuiltinProblem::PorousMedia { l, t_terminal } => make_porous_media(l, t_terminal),
        })
    }
}

/// Sampling report on the standing assumptions: Lipschitz quotients per
/// variable block and the smallest sigma sigma^T eigenvalue seen.
#[derive(Debug, Clone)]
pub struct ValidationReport {
    pub findings: Vec<String>,
    pub min_ellipticity: f64,
    /// Largest difference quotients of b in the (x, y, z) blocks.
    pub max_quotient_b: [f64; 3],
    pub max_quotient_f: [f64; 3],
    /// Largest difference quotients of sigma in the (x, y) blocks.
    pub max_quotient_sigma: [f64; 2],
    pub non_finite_evaluations: usize,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Samples random (x, y, z) triples in [-10, 10] blocks, estimates
/// Lipschitz quotients and the minimal eigenvalue of sigma sigma^T, and
/// reports violations of the declared bounds. Report-only; never mutates.
pub fn validate(problem: &Problem, samples: usize, seed: u64) -> ValidationReport {
    let d = problem.dimension;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut report = ValidationReport {
        findings: Vec::new(),
        min_ellipticity: f64::INFINITY,
        max_quotient_b: [0.0; 3],
        max_quotient_f: [0.0; 3],
        max_quotient_sigma: [0.0; 2],
        non_finite_evaluations: 0,
    };
    let mut b1 = vec![0.0; d];
    let mut b2 = vec![0.0; d];
    let mut s1 = vec![0.0; d * d];
    let mut s2 = vec![0.0; d * d];
    let mut min_eig_state: Option<(f64, f64)> = None; // (eigenvalue, y at which seen)
    for _ in 0..samples {
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let y: f64 = rng.gen_range(-10.0..10.0);
        let z: Vec<f64> = (0..d).map(|_| rng.gen_range(-10.0..10.0)).collect();
        problem.drift(&x, y, &z, &mut b1);
        let f1 = problem.driver(&x, y, &z);
        problem.diffusion(&x, y, &mut s1);
        if b1.iter().any(|v| !v.is_finite())
            || !f1.is_finite()
            || s1.iter().any(|v| !v.is_finite())
        {
            report.non_finite_evaluations += 1;
            continue;
        }
        let eig = min_eigenvalue_aat(&s1, d);
        if min_eig_state.map_or(true, |(e, _)| eig < e) {
            min_eig_state = Some((eig, y));
        }

        // Perturb one block at a time and take difference quotients.
        for block in 0..3 {
            let (mut x2, mut y2, mut z2) = (x.clone(), y, z.clone());
            let mut norm2 = 0.0;
            match block {
                0 => {
                    for c in x2.iter_mut() {
                        let e = rng.gen_range(-1.0..1.0);
                        *c += e;
                        norm2 += e * e;
                    }
                }
                1 => {
                    let e: f64 = rng.gen_range(-1.0..1.0);
                    y2 += e;
                    norm2 = e * e;
                }
                _ => {
                    for c in z2.iter_mut() {
                        let e = rng.gen_range(-1.0..1.0);
                        *c += e;
                        norm2 += e * e;
                    }
                }
            }
            let dist = norm2.sqrt();
            if dist < 1e-9 {
                continue;
            }
            problem.drift(&x2, y2, &z2, &mut b2);
            let f2 = problem.driver(&x2, y2, &z2);
            let db: f64 = b1.iter().zip(&b2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            report.max_quotient_b[block] = report.max_quotient_b[block].max(db / dist);
            report.max_quotient_f[block] = report.max_quotient_f[block].max((f1 - f2).abs() / dist);
            if block < 2 {
                problem.diffusion(&x2, y2, &mut s2);
                let ds: f64 =
                    s1.iter().zip(&s2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                report.max_quotient_sigma[block] =
                    report.max_quotient_sigma[block].max(ds / dist);
            }
        }
    }
    if let Some((eig, y)) = min_eig_state {
        report.min_ellipticity = eig;
        if eig <= 1e-12 {
            report.findings.push(format!(
                "ellipticity: sigma sigma^T degenerates (min eigenvalue {eig:.3e} near y = {y:.3})"
            ));
        } else if let Some(lambda) = problem.bounds.ellipticity {
            if eig < lambda * (1.0 - 1e-9) {
                report.findings.push(format!(
                    "ellipticity: sampled eigenvalue {eig:.6e} below declared lambda = {lambda:.6e}"
                ));
            }
        }
    }
    if report.non_finite_evaluations > 0 {
        report.findings.push(format!(
            "{} coefficient evaluations were non-finite",
            report.non_finite_evaluations
        ));
    }
    let checks: [(&str, Option<f64>, f64); 3] = [
        ("b", problem.bounds.lipschitz_b, report.max_quotient_b.iter().cloned().fold(0.0, f64::max)),
        ("f", problem.bounds.lipschitz_f, report.max_quotient_f.iter().cloned().fold(0.0, f64::max)),
        (
            "sigma",
            problem.bounds.lipschitz_sigma,
            report.max_quotient_sigma.iter().cloned().fold(0.0, f64::max),
        ),
    ];
    for (name, declared, measured) in checks {
        if let Some(declared) = declared {
            if measured > declared + 1e-9 {
                report.findings.push(format!(
                    "lipschitz: quotient of {name} reached {measured:.4} > declared {declared:.4}"
                ));
            }
        }
    }
    report
}

/// Smallest eigenvalue of sigma sigma^T; closed forms for d in {1, 2},
/// cyclic Jacobi sweeps otherwise.
fn min_eigenvalue_aat(sigma: &[f64], d: usize) -> f64 {
    match d {
        1 => sigma[0] * sigma[0],
        2 => min_eigenvalue_2x2_aat(&[sigma[0], sigma[1], sigma[2], sigma[3]]),
        _ => {
            let mut a = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..d {
                    let mut s = 0.0;
                    for k in 0..d {
                        s += sigma[i * d + k] * sigma[j * d + k];
                    }
                    a[i * d + j] = s;
                }
            }
            jacobi_min_eigenvalue(&mut a, d)
        }
    }
}

fn min_eigenvalue_2x2_aat(sigma: &[f64; 4]) -> f64 {
    let a11 = sigma[0] * sigma[0] + sigma[1] * sigma[1];
    let a12 = sigma[0] * sigma[2] + sigma[1] * sigma[3];
    let a22 = sigma[2] * sigma[2] + sigma[3] * sigma[3];
    let tr = a11 + a22;
    let disc = ((a11 - a22) * (a11 - a22) + 4.0 * a12 * a12).sqrt();
    0.5 * (tr - disc)
}

fn jacobi_min_eigenvalue(a: &mut [f64], d: usize) -> f64 {
    for _ in 0..50 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i * d + j].abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p * d + q].abs() < 1e-300 {
                    continue;
                }
                let theta = 0.5 * (a[q * d + q] - a[p * d + p]) / a[p * d + q];
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i * d + i]).fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn burgers_coupled_coefficients() {
        let p = make_burgers_coupled(0.15, Terminal::sine());
        let mut b = [0.0];
        // Drift is -y independently of z.
        p.drift(&[0.3], 2.0, &[99.0], &mut b);
        assert_eq!(b[0], -2.0);
        p.drift(&[0.3], 2.0, &[-5.0], &mut b);
        assert_eq!(b[0], -2.0);
        assert!(!p.drift_depends_on_z);
        let mut s = [0.0];
        p.diffusion(&[0.0], 1.0, &mut s);
        assert_eq!(s[0], 0.15);
        assert_eq!(p.driver(&[0.0], 1.0, &[1.0]), 0.0);
    }

    #[test]
    fn burgers_backward_driver() {
        let p = make_burgers_backward(1.0, Terminal::sine());
        assert_eq!(p.driver(&[0.0], 2.0, &[3.0]), -6.0);
        let mut b = [1.0];
        p.drift(&[0.0], 2.0, &[3.0], &mut b);
        assert_eq!(b[0], 0.0);
        assert!(p.driver_depends_on_z);
    }

    #[test]
    fn kpz_driver_is_even_and_vanishes_at_zero() {
        let p = make_kpz_benchmark(0.3, 0.8).unwrap();
        assert_eq!(p.driver(&[0.1, 0.2], 0.5, &[0.0, 0.0]), 0.0);
        let z = [0.7, -1.3];
        let zn = [-0.7, 1.3];
        assert_eq!(p.driver(&[0.0; 2], 0.0, &z), p.driver(&[0.0; 2], 0.0, &zn));
        // sigma sigma^T = [[1, theta], [theta, 1]].
        let mut s = [0.0; 4];
        p.diffusion(&[0.0; 2], 0.0, &mut s);
        let aat = [
            s[0] * s[0] + s[1] * s[1],
            s[0] * s[2] + s[1] * s[3],
            s[2] * s[2] + s[3] * s[3],
        ];
        assert!((aat[0] - 1.0).abs() < 1e-15);
        assert!((aat[1] - 0.8).abs() < 1e-15);
        assert!((aat[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn kpz_rejects_singular_sigma() {
        assert!(make_kpz(0.3, [1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(make_kpz_benchmark(0.3, 1.0).is_err());
    }

    #[test]
    fn porous_media_terminal_and_clamp() {
        let l = 2.0 * std::f64::consts::SQRT_2 * PI;
        let p = make_porous_media(l, 1.0);
        assert!((p.terminal_value(&[0.0]) - 4.0 / 3.0).abs() < 1e-15);
        assert!(p.terminal_value(&[l / 2.0]).abs() < 1e-15);
        let mut s = [9.0];
        p.diffusion(&[0.0], -0.5, &mut s);
        assert_eq!(s[0], 0.0);
        let mut g = [0.0];
        p.terminal_gradient(&[0.0], 1e-3, &mut g);
        assert!(g[0].abs() < 1e-15);
    }

    #[test]
    fn validation_flags_the_expected_problems() {
        let ok = validate(&make_burgers_coupled(0.15, Terminal::sine()), 2000, 7);
        assert!(ok.passed(), "{:?}", ok.findings);

        let porous = validate(&make_porous_media(2.0 * std::f64::consts::SQRT_2 * PI, 1.0), 2000, 7);
        assert!(
            porous.findings.iter().any(|f| f.contains("ellipticity")),
            "{:?}",
            porous.findings
        );

        let kpz = validate(&make_kpz_benchmark(0.3, 0.8).unwrap(), 2000, 7);
        assert!(
            kpz.findings.iter().any(|f| f.contains("lipschitz") && f.contains('f')),
            "{:?}",
            kpz.findings
        );
    }

    #[test]
    fn builtin_coefficients_stay_finite_on_the_sample_box() {
        let l = 2.0 * std::f64::consts::SQRT_2 * PI;
        let builtins = [
            BuiltinProblem::BurgersCoupledPeriodic { epsilon: 0.15 },
            BuiltinProblem::BurgersCoupledGaussian { epsilon: 0.15 },
            BuiltinProblem::BurgersPureBackward { epsilon: 0.15 },
            BuiltinProblem::Kpz2d { nu: 0.3, sigma: [1.0, 0.0, 0.8, 0.6] },
            BuiltinProblem::PorousMedia { l, t_terminal: 1.0 },
        ];
        for b in builtins {
            let p = b.build().unwrap();
            let report = validate(&p, 10_000, 3);
            assert_eq!(report.non_finite_evaluations, 0, "{:?}", b);
        }
    }

    #[test]
    fn finite_difference_terminal_gradient_fallback() {
        let p = Problem::builder(1)
            .terminal(Terminal::new("x^3", |x: &[f64]| x[0].powi(3)))
            .build();
        let mut g = [0.0];
        p.terminal_gradient(&[2.0], 1e-5, &mut g);
        assert!((g[0] - 12.0).abs() < 1e-6);
    }
}
