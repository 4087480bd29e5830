//! Backward dynamic-programming engines.
//!
//! All variants sweep k = N-1 down to 0 and update the solution field
//! `ubar` and the gradient field `vbar` on the slice-k nodes from the
//! already-solved slice k+1. Expectations over the Brownian increment are
//! finite sums over the quantizer points; the forward transition is
//! `x + b h + sigma g` with `g = sqrt(h) y_i`, projected back onto the
//! slice-(k+1) grid.
//!
//! Within one time step node updates are independent: they read only the
//! frozen slice k+1 (and the completed predictor slice), and write
//! disjoint entries of slice k. Each step runs as two node-parallel passes
//! (predictor, then gradient and value); the time loop is sequential.
//! Output is a pure function of (problem, config, quantizer), independent
//! of the worker count.

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

use crate::exec;
use crate::grid::{GridError, GridSpec, SpatialGrid};
use crate::problems::Problem;
use crate::quantizer::QuantizerGrid;

/// Hard cap on the spatial dimension of the node-parallel kernels; keeps
/// per-node scratch on the stack.
const MAX_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("dimension mismatch: problem d = {problem}, grid d = {grid}, quantizer d = {quantizer}")]
    DimensionMismatch { problem: usize, grid: usize, quantizer: usize },
    #[error("dimension {0} exceeds the kernel limit {MAX_DIM}")]
    DimensionTooLarge(usize),
    #[error("variant mismatch: {0}")]
    VariantMismatch(String),
    #[error("linear interpolation requires dimension 1 (got {0})")]
    InterpolationUnsupported(usize),
    #[error("non-finite value at step {k}, node {node} (x = {coords:?})")]
    NonFinite { k: usize, node: usize, coords: Vec<f64> },
    #[error("slice {0} was not stored; solve with store_all_slices")]
    MissingSlice(usize),
}

/// Scheme variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Predictor scheme: intermediate gradient predictor vhat feeds the
    /// drift, the driver consumes the freshly updated vbar.
    Full31,
    /// Simpler induction: drift and driver both read the slice-(k+1)
    /// gradient. Convergence is not covered by the analysis; kept as a
    /// documented experimental variant.
    Simple3910,
    /// Zero-drift form for semi-linear problems; the driver consumes the
    /// freshly updated vbar.
    PureBackward,
    /// Two-field scheme solving the problem jointly with its formally
    /// differentiated companion.
    Differentiated,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full31 => "full31",
            Variant::Simple3910 => "simple3910",
            Variant::PureBackward => "pure_backward",
            Variant::Differentiated => "differentiated",
        }
    }
}

/// Extension of the solution fields off the grid nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Interpolation {
    /// Nearest-node projection (the analyzed scheme).
    #[default]
    Nearest,
    /// Piecewise-linear lookup between nodes; dimension 1 only.
    Linear1d,
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub grid: GridSpec,
    pub variant: Variant,
    /// Keep every time slice (required for path simulation). When false
    /// only slices 0 and N plus `retain_slices` are kept.
    pub store_all_slices: bool,
    /// Extra slice indices to keep when not storing everything.
    pub retain_slices: Vec<usize>,
    pub interpolation: Interpolation,
}

impl SolverConfig {
    pub fn new(grid: GridSpec, variant: Variant) -> Self {
        SolverConfig {
            grid,
            variant,
            store_all_slices: false,
            retain_slices: Vec::new(),
            interpolation: Interpolation::Nearest,
        }
    }

    fn keeps(&self, k: usize) -> bool {
        self.store_all_slices
            || k == 0
            || k == self.grid.n_steps
            || self.retain_slices.contains(&k)
    }
}

/// Fields of one solved time slice, node-indexed in flat grid order.
#[derive(Debug, Clone)]
pub struct SolvedSlice {
    pub k: usize,
    pub t: f64,
    pub ubar: Vec<f64>,
    /// Gradient field, d entries per node; absent for the differentiated
    /// variant which solves the derivative as its own field.
    pub vbar: Option<Vec<f64>>,
    /// Predictor field, stored only for the predictor variant on problems
    /// with gradient-dependent drift.
    pub vhat: Option<Vec<f64>>,
    /// Second field of the differentiated variant.
    pub wbar: Option<Vec<f64>>,
}

/// Output of a solve: retained slices plus run counters.
#[derive(Debug, Clone)]
pub struct Solution {
    pub variant: Variant,
    pub grid: SpatialGrid,
    pub problem_name: String,
    pub quantizer_points: usize,
    slices: BTreeMap<usize, SolvedSlice>,
    pub store_all_slices: bool,
    /// Total number of weighted expectation terms evaluated.
    pub expectation_terms: u64,
    /// Nodes at which the field went negative under the square root
    /// (differentiated variant only).
    pub clamp_events: u64,
    pub wall_seconds: f64,
}

impl Solution {
    pub fn slice(&self, k: usize) -> Option<&SolvedSlice> {
        self.slices.get(&k)
    }

    pub fn require_slice(&self, k: usize) -> Result<&SolvedSlice, SolveError> {
        self.slices.get(&k).ok_or(SolveError::MissingSlice(k))
    }

    pub fn stored_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.slices.keys().copied()
    }

    pub fn h(&self) -> f64 {
        self.grid.h()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// Renders one slice as CSV with 17-significant-digit fields:
    /// `k, t_k, node_index, x_1..x_d, ubar[, vbar_*][, vhat_*][, wbar]`.
    pub fn slice_csv(&self, k: usize) -> Result<String, SolveError> {
        let slice = self.require_slice(k)?;
        let d = self.grid.dimension();
        let geom = self.grid.geometry(k);
        let mut out = String::new();
        out.push_str("k,t_k,node_index");
        for j in 1..=d {
            out.push_str(&format!(",x_{j}"));
        }
        out.push_str(",ubar");
        if slice.vbar.is_some() {
            for j in 1..=d {
                out.push_str(&format!(",vbar_{j}"));
            }
        }
        if slice.vhat.is_some() {
            for j in 1..=d {
                out.push_str(&format!(",vhat_{j}"));
            }
        }
        if slice.wbar.is_some() {
            out.push_str(",wbar");
        }
        out.push('\n');
        let mut coords = vec![0.0; d];
        for node in 0..geom.node_count() {
            geom.coords_of_flat(node, &mut coords);
            out.push_str(&format!("{},{},{}", k, crate::fmt_f64(slice.t), node));
            for c in &coords {
                out.push(',');
                out.push_str(&crate::fmt_f64(*c));
            }
            out.push(',');
            out.push_str(&crate::fmt_f64(slice.ubar[node]));
            if let Some(vbar) = &slice.vbar {
                for j in 0..d {
                    out.push(',');
                    out.push_str(&crate::fmt_f64(vbar[node * d + j]));
                }
            }
            if let Some(vhat) = &slice.vhat {
                for j in 0..d {
                    out.push(',');
                    out.push_str(&crate::fmt_f64(vhat[node * d + j]));
                }
            }
            if let Some(wbar) = &slice.wbar {
                out.push(',');
                out.push_str(&crate::fmt_f64(wbar[node]));
            }
            out.push('\n');
        }
        Ok(out)
    }
}

/// Weighted expectation of a node field over the quantizer points:
/// `sum_i p_i field(Pi_{k_next}(x + drift h + diffusion sqrt(h) y_i))`.
/// With a weight function the summand gains the factor `weight(g_i)`
/// evaluated at the scaled increment `g_i = sqrt(h) y_i`.
#[allow(clippy::too_many_arguments)]
pub fn expect_over_quantizer(
    grid: &SpatialGrid,
    quantizer: &QuantizerGrid,
    k_next: usize,
    field: &[f64],
    x: &[f64],
    drift_part: &[f64],
    diff_part: &[f64],
    weight_fn: Option<&dyn Fn(&[f64]) -> f64>,
) -> f64 {
    let d = grid.dimension();
    let h = grid.h();
    let rh = h.sqrt();
    let geom = grid.geometry(k_next);
    let mut target = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut acc = 0.0;
    for i in 0..quantizer.len() {
        let y = quantizer.point(i);
        for j in 0..d {
            g[j] = rh * y[j];
        }
        for j in 0..d {
            let mut t = x[j] + h * drift_part[j];
            for l in 0..d {
                t += diff_part[j * d + l] * g[l];
            }
            target[j] = t;
        }
        let node = geom.locate(&target);
        debug_assert!(node < field.len());
        let mut term = quantizer.weight(i) * field[node];
        if let Some(w) = weight_fn {
            term *= w(&g);
        }
        acc += term;
    }
    acc
}

/// Entry point for the single-field variants; dispatches on the config.
pub fn solve(
    problem: &Problem,
    config: &SolverConfig,
    quantizer: &QuantizerGrid,
) -> Result<Solution, SolveError> {
    match config.variant {
        Variant::Full31 | Variant::Simple3910 => solve_single_field(problem, config, quantizer),
        Variant::PureBackward => solve_pure_backward(problem, config, quantizer),
        Variant::Differentiated => Err(SolveError::VariantMismatch(
            "the differentiated variant solves a DifferentiatedProblem; call solve_differentiated"
                .into(),
        )),
    }
}

/// Zero-drift form: validates the drift really vanishes, then runs the
/// shared sweep (the update then reads
/// `ubar_k = E[ubar_{k+1}(Pi(x + sigma g))] + h f(x, ubar_{k+1}(x), vbar_k(x))`).
pub fn solve_pure_backward(
    problem: &Problem,
    config: &SolverConfig,
    quantizer: &QuantizerGrid,
) -> Result<Solution, SolveError> {
    let d = problem.dimension;
    let mut b = vec![0.0; d];
    for probe in 0..8 {
        let x: Vec<f64> = (0..d).map(|j| (probe * d + j) as f64 * 0.37 - 1.1).collect();
        let y = probe as f64 * 0.21 - 0.8;
        let z: Vec<f64> = (0..d).map(|j| (probe + j) as f64 * 0.11 - 0.4).collect();
        problem.drift(&x, y, &z, &mut b);
        if b.iter().any(|v| *v != 0.0) {
            return Err(SolveError::VariantMismatch(format!(
                "pure-backward variant requires a zero drift; b({x:?}, {y}, {z:?}) = {b:?}"
            )));
        }
    }
    solve_single_field(problem, config, quantizer)
}

/// Where the z slot of a coefficient is read from.
#[derive(Clone, Copy, PartialEq)]
enum ZSource {
    /// Predictor slice vhat(t_k, x).
    Predictor,
    /// Previous slice vbar(t_{k+1}, x).
    NextSlice,
    /// Freshly updated vbar(t_k, x) (driver only).
    Fresh,
}

fn solve_single_field(
    problem: &Problem,
    config: &SolverConfig,
    quantizer: &QuantizerGrid,
) -> Result<Solution, SolveError> {
    let start = Instant::now();
    let grid = SpatialGrid::new(config.grid.clone())?;
    let d = problem.dimension;
    if d != grid.dimension() || d != quantizer.dimension() {
        return Err(SolveError::DimensionMismatch {
            problem: d,
            grid: grid.dimension(),
            quantizer: quantizer.dimension(),
        });
    }
    if d > MAX_DIM {
        return Err(SolveError::DimensionTooLarge(d));
    }
    if config.interpolation == Interpolation::Linear1d && d != 1 {
        return Err(SolveError::InterpolationUnsupported(d));
    }
    let n_steps = grid.n_steps();
    let h = grid.h();
    let rh = h.sqrt();
    let m = quantizer.len();
    let delta = grid.delta();
    // Pre-scaled increments g_i = sqrt(h) y_i.
    let scaled: Vec<f64> = quantizer.points_flat().iter().map(|y| rh * y).collect();
    let weights = quantizer.weights();

    let use_predictor = config.variant == Variant::Full31 && problem.drift_depends_on_z;
    let (drift_z, driver_z) = match config.variant {
        Variant::Full31 | Variant::PureBackward => (
            if use_predictor { ZSource::Predictor } else { ZSource::NextSlice },
            ZSource::Fresh,
        ),
        Variant::Simple3910 => (ZSource::NextSlice, ZSource::NextSlice),
        Variant::Differentiated => unreachable!(),
    };
    let linear = config.interpolation == Interpolation::Linear1d;

    let mut solution = Solution {
        variant: config.variant,
        grid: grid.clone(),
        problem_name: problem.name.clone(),
        quantizer_points: m,
        slices: BTreeMap::new(),
        store_all_slices: config.store_all_slices,
        expectation_terms: 0,
        clamp_events: 0,
        wall_seconds: 0.0,
    };

    // Terminal slice: ubar = H, vbar = grad H * sigma(x, H(x)).
    let geom_n = grid.geometry(n_steps);
    let count_n = geom_n.node_count();
    let mut ubar_next = vec![0.0; count_n];
    let mut vbar_next = vec![0.0; count_n * d];
    exec::fill_indexed(&mut ubar_next, |node| {
        let mut x = [0.0; MAX_DIM];
        geom_n.coords_of_flat(node, &mut x[..d]);
        problem.terminal_value(&x[..d])
    });
    exec::fill_rows(&mut vbar_next, d, |node, row| {
        let mut x = [0.0; MAX_DIM];
        let mut gh = [0.0; MAX_DIM];
        let mut sg = [0.0; MAX_DIM * MAX_DIM];
        geom_n.coords_of_flat(node, &mut x[..d]);
        let hval = problem.terminal_value(&x[..d]);
        problem.terminal_gradient(&x[..d], delta, &mut gh[..d]);
        problem.diffusion(&x[..d], hval, &mut sg[..d * d]);
        for j in 0..d {
            let mut acc = 0.0;
            for i in 0..d {
                acc += gh[i] * sg[i * d + j];
            }
            row[j] = acc;
        }
    });
    check_finite(n_steps, geom_n, &ubar_next)?;
    check_finite(n_steps, geom_n, &vbar_next)?;
    if config.keeps(n_steps) {
        solution.slices.insert(
            n_steps,
            SolvedSlice {
                k: n_steps,
                t: grid.spec().horizon,
                ubar: ubar_next.clone(),
                vbar: Some(vbar_next.clone()),
                vhat: None,
                wbar: None,
            },
        );
    }

    for k in (0..n_steps).rev() {
        let geom_k = grid.geometry(k);
        let geom_next = grid.geometry(k + 1);
        let count_k = geom_k.node_count();
        // Flat index of a slice-k node inside slice k+1 (the grids are
        // nested). Identity except at the initial truncated slice.
        let lift: Option<Vec<usize>> = if geom_k == geom_next {
            None
        } else {
            let mut map = vec![0usize; count_k];
            let mut lat = vec![0i64; d];
            for (node, slot) in map.iter_mut().enumerate() {
                geom_k.lattice_of_flat(node, &mut lat);
                *slot = geom_next
                    .flat_of_lattice(&lat)
                    .expect("slice-k nodes are contained in slice k+1");
            }
            Some(map)
        };
        let lift_ref = lift.as_deref();
        let at_next = |node: usize| lift_ref.map_or(node, |map| map[node]);

        let ubar_ref = &ubar_next;
        let vbar_ref = &vbar_next;

        // Field lookup at a raw target point: nearest-node projection or
        // 1-D linear interpolation.
        let lookup_u = |target: &[f64]| -> f64 {
            if linear {
                grid.interp1d(k + 1, ubar_ref, target[0]).expect("d = 1 checked")
            } else {
                ubar_ref[geom_next.locate(target)]
            }
        };

        // Pass A: predictor vhat(t_k, x) = E[vbar(t_{k+1}, Pi(x + sigma g))].
        let vhat_slice: Option<Vec<f64>> = if use_predictor {
            let mut vhat = vec![0.0; count_k * d];
            exec::fill_rows(&mut vhat, d, |node, row| {
                let mut x = [0.0; MAX_DIM];
                let mut sg = [0.0; MAX_DIM * MAX_DIM];
                let mut target = [0.0; MAX_DIM];
                geom_k.coords_of_flat(node, &mut x[..d]);
                let y_next = ubar_ref[at_next(node)];
                problem.diffusion(&x[..d], y_next, &mut sg[..d * d]);
                row.fill(0.0);
                for i in 0..m {
                    let g = &scaled[i * d..(i + 1) * d];
                    for j in 0..d {
                        let mut t = x[j];
                        for l in 0..d {
                            t += sg[j * d + l] * g[l];
                        }
                        target[j] = t;
                    }
                    let p = weights[i];
                    if linear {
                        let v = grid.interp1d(k + 1, vbar_ref, target[0]).expect("d = 1");
                        row[0] += p * v;
                    } else {
                        let tgt = geom_next.locate(&target[..d]);
                        for j in 0..d {
                            row[j] += p * vbar_ref[tgt * d + j];
                        }
                    }
                }
            });
            check_finite(k, geom_k, &vhat)?;
            Some(vhat)
        } else {
            None
        };
        let vhat_ref = vhat_slice.as_deref();

        // Pass B: vbar then ubar, interleaved rows [u, v_1..v_d].
        let mut rows = vec![0.0; count_k * (1 + d)];
        exec::fill_rows(&mut rows, 1 + d, |node, row| {
            let mut x = [0.0; MAX_DIM];
            let mut sg = [0.0; MAX_DIM * MAX_DIM];
            let mut bb = [0.0; MAX_DIM];
            let mut target = [0.0; MAX_DIM];
            geom_k.coords_of_flat(node, &mut x[..d]);
            let next = at_next(node);
            let y_next = ubar_ref[next];
            problem.diffusion(&x[..d], y_next, &mut sg[..d * d]);
            let z_drift: &[f64] = match drift_z {
                ZSource::Predictor => &vhat_ref.unwrap()[node * d..(node + 1) * d],
                _ => &vbar_ref[next * d..(next + 1) * d],
            };
            problem.drift(&x[..d], y_next, z_drift, &mut bb[..d]);
            // Expectation sums: compensated for the value field so that
            // constants survive long sweeps at 1e-12.
            let mut acc_u = 0.0;
            let mut comp_u = 0.0;
            let mut acc_v = [0.0; MAX_DIM];
            for i in 0..m {
                let g = &scaled[i * d..(i + 1) * d];
                for j in 0..d {
                    let mut t = x[j] + h * bb[j];
                    for l in 0..d {
                        t += sg[j * d + l] * g[l];
                    }
                    target[j] = t;
                }
                let u = lookup_u(&target[..d]);
                let term = weights[i] * u;
                let s = acc_u + term;
                comp_u += if acc_u.abs() >= term.abs() {
                    (acc_u - s) + term
                } else {
                    (term - s) + acc_u
                };
                acc_u = s;
                for j in 0..d {
                    acc_v[j] += term * g[j];
                }
            }
            acc_u += comp_u;
            for j in 0..d {
                row[1 + j] = acc_v[j] / h;
            }
            let z_driver: &[f64] = match driver_z {
                ZSource::Fresh => &row[1..1 + d],
                _ => &vbar_ref[next * d..(next + 1) * d],
            };
            row[0] = acc_u + h * problem.driver(&x[..d], y_next, z_driver);
        });
        solution.expectation_terms += (count_k * m) as u64;

        let mut ubar_k = vec![0.0; count_k];
        let mut vbar_k = vec![0.0; count_k * d];
        for node in 0..count_k {
            ubar_k[node] = rows[node * (1 + d)];
            vbar_k[node * d..(node + 1) * d]
                .copy_from_slice(&rows[node * (1 + d) + 1..(node + 1) * (1 + d)]);
        }
        check_finite(k, geom_k, &ubar_k)?;
        check_finite(k, geom_k, &vbar_k)?;

        if config.keeps(k) {
            solution.slices.insert(
                k,
                SolvedSlice {
                    k,
                    t: k as f64 * h,
                    ubar: ubar_k.clone(),
                    vbar: Some(vbar_k.clone()),
                    vhat: vhat_slice.clone(),
                    wbar: None,
                },
            );
        }
        ubar_next = ubar_k;
        vbar_next = vbar_k;
    }

    solution.wall_seconds = start.elapsed().as_secs_f64();
    Ok(solution)
}

/// A problem together with its formally differentiated companion: the pair
/// (u, w = du/dx) solved jointly on one periodic 1-D grid. Drifts and
/// drivers are functions of the two field values; the diffusion is shared.
#[derive(Clone)]
pub struct DifferentiatedProblem {
    pub name: String,
    terminal_u: std::sync::Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    terminal_w: std::sync::Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    drift_u: std::sync::Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    drift_w: std::sync::Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    driver_u: std::sync::Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    driver_w: std::sync::Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
    /// Shared diffusion; the clamp flag reports a negative value under the
    /// square root.
    diffusion: std::sync::Arc<dyn Fn(f64, f64) -> (f64, bool) + Send + Sync>,
    pub period: f64,
}

impl std::fmt::Debug for DifferentiatedProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DifferentiatedProblem")
            .field("name", &self.name)
            .field("period", &self.period)
            .finish()
    }
}

/// The porous-media pair: terminal `(4/(3T)) cos^2(pi x / L)` and its
/// derivative, transitions `x + w h + sqrt(2 u+) g` for the value field and
/// `x + 3 w h + sqrt(2 u+) g` for the derivative field, drivers `u^2` and
/// `2 u w`.
pub fn porous_differentiated(l: f64, t_terminal: f64) -> DifferentiatedProblem {
    use std::f64::consts::PI;
    let t = t_terminal;
    DifferentiatedProblem {
        name: format!("porous_differentiated(L={l}, T={t})"),
        terminal_u: std::sync::Arc::new(move |x| {
            let c = (PI * x / l).cos();
            4.0 / (3.0 * t) * c * c
        }),
        terminal_w: std::sync::Arc::new(move |x| {
            let a = PI * x / l;
            -(8.0 * PI) / (3.0 * l * t) * a.cos() * a.sin()
        }),
        drift_u: std::sync::Arc::new(|_u, w| w),
        drift_w: std::sync::Arc::new(|_u, w| 3.0 * w),
        driver_u: std::sync::Arc::new(|u, _w| u * u),
        driver_w: std::sync::Arc::new(|u, w| 2.0 * u * w),
        diffusion: std::sync::Arc::new(|u, _w| ((2.0 * u.max(0.0)).sqrt(), u < 0.0)),
        period: l,
    }
}

/// Two-field backward sweep of the differentiated scheme. Requires a 1-D
/// periodic grid whose period matches the problem.
pub fn solve_differentiated(
    pair: &DifferentiatedProblem,
    config: &SolverConfig,
    quantizer: &QuantizerGrid,
) -> Result<Solution, SolveError> {
    let start = Instant::now();
    let grid = SpatialGrid::new(config.grid.clone())?;
    if grid.dimension() != 1 || quantizer.dimension() != 1 {
        return Err(SolveError::VariantMismatch(
            "the differentiated scheme is implemented for 1-D problems".into(),
        ));
    }
    if !grid.is_periodic() {
        return Err(SolveError::VariantMismatch(
            "the differentiated scheme expects a periodic grid".into(),
        ));
    }
    let n_steps = grid.n_steps();
    let h = grid.h();
    let rh = h.sqrt();
    let m = quantizer.len();
    let scaled: Vec<f64> = quantizer.points_flat().iter().map(|y| rh * y).collect();
    let weights = quantizer.weights();

    let mut solution = Solution {
        variant: Variant::Differentiated,
        grid: grid.clone(),
        problem_name: pair.name.clone(),
        quantizer_points: m,
        slices: BTreeMap::new(),
        store_all_slices: config.store_all_slices,
        expectation_terms: 0,
        clamp_events: 0,
        wall_seconds: 0.0,
    };

    let geom = grid.geometry(n_steps);
    let count = geom.node_count();
    let coord = |node: usize| {
        let mut x = [0.0];
        geom.coords_of_flat(node, &mut x);
        x[0]
    };
    let mut ubar_next = vec![0.0; count];
    let mut wbar_next = vec![0.0; count];
    exec::fill_indexed(&mut ubar_next, |node| (pair.terminal_u)(coord(node)));
    exec::fill_indexed(&mut wbar_next, |node| (pair.terminal_w)(coord(node)));
    if config.keeps(n_steps) {
        solution.slices.insert(
            n_steps,
            SolvedSlice {
                k: n_steps,
                t: grid.spec().horizon,
                ubar: ubar_next.clone(),
                vbar: None,
                vhat: None,
                wbar: Some(wbar_next.clone()),
            },
        );
    }

    for k in (0..n_steps).rev() {
        let ubar_ref = &ubar_next;
        let wbar_ref = &wbar_next;
        // Rows [u, w, clamped].
        let mut rows = vec![0.0; count * 3];
        exec::fill_rows(&mut rows, 3, |node, row| {
            let x = coord(node);
            let u = ubar_ref[node];
            let w = wbar_ref[node];
            let (sigma, clamped) = (pair.diffusion)(u, w);
            let base_u = x + h * (pair.drift_u)(u, w);
            let base_w = x + h * (pair.drift_w)(u, w);
            let mut acc_u = 0.0;
            let mut acc_w = 0.0;
            for i in 0..m {
                let g = sigma * scaled[i];
                let p = weights[i];
                acc_u += p * ubar_ref[geom.locate(&[base_u + g])];
                acc_w += p * wbar_ref[geom.locate(&[base_w + g])];
            }
            row[0] = acc_u + h * (pair.driver_u)(u, w);
            row[1] = acc_w + h * (pair.driver_w)(u, w);
            row[2] = if clamped { 1.0 } else { 0.0 };
        });
        solution.expectation_terms += 2 * (count * m) as u64;
        let mut ubar_k = vec![0.0; count];
        let mut wbar_k = vec![0.0; count];
        for node in 0..count {
            ubar_k[node] = rows[node * 3];
            wbar_k[node] = rows[node * 3 + 1];
            solution.clamp_events += rows[node * 3 + 2] as u64;
        }
        check_finite(k, geom, &ubar_k)?;
        check_finite(k, geom, &wbar_k)?;
        if config.keeps(k) {
            solution.slices.insert(
                k,
                SolvedSlice {
                    k,
                    t: k as f64 * h,
                    ubar: ubar_k.clone(),
                    vbar: None,
                    vhat: None,
                    wbar: Some(wbar_k.clone()),
                },
            );
        }
        ubar_next = ubar_k;
        wbar_next = wbar_k;
    }
    solution.wall_seconds = start.elapsed().as_secs_f64();
    Ok(solution)
}

fn check_finite(
    k: usize,
    geom: &crate::grid::SliceGeometry,
    values: &[f64],
) -> Result<(), SolveError> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        let node = pos / (values.len() / geom.node_count());
        let mut coords = vec![0.0; geom.dimension()];
        geom.coords_of_flat(node, &mut coords);
        return Err(SolveError::NonFinite { k, node, coords });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_burgers_coupled, Problem, Terminal};
    use crate::quantizer::{train, TrainingSchedule};

    fn tiny_quantizer() -> QuantizerGrid {
        QuantizerGrid::new(1, vec![-1.0, 1.0], vec![0.5, 0.5], 0.36).unwrap()
    }

    fn constant_problem(c: f64) -> Problem {
        Problem::builder(1)
            .diffusion(|_x, _y, out| out[0] = 1.0)
            .terminal(Terminal::new("const", move |_| c))
            .build()
    }

    #[test]
    fn hand_computed_expectation() {
        // 3-node slice at delta = 0.2, field {0, 1, 2}, hand grid {-1, +1}
        // with equal weights, drift 0, unit diffusion, h = 0.04: targets
        // from x = 0 are +-0.2, so E = (2 + 0) / 2 = 1 and the weighted
        // (gradient) sum is h^-1 * 0.5 * (2 * 0.2 - 0) = 5.
        let spec = GridSpec::truncated(1, 0.2, 0.21, 0.1, 25, 1.0);
        let grid = SpatialGrid::new(spec).unwrap();
        assert_eq!(grid.geometry(1).node_count(), 3);
        assert!((grid.h() - 0.04).abs() < 1e-15);
        let field = vec![0.0, 1.0, 2.0];
        let q = tiny_quantizer();
        let e = expect_over_quantizer(&grid, &q, 1, &field, &[0.0], &[0.0], &[1.0], None);
        assert!((e - 1.0).abs() < 1e-12, "{e}");
        let grad = expect_over_quantizer(
            &grid,
            &q,
            1,
            &field,
            &[0.0],
            &[0.0],
            &[1.0],
            Some(&|g: &[f64]| g[0] / 0.04),
        );
        assert!((grad - 5.0).abs() < 1e-12, "{grad}");
        // A constant field integrates to itself (weights sum to one).
        let c = vec![3.25; 3];
        let e = expect_over_quantizer(&grid, &q, 1, &c, &[0.0], &[0.0], &[1.0], None);
        assert!((e - 3.25).abs() < 1e-12);
    }

    #[test]
    fn constant_terminal_zero_driver_is_preserved_exactly() {
        let sched = TrainingSchedule {
            lloyd_samples: 30_000,
            clvq_samples: 50_000,
            weight_samples: 100_000,
            distortion_samples: 50_000,
            ..Default::default()
        };
        let q = train(1, 12, 5, &sched).unwrap();
        let problem = constant_problem(2.5);
        let config = SolverConfig {
            store_all_slices: true,
            ..SolverConfig::new(GridSpec::truncated(1, 0.05, 1.0, 2.0, 50, 1.0), Variant::Full31)
        };
        let sol = solve(&problem, &config, &q).unwrap();
        for k in 0..=50 {
            let s = sol.slice(k).unwrap();
            for &u in &s.ubar {
                assert!((u - 2.5).abs() <= 1e-12 * 2.5, "k = {k}: {u}");
            }
        }
        // Gradient centering: |vbar| <= |c| h^{-1/2} |sum p_i y_i|.
        let mean = q.weighted_mean()[0].abs();
        let h = sol.h();
        let bound = 2.5 * mean / h.sqrt() + 1e-12;
        let s = sol.slice(25).unwrap();
        for v in s.vbar.as_ref().unwrap() {
            assert!(v.abs() <= bound, "{v} vs {bound}");
        }
    }

    #[test]
    fn variants_agree_bitwise_when_z_never_enters() {
        let sched = TrainingSchedule {
            lloyd_samples: 30_000,
            clvq_samples: 50_000,
            weight_samples: 100_000,
            distortion_samples: 50_000,
            ..Default::default()
        };
        let q = train(1, 24, 5, &sched).unwrap();
        // Burgers coupled: drift depends on y only, driver is zero.
        let problem = make_burgers_coupled(0.15, Terminal::sine());
        let mut spec = GridSpec::periodic(1, 0.01, 1.0, 20, 0.2);
        spec.radius = 1.0;
        let mut config = SolverConfig::new(spec, Variant::Full31);
        config.store_all_slices = true;
        let a = solve(&problem, &config, &q).unwrap();
        config.variant = Variant::Simple3910;
        let b = solve(&problem, &config, &q).unwrap();
        for k in 0..=20 {
            let (sa, sb) = (a.slice(k).unwrap(), b.slice(k).unwrap());
            assert_eq!(sa.ubar, sb.ubar, "k = {k}");
            assert_eq!(sa.vbar, sb.vbar, "k = {k}");
        }
    }

    #[test]
    fn pure_backward_rejects_nonzero_drift() {
        let q = tiny_quantizer();
        let problem = make_burgers_coupled(0.15, Terminal::sine());
        let config = SolverConfig::new(
            GridSpec::periodic(1, 0.01, 1.0, 10, 0.1),
            Variant::PureBackward,
        );
        assert!(matches!(
            solve(&problem, &config, &q),
            Err(SolveError::VariantMismatch(_))
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let q = tiny_quantizer(); // d = 1
        let problem = crate::problems::make_kpz_benchmark(0.3, 0.8).unwrap(); // d = 2
        let config = SolverConfig::new(GridSpec::periodic(2, 0.1, 1.0, 4, 0.2), Variant::Full31);
        assert!(matches!(
            solve(&problem, &config, &q),
            Err(SolveError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn linear_interpolation_requires_dimension_one() {
        let q = QuantizerGrid::new(
            2,
            vec![-1.0, 0.0, 1.0, 0.0],
            vec![0.5, 0.5],
            0.5,
        )
        .unwrap();
        let problem = crate::problems::make_kpz_benchmark(0.3, 0.8).unwrap();
        let mut config = SolverConfig::new(GridSpec::periodic(2, 0.1, 1.0, 4, 0.2), Variant::Full31);
        config.interpolation = Interpolation::Linear1d;
        assert!(matches!(
            solve(&problem, &config, &q),
            Err(SolveError::InterpolationUnsupported(2))
        ));
    }

    #[test]
    fn nan_abort_reports_location() {
        let q = tiny_quantizer();
        let problem = Problem::builder(1)
            .diffusion(|_x, _y, out| out[0] = 1.0)
            .driver(false, |x, _y, _z| if x[0] > 0.4 { f64::NAN } else { 0.0 })
            .terminal(Terminal::new("one", |_| 1.0))
            .build();
        let config = SolverConfig::new(GridSpec::periodic(1, 0.1, 1.0, 5, 0.5), Variant::Full31);
        match solve(&problem, &config, &q) {
            Err(SolveError::NonFinite { k, coords, .. }) => {
                assert_eq!(k, 4);
                assert!(coords[0] > 0.4);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn terminal_slice_matches_problem_data() {
        let q = tiny_quantizer();
        let problem = make_burgers_coupled(0.15, Terminal::sine());
        let mut config = SolverConfig::new(GridSpec::periodic(1, 0.05, 1.0, 4, 0.2), Variant::Full31);
        config.store_all_slices = true;
        let sol = solve(&problem, &config, &q).unwrap();
        let s = sol.slice(4).unwrap();
        let grid = &sol.grid;
        for (idx, x) in grid.nodes(4) {
            assert_eq!(s.ubar[idx.0], problem.terminal_value(&x));
            let mut g = [0.0];
            problem.terminal_gradient(&x, grid.delta(), &mut g);
            assert!((s.vbar.as_ref().unwrap()[idx.0] - g[0] * 0.15).abs() < 1e-15);
        }
    }

    #[test]
    fn differentiated_terminal_and_one_step_consistency() {
        // Seeding with the exact solution at t_{k+1} must keep the one-step
        // residual on the scale of h + delta^2 / h.
        let l = 2.0 * std::f64::consts::SQRT_2 * std::f64::consts::PI;
        let pair = porous_differentiated(l, 1.0);
        // Terminal derivative vanishes at x = 0.
        assert!((pair.terminal_w)(0.0).abs() < 1e-15);
        let sched = TrainingSchedule {
            lloyd_samples: 60_000,
            clvq_samples: 100_000,
            weight_samples: 400_000,
            distortion_samples: 100_000,
            ..Default::default()
        };
        let q = train(1, 60, 5, &sched).unwrap();
        let delta = l / 500.0;
        let h = 0.02;
        // One backward step from the terminal time T = 1.
        let config = SolverConfig {
            store_all_slices: true,
            ..SolverConfig::new(GridSpec::periodic(1, delta, l, 1, h), Variant::Differentiated)
        };
        let sol = solve_differentiated(&pair, &config, &q).unwrap();
        let s = sol.slice(0).unwrap();
        let grid = &sol.grid;
        let mut worst_u = 0.0f64;
        let mut worst_w = 0.0f64;
        for (idx, x) in grid.nodes(0) {
            let eu = crate::reference::porous_exact(l, 1.0 - h, x[0]).unwrap();
            let ew = crate::reference::porous_exact_grad(l, 1.0 - h, x[0]).unwrap();
            worst_u = worst_u.max((s.ubar[idx.0] - eu).abs());
            worst_w = worst_w.max((s.wbar.as_ref().unwrap()[idx.0] - ew).abs());
        }
        let scale = h + delta * delta / h;
        assert!(worst_u <= 3.0 * scale, "one-step u residual {worst_u} vs {scale}");
        assert!(worst_w <= 3.0 * scale, "one-step w residual {worst_w} vs {scale}");
    }

    #[test]
    fn differentiated_requires_periodic_one_dim() {
        let pair = porous_differentiated(1.0, 1.0);
        let q = tiny_quantizer();
        let config = SolverConfig::new(GridSpec::truncated(1, 0.01, 1.0, 2.0, 5, 0.1), Variant::Differentiated);
        assert!(matches!(
            solve_differentiated(&pair, &config, &q),
            Err(SolveError::VariantMismatch(_))
        ));
    }

    #[test]
    fn csv_round_trip_shape() {
        let q = tiny_quantizer();
        let problem = make_burgers_coupled(0.15, Terminal::sine());
        let config = SolverConfig::new(GridSpec::periodic(1, 0.1, 1.0, 4, 0.2), Variant::Full31);
        let sol = solve(&problem, &config, &q).unwrap();
        let csv = sol.slice_csv(0).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "k,t_k,node_index,x_1,ubar,vbar_1");
        assert_eq!(lines.count(), 10);
        assert!(matches!(sol.slice_csv(2), Err(SolveError::MissingSlice(2))));
    }
}
