//! Simulation of the discrete forward-backward triple (X, Y, Z) under a
//! computed solution.
//!
//! The forward chain steps with the same transition the solver used
//! (including the predictor lookup when the drift reads the gradient):
//! a Gaussian increment is drawn, quantized through the grid, and the
//! resulting point is projected onto the next slice. Y and Z are exact
//! table lookups of the solution along the path. The stopping index tau
//! records the first step whose pre-projection point left the slice box.
//!
//! Paths are independent and simulate in parallel; every path derives its
//! own ChaCha stream from (master seed, path index), so the ensemble is
//! reproducible under any schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::exec;
use crate::problems::Problem;
use crate::quantizer::QuantizerGrid;
use crate::solver::{Solution, Variant};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("slice {0} is missing from the solution; solve with store_all_slices")]
    MissingSlice(usize),
    #[error("the solution carries no gradient predictor slice at step {0}")]
    MissingPredictor(usize),
    #[error("starting point {0:?} is not a slice-0 node")]
    StartOffGrid(Vec<f64>),
    #[error("path simulation is not defined for the {0:?} variant")]
    VariantUnsupported(Variant),
    #[error("dimension mismatch between solution ({solution}) and quantizer ({quantizer})")]
    DimensionMismatch { solution: usize, quantizer: usize },
}

/// Simulated ensemble, stored flat: path p occupies the index range
/// `[p * (N + 1), (p + 1) * (N + 1))` of the per-step arrays.
#[derive(Debug, Clone)]
pub struct PathEnsemble {
    pub n_paths: usize,
    pub n_steps: usize,
    pub dimension: usize,
    pub master_seed: u64,
    pub x0: Vec<f64>,
    /// Flat node index of X_{t_k} within its slice geometry.
    nodes: Vec<usize>,
    /// Y_{t_k} = ubar(t_k, X_{t_k}).
    y: Vec<f64>,
    /// Z_{t_k} = vbar(t_k, X_{t_k}), d entries per step.
    z: Vec<f64>,
    /// First step index whose pre-projection transition left the box;
    /// None encodes tau = +infinity.
    tau: Vec<Option<usize>>,
    /// Raw Gaussian increments (N * d per path), before quantization.
    increments: Vec<f64>,
    /// Largest observed violation of |X_{k+1} - X_k| <= |T| + delta.
    pub max_jump_excess: f64,
}

impl PathEnsemble {
    pub fn node(&self, path: usize, k: usize) -> usize {
        self.nodes[path * (self.n_steps + 1) + k]
    }

    pub fn y(&self, path: usize, k: usize) -> f64 {
        self.y[path * (self.n_steps + 1) + k]
    }

    pub fn z(&self, path: usize, k: usize) -> &[f64] {
        let d = self.dimension;
        let base = (path * (self.n_steps + 1) + k) * d;
        &self.z[base..base + d]
    }

    pub fn tau(&self, path: usize) -> Option<usize> {
        self.tau[path]
    }

    pub fn increment(&self, path: usize, k: usize) -> &[f64] {
        let d = self.dimension;
        let base = (path * self.n_steps + k) * d;
        &self.increments[base..base + d]
    }

    /// Fraction of paths that hit the truncation boundary.
    pub fn exit_fraction(&self) -> f64 {
        self.tau.iter().filter(|t| t.is_some()).count() as f64 / self.n_paths as f64
    }
}

fn path_seed_stream(master_seed: u64, path: usize) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
    rng.set_stream(path as u64 + 1);
    rng
}

/// Simulates n_paths trajectories of the discrete chain from the slice-0
/// node x0. Requires a solution with all slices stored.
pub fn simulate(
    solution: &Solution,
    problem: &Problem,
    quantizer: &QuantizerGrid,
    x0: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble, SimError> {
    if solution.variant == Variant::Differentiated {
        return Err(SimError::VariantUnsupported(solution.variant));
    }
    let grid = &solution.grid;
    let d = grid.dimension();
    if quantizer.dimension() != d {
        return Err(SimError::DimensionMismatch {
            solution: d,
            quantizer: quantizer.dimension(),
        });
    }
    let n_steps = grid.n_steps();
    for k in 0..=n_steps {
        if solution.slice(k).is_none() {
            return Err(SimError::MissingSlice(k));
        }
    }
    let use_predictor = solution.variant == Variant::Full31 && problem.drift_depends_on_z;
    if use_predictor {
        for k in 0..n_steps {
            if solution.slice(k).unwrap().vhat.is_none() {
                return Err(SimError::MissingPredictor(k));
            }
        }
    }
    let start_node = grid
        .node_of(0, x0)
        .map_err(|_| SimError::StartOffGrid(x0.to_vec()))?;
    let h = grid.h();
    let rh = h.sqrt();
    let delta = grid.delta();
    let period = grid.spec().period.clone();

    struct PathOut {
        nodes: Vec<usize>,
        y: Vec<f64>,
        z: Vec<f64>,
        tau: Option<usize>,
        increments: Vec<f64>,
        jump_excess: f64,
    }

    let paths: Vec<PathOut> = exec::map_indexed(n_paths, |p| {
        let mut rng = path_seed_stream(seed, p);
        let mut nodes = Vec::with_capacity(n_steps + 1);
        let mut y = Vec::with_capacity(n_steps + 1);
        let mut z = Vec::with_capacity((n_steps + 1) * d);
        let mut increments = Vec::with_capacity(n_steps * d);
        let mut tau = None;
        let mut jump_excess = f64::NEG_INFINITY;
        let mut node = start_node.0;
        let mut x = vec![0.0; d];
        let mut xi = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut sigma = vec![0.0; d * d];
        let mut drift = vec![0.0; d];
        let mut x_pre = vec![0.0; d];
        let mut x_new = vec![0.0; d];
        for k in 0..=n_steps {
            let geom = grid.geometry(k);
            geom.coords_of_flat(node, &mut x);
            let slice = solution.slice(k).unwrap();
            nodes.push(node);
            y.push(slice.ubar[node]);
            let vbar = slice.vbar.as_ref().expect("single-field solution");
            z.extend_from_slice(&vbar[node * d..(node + 1) * d]);
            if k == n_steps {
                break;
            }

            // Quantized increment from a raw Gaussian draw.
            for j in 0..d {
                let n: f64 = rng.sample(StandardNormal);
                xi[j] = n;
                increments.push(rh * n);
            }
            let (_, point) = quantizer.nearest(&xi);
            for j in 0..d {
                g[j] = rh * point[j];
            }

            // Same transition as the solver: coefficients frozen at the
            // slice-(k+1) value of the current node.
            let next_slice = solution.slice(k + 1).unwrap();
            let geom_next = grid.geometry(k + 1);
            let next_idx = if geom == geom_next { node } else { geom_next.locate(&x) };
            let y_next = next_slice.ubar[next_idx];
            problem.diffusion(&x, y_next, &mut sigma);
            // Drift gradient slot: the predictor when the solve used one,
            // the slice-(k+1) gradient otherwise (both remaining variants).
            let z_drift: &[f64] = if use_predictor {
                let vhat = slice.vhat.as_ref().unwrap();
                &vhat[node * d..(node + 1) * d]
            } else {
                let vb = next_slice.vbar.as_ref().unwrap();
                &vb[next_idx * d..(next_idx + 1) * d]
            };
            problem.drift(&x, y_next, z_drift, &mut drift);
            let mut trans_norm2 = 0.0;
            for j in 0..d {
                let mut t = h * drift[j];
                for l in 0..d {
                    t += sigma[j * d + l] * g[l];
                }
                trans_norm2 += t * t;
                x_pre[j] = x[j] + t;
            }
            // Exit test on the pre-projection point.
            if tau.is_none() && !grid.contains(k + 1, &x_pre) {
                tau = Some(k + 1);
            }
            let new_node = geom_next.locate(&x_pre);
            geom_next.coords_of_flat(new_node, &mut x_new);
            // Jump bound |X_{k+1} - X_k| <= |T| + delta, distances taken
            // on the torus in periodic mode.
            let mut jump2 = 0.0;
            for j in 0..d {
                let mut dx = (x_new[j] - x[j]).abs();
                if let Some(periods) = &period {
                    dx = dx.min(periods[j] - dx);
                }
                jump2 += dx * dx;
            }
            let excess = jump2.sqrt() - (trans_norm2.sqrt() + delta);
            jump_excess = jump_excess.max(excess);
            // The lattice rounding contributes at most delta sqrt(d)/2 in
            // 2-norm, so the plain "+ delta" bound covers d <= 4.
            debug_assert!(d > 4 || excess <= 1e-9, "jump bound violated by {excess}");
            node = new_node;
        }
        PathOut { nodes, y, z, tau, increments, jump_excess }
    });

    let mut ensemble = PathEnsemble {
        n_paths,
        n_steps,
        dimension: d,
        master_seed: seed,
        x0: x0.to_vec(),
        nodes: Vec::with_capacity(n_paths * (n_steps + 1)),
        y: Vec::with_capacity(n_paths * (n_steps + 1)),
        z: Vec::with_capacity(n_paths * (n_steps + 1) * d),
        tau: Vec::with_capacity(n_paths),
        increments: Vec::with_capacity(n_paths * n_steps * d),
        max_jump_excess: f64::NEG_INFINITY,
    };
    for p in paths {
        ensemble.nodes.extend_from_slice(&p.nodes);
        ensemble.y.extend_from_slice(&p.y);
        ensemble.z.extend_from_slice(&p.z);
        ensemble.tau.push(p.tau);
        ensemble.increments.extend_from_slice(&p.increments);
        ensemble.max_jump_excess = ensemble.max_jump_excess.max(p.jump_excess);
    }
    Ok(ensemble)
}

/// Terminal payoff plus accumulated driver along one path:
/// `H(X_N) + h sum_i f(X_{i-1}, ubar(t_i, X_{i-1}), Z_{i-1})`.
pub fn path_payoff(
    ensemble: &PathEnsemble,
    solution: &Solution,
    problem: &Problem,
    path: usize,
) -> f64 {
    let grid = &solution.grid;
    let d = ensemble.dimension;
    let n = ensemble.n_steps;
    let h = grid.h();
    let mut x = vec![0.0; d];
    let mut acc = 0.0;
    for i in 1..=n {
        let node = ensemble.node(path, i - 1);
        let geom = grid.geometry(i - 1);
        geom.coords_of_flat(node, &mut x);
        let geom_next = grid.geometry(i);
        let next_idx = if geom == geom_next { node } else { geom_next.locate(&x) };
        let u_next = solution.slice(i).unwrap().ubar[next_idx];
        acc += problem.driver(&x, u_next, ensemble.z(path, i - 1));
    }
    ensemble.y(path, n) + h * acc
}

/// Monte Carlo residual of the discrete Feynman-Kac identity: the sample
/// mean of the path payoffs minus ubar(0, x0), with its standard error.
#[derive(Debug, Clone, Copy)]
pub struct FkResidual {
    pub mean: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

pub fn feynman_kac_residual(
    ensemble: &PathEnsemble,
    solution: &Solution,
    problem: &Problem,
) -> FkResidual {
    let n = ensemble.n_paths;
    let payoffs = exec::map_indexed(n, |p| path_payoff(ensemble, solution, problem, p));
    let y0 = ensemble.y(0, 0);
    let mean: f64 = payoffs.iter().sum::<f64>() / n as f64;
    let var: f64 =
        payoffs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n.max(2) - 1) as f64;
    FkResidual {
        mean: mean - y0,
        std_error: (var / n as f64).sqrt(),
        n_paths: n,
    }
}

/// Monte Carlo path-space errors against reference fields:
/// the time-summed squared gradient gap
/// `h sum_i E|vbar(t_i, X_i) 1_{t_i < tau} - v_ref(t_i, X_i)|^2`
/// and the worst per-step squared value gap at the stopped state.
#[derive(Debug, Clone, Copy)]
pub struct L2ErrorReport {
    pub gradient_l2: f64,
    pub gradient_l2_std_error: f64,
    /// max_k E|Y_{k and tau} - u_ref(t_k, X_{k and tau})|^2.
    pub value_sup: f64,
    pub value_sup_std_error: f64,
}

pub fn l2_errors(
    ensemble: &PathEnsemble,
    solution: &Solution,
    ref_u: &(dyn Fn(f64, &[f64]) -> f64 + Sync),
    ref_v: &(dyn Fn(f64, &[f64]) -> Vec<f64> + Sync),
) -> L2ErrorReport {
    let grid = &solution.grid;
    let d = ensemble.dimension;
    let n_steps = ensemble.n_steps;
    let n = ensemble.n_paths;
    let h = grid.h();

    // Per-path gradient functional.
    let grad_terms: Vec<f64> = exec::map_indexed(n, |p| {
        let mut x = vec![0.0; d];
        let mut acc = 0.0;
        for i in 0..n_steps {
            let node = ensemble.node(p, i);
            grid.geometry(i).coords_of_flat(node, &mut x);
            let t = i as f64 * h;
            let vref = ref_v(t, &x);
            let alive = ensemble.tau(p).map_or(true, |tau| i < tau);
            let mut gap2 = 0.0;
            for j in 0..d {
                let vbar = if alive { ensemble.z(p, i)[j] } else { 0.0 };
                let e = vbar - vref[j];
                gap2 += e * e;
            }
            acc += gap2;
        }
        h * acc
    });
    let gmean = grad_terms.iter().sum::<f64>() / n as f64;
    let gvar =
        grad_terms.iter().map(|v| (v - gmean) * (v - gmean)).sum::<f64>() / (n.max(2) - 1) as f64;

    // Per-step value gap at the stopped state; the maximum over steps.
    let mut value_sup = 0.0f64;
    let mut value_sup_se = 0.0f64;
    let mut x = vec![0.0; d];
    for k in 0..=n_steps {
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for p in 0..n {
            let stopped = ensemble.tau(p).map_or(k, |tau| k.min(tau));
            let node = ensemble.node(p, stopped);
            grid.geometry(stopped).coords_of_flat(node, &mut x);
            let gap = ensemble.y(p, stopped) - ref_u(k as f64 * h, &x);
            let g2 = gap * gap;
            acc += g2;
            acc2 += g2 * g2;
        }
        let mean = acc / n as f64;
        let var = (acc2 / n as f64 - mean * mean).max(0.0) / (n.max(2) - 1) as f64;
        if mean > value_sup {
            value_sup = mean;
            value_sup_se = var.sqrt();
        }
    }

    L2ErrorReport {
        gradient_l2: gmean,
        gradient_l2_std_error: (gvar / n as f64).sqrt(),
        value_sup,
        value_sup_std_error: value_sup_se,
    }
}
