//! Error budgets, parameter schedules, reference comparisons and
//! convergence studies.
//!
//! The budget terms are the five analytic error contributions of the
//! convergence estimate: time `sqrt(h)`, space `delta / h`, truncation
//! `R / (R + rho)`, quantization `M^{-1/d} / sqrt(h)` and the gradient
//! term `h^{p/2 + d/4 - 1/2} M^{-p/d} delta^{-p - d/2}`. Their squares sum
//! to the squared global budget. The constants in front are unknown, so
//! budgets are unitless and only meaningful in ratios across runs.

use std::time::Instant;

use crate::grid::SpatialGrid;
use crate::quantizer::{self, TrainingSchedule};
use crate::solver::{solve, Solution, SolveError, SolverConfig};
use crate::Problem;

/// The five-term error decomposition for one parameter set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorBudget {
    pub e_time: f64,
    pub e_space: f64,
    pub e_trunc: f64,
    pub e_quantiz: f64,
    pub e_gradient_p: f64,
    pub p: f64,
}

impl ErrorBudget {
    /// Squared global budget: the sum of the five squares.
    pub fn global2(&self) -> f64 {
        self.e_time * self.e_time
            + self.e_space * self.e_space
            + self.e_trunc * self.e_trunc
            + self.e_quantiz * self.e_quantiz
            + self.e_gradient_p * self.e_gradient_p
    }

    pub fn global(&self) -> f64 {
        self.global2().sqrt()
    }
}

/// Evaluates the five budget terms. An infinite `rho` zeroes the
/// truncation term; a gradient-independent drift zeroes the gradient term.
#[allow(clippy::too_many_arguments)]
pub fn error_budget(
    h: f64,
    delta: f64,
    m: usize,
    d: usize,
    radius: f64,
    rho: f64,
    p: f64,
    drift_depends_on_z: bool,
) -> ErrorBudget {
    assert!(h > 0.0 && delta > 0.0 && m >= 1 && d >= 1 && radius > 0.0 && rho > 0.0);
    assert!(p >= 2.0, "the moment exponent must satisfy p >= 2");
    let md = m as f64;
    let e_trunc = if rho.is_infinite() { 0.0 } else { radius / (radius + rho) };
    let e_gradient_p = if drift_depends_on_z {
        h.powf(p / 2.0 + d as f64 / 4.0 - 0.5)
            * md.powf(-p / d as f64)
            * delta.powf(-p - d as f64 / 2.0)
    } else {
        0.0
    };
    ErrorBudget {
        e_time: h.sqrt(),
        e_space: delta / h,
        e_trunc,
        e_quantiz: md.powf(-1.0 / d as f64) / h.sqrt(),
        e_gradient_p,
        p,
    }
}

/// Sanity flags of the analyzed parameter regime.
#[derive(Debug, Clone)]
pub struct RegimeReport {
    pub delta2_below_h: bool,
    pub quantizer_term_below_h: bool,
    pub rho_at_least_one: bool,
}

pub fn regime_report(h: f64, delta: f64, m: usize, d: usize, rho: f64) -> RegimeReport {
    RegimeReport {
        delta2_below_h: delta * delta < h,
        quantizer_term_below_h: (m as f64).powf(-2.0 / d as f64) < h,
        rho_at_least_one: rho >= 1.0,
    }
}

/// The power schedule tying the spatial step, point count and enlargement
/// to h: `rho = R h^{-1/2}`, `delta = h^{1 + gamma}`,
/// `M = ceil(h^{-(1 + beta) d / 2})` with
/// `beta = 2 gamma + (d/2 + 1 + gamma d) / p + eta_extra`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledParams {
    pub delta: f64,
    pub m: usize,
    pub rho: f64,
    pub beta: f64,
}

pub fn schedule(h: f64, gamma: f64, p: f64, eta_extra: f64, radius: f64, d: usize) -> ScheduledParams {
    assert!(gamma >= 0.0 && p >= 2.0 && eta_extra > 0.0);
    let beta = 2.0 * gamma + (d as f64 / 2.0 + 1.0 + gamma * d as f64) / p + eta_extra;
    let delta = h.powf(1.0 + gamma);
    let m = h.powf(-(1.0 + beta) * d as f64 / 2.0).ceil() as usize;
    ScheduledParams { delta, m, rho: radius * h.powf(-0.5), beta }
}

/// Node-wise comparison of a solved slice against a reference field.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub slice: usize,
    /// Number of nodes inside the comparison window.
    pub n_nodes: usize,
    pub max_abs: f64,
    /// Relative error normalized pointwise by |reference|.
    pub max_rel_pointwise: f64,
    /// Relative error normalized by the window maximum of |reference|.
    pub max_rel_sup: f64,
    /// Root mean square error over the window.
    pub l2: f64,
    /// Coordinates achieving the absolute maximum.
    pub argmax: Vec<f64>,
}

/// Compares `ubar` on slice k with a reference u(t_k, x) over the nodes
/// whose coordinates lie in `window` (inclusive per-axis bounds; None
/// means every node).
pub fn compare(
    solution: &Solution,
    k: usize,
    reference: &(dyn Fn(&[f64]) -> f64 + Sync),
    window: Option<&[(f64, f64)]>,
) -> Result<ComparisonReport, SolveError> {
    let slice = solution.require_slice(k)?;
    compare_fields(&solution.grid, k, &slice.ubar, 1, 0, reference, window)
}

/// Field-level comparison used for both the value and gradient columns:
/// `values` has `stride` entries per node and `component` selects one.
#[allow(clippy::too_many_arguments)]
pub fn compare_fields(
    grid: &SpatialGrid,
    k: usize,
    values: &[f64],
    stride: usize,
    component: usize,
    reference: &(dyn Fn(&[f64]) -> f64 + Sync),
    window: Option<&[(f64, f64)]>,
) -> Result<ComparisonReport, SolveError> {
    let mut n_nodes = 0usize;
    let mut max_abs = 0.0f64;
    let mut argmax = vec![0.0; grid.dimension()];
    let mut max_rel_pointwise = 0.0f64;
    let mut sup_ref = 0.0f64;
    let mut sum_sq = 0.0f64;
    for (idx, x) in grid.nodes(k) {
        if let Some(win) = window {
            if x.iter().zip(win).any(|(c, (lo, hi))| c < lo || c > hi) {
                continue;
            }
        }
        n_nodes += 1;
        let r = reference(&x);
        let err = (values[idx.0 * stride + component] - r).abs();
        sup_ref = sup_ref.max(r.abs());
        if err > max_abs {
            max_abs = err;
            argmax.copy_from_slice(&x);
        }
        if r.abs() > 1e-300 {
            max_rel_pointwise = max_rel_pointwise.max(err / r.abs());
        }
        sum_sq += err * err;
    }
    Ok(ComparisonReport {
        slice: k,
        n_nodes,
        max_abs,
        max_rel_pointwise,
        max_rel_sup: if sup_ref > 0.0 { max_abs / sup_ref } else { max_abs },
        l2: if n_nodes > 0 { (sum_sq / n_nodes as f64).sqrt() } else { 0.0 },
        argmax,
    })
}

/// One row of a convergence study.
#[derive(Debug, Clone)]
pub struct StudyRow {
    pub h: f64,
    pub delta: f64,
    pub m: usize,
    pub rho: f64,
    pub sup_abs_err: f64,
    pub sup_rel_err: f64,
    pub l2_err: f64,
    pub budget: ErrorBudget,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct StudyReport {
    pub rows: Vec<StudyRow>,
    /// Least-squares slope of log(err) against log(h), with the fit
    /// residual; None when an error vanished (exact runs).
    pub slope: Option<(f64, f64)>,
}

/// Study configuration: the grid/problem template stays fixed while h, and
/// through the schedule (delta, M, rho), varies.
pub struct StudyConfig {
    pub horizon: f64,
    pub gamma: f64,
    pub p: f64,
    pub eta_extra: f64,
    pub radius: f64,
    pub quantizer_seed: u64,
    pub training: TrainingSchedule,
    /// Comparison window at slice 0 (None: all nodes).
    pub window: Option<Vec<(f64, f64)>>,
    /// Cache directory for trained quantizers, if any.
    pub cache_dir: Option<std::path::PathBuf>,
}

/// Runs one solve per h (decreasing list) with scheduled parameters and
/// compares slice 0 against the reference. Periodic problems snap delta to
/// the nearest divisor of the period.
pub fn convergence_study(
    problem: &Problem,
    study: &StudyConfig,
    h_list: &[f64],
    reference: &(dyn Fn(&[f64]) -> f64 + Sync),
) -> Result<StudyReport, Box<dyn std::error::Error>> {
    let d = problem.dimension;
    let mut rows = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let started = Instant::now();
        let params = schedule(h, study.gamma, study.p, study.eta_extra, study.radius, d);
        let n_steps = (study.horizon / h).round() as usize;
        let spec = match &problem.period {
            Some(periods) => {
                // Snap the mesh to divide the period exactly.
                let per = periods[0];
                let n_cells = (per / params.delta).round().max(1.0);
                let delta = per / n_cells;
                crate::grid::GridSpec {
                    delta,
                    ..crate::grid::GridSpec::periodic(d, delta, per, n_steps, study.horizon)
                }
            }
            None => crate::grid::GridSpec::truncated(
                d,
                params.delta,
                study.radius,
                params.rho,
                n_steps,
                study.horizon,
            ),
        };
        let delta_used = spec.delta;
        let quant = match &study.cache_dir {
            Some(dir) => {
                quantizer::cached_train(dir, d, params.m, study.quantizer_seed, &study.training)?.0
            }
            None => quantizer::train(d, params.m, study.quantizer_seed, &study.training)?,
        };
        let config = SolverConfig::new(spec, crate::solver::Variant::Full31);
        let solution = solve(problem, &config, &quant)?;
        let report = compare(&solution, 0, reference, study.window.as_deref())?;
        rows.push(StudyRow {
            h,
            delta: delta_used,
            m: params.m,
            rho: if problem.period.is_some() { f64::INFINITY } else { params.rho },
            sup_abs_err: report.max_abs,
            sup_rel_err: report.max_rel_sup,
            l2_err: report.l2,
            budget: error_budget(
                h,
                delta_used,
                params.m,
                d,
                study.radius,
                if problem.period.is_some() { f64::INFINITY } else { params.rho },
                study.p,
                problem.drift_depends_on_z,
            ),
            wall_seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(StudyReport { slope: fit_slope(&rows), rows })
}

/// Least-squares fit of log(err) on log(h). Reported, never asserted.
fn fit_slope(rows: &[StudyRow]) -> Option<(f64, f64)> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.sup_abs_err > 0.0)
        .map(|r| (r.h.ln(), r.sup_abs_err.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let residual: f64 = pts
        .iter()
        .map(|p| {
            let pred = my + slope * (p.0 - mx);
            (p.1 - pred) * (p.1 - pred)
        })
        .sum::<f64>()
        .sqrt();
    Some((slope, residual))
}

/// Renders study rows as the study CSV.
pub fn study_csv(report: &StudyReport) -> String {
    let mut out = String::from(
        "h,delta,M,rho,sup_abs_err,sup_rel_err,l2_err,budget_time,budget_space,budget_trunc,budget_quantiz,budget_gradient,budget_global,wall_seconds\n",
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{:.3}\n",
            crate::fmt_f64(r.h),
            crate::fmt_f64(r.delta),
            r.m,
            crate::fmt_f64(r.rho),
            crate::fmt_f64(r.sup_abs_err),
            crate::fmt_f64(r.sup_rel_err),
            crate::fmt_f64(r.l2_err),
            crate::fmt_f64(r.budget.e_time),
            crate::fmt_f64(r.budget.e_space),
            crate::fmt_f64(r.budget.e_trunc),
            crate::fmt_f64(r.budget.e_quantiz),
            crate::fmt_f64(r.budget.e_gradient_p),
            crate::fmt_f64(r.budget.global()),
            r.wall_seconds,
        ));
    }
    out
}
