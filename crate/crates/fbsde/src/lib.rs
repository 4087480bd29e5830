//! Solver library for quasi-linear parabolic PDEs via a quantized
//! forward-backward SDE scheme.
//!
//! The approach discretizes the coupled forward-backward representation of
//! the PDE on truncated (or periodic) Cartesian grids, replaces Brownian
//! increments by an optimally quantized Gaussian law, and sweeps backward in
//! time with a dynamic-programming update of the solution field and its
//! gradient. The crate provides:
//!
//! - [`quantizer`]: training, persistence and evaluation of optimal M-point
//!   quantizers of the d-dimensional standard Gaussian,
//! - [`grid`]: Cartesian spatial grids, lattice projections, truncation and
//!   periodic wrapping,
//! - [`problems`]: coefficient bundles (drift, driver, diffusion, terminal
//!   data) with the built-in Burgers / KPZ / porous-media benchmarks,
//! - [`solver`]: the backward dynamic-programming engines (four variants),
//! - [`reference`]: closed-form and quadrature reference solutions,
//! - [`sim`]: simulation of the discrete forward-backward triple (X, Y, Z),
//! - [`diagnostics`]: error budgets, parameter schedules, comparisons and
//!   convergence studies.
//!
//! With the default `parallel` feature the node and path loops run on rayon;
//! without it the same code runs sequentially. Results are bit-identical
//! either way.

pub mod diagnostics;
mod exec;
pub mod grid;
pub mod problems;
pub mod quantizer;
pub mod reference;
pub mod sim;
pub mod solver;

pub use grid::{GridSpec, SpatialGrid};
pub use problems::Problem;
pub use quantizer::QuantizerGrid;
pub use sim::PathEnsemble;
pub use solver::{Solution, SolverConfig, Variant};

/// Formats a float with 17 significant digits, enough for an exact
/// round-trip through decimal text.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
