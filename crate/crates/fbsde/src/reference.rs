//! Closed-form and quadrature reference solutions for the benchmark
//! problems: the Cole-Hopf representation of Burgers, the log-exponential
//! formula for deterministic KPZ, and the explicit porous-media solution.
//!
//! Expectations against the Gaussian law are computed with probabilist
//! Gauss-Hermite rules (nodes and weights normalized so that E[1] = 1 and
//! nodes are symmetric about 0) or, to reproduce the quantized reference
//! pipeline, with a trained quantizer grid.

use thiserror::Error;

use crate::problems::{Problem, Terminal};
use crate::quantizer::QuantizerGrid;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("expectation denominator degenerated (min exponent {min_exponent}, max {max_exponent})")]
    DenominatorUnderflow { min_exponent: f64, max_exponent: f64 },
    #[error("expectation overflowed despite max-shift (shifted exponent {0})")]
    Overflow(f64),
    #[error("quadrature dimension {quad} does not match the problem dimension {expected}")]
    DimensionMismatch { quad: usize, expected: usize },
}

/// Nodes and weights integrating against N(0, I_d). Weights sum to one.
#[derive(Debug, Clone)]
pub struct Quadrature {
    dimension: usize,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl Quadrature {
    /// Probabilist Gauss-Hermite rule with n nodes on the line.
    pub fn gauss_hermite(n: usize) -> Self {
        let (nodes, weights) = hermite_rule(n);
        Quadrature { dimension: 1, nodes, weights }
    }

    /// Tensor product of two n-node Gauss-Hermite rules.
    pub fn gauss_hermite_2d(n: usize) -> Self {
        let (x, w) = hermite_rule(n);
        let mut nodes = Vec::with_capacity(n * n * 2);
        let mut weights = Vec::with_capacity(n * n);
        for j in 0..n {
            for i in 0..n {
                nodes.push(x[i]);
                nodes.push(x[j]);
                weights.push(w[i] * w[j]);
            }
        }
        normalize(&mut weights);
        Quadrature { dimension: 2, nodes, weights }
    }

    /// Reference integration through a trained quantizer grid, matching
    /// the quantized reference pipeline.
    pub fn from_quantizer(grid: &QuantizerGrid) -> Self {
        let mut weights = grid.weights().to_vec();
        normalize(&mut weights);
        Quadrature {
            dimension: grid.dimension(),
            nodes: grid.points_flat().to_vec(),
            weights,
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// E[f(Z)] for Z ~ N(0, I_d), as the weighted sum over the rule.
    pub fn expect(&self, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
        let d = self.dimension;
        let mut sum = 0.0;
        let mut comp = 0.0;
        for (i, w) in self.weights.iter().enumerate() {
            let term = w * f(&self.nodes[i * d..(i + 1) * d]);
            let t = sum + term;
            comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
            sum = t;
        }
        sum + comp
    }
}

fn normalize(weights: &mut [f64]) {
    let s: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= s;
    }
    // Absorb the residual into the central weight pair: those are the
    // largest entries, so the nudge is a relative perturbation of order
    // machine epsilon and the symmetry of the rule survives.
    let n = weights.len();
    for _ in 0..2 {
        let r = 1.0 - neumaier_sum(weights);
        if n % 2 == 1 {
            weights[n / 2] += r;
        } else {
            weights[n / 2 - 1] += r / 2.0;
            weights[n / 2] += r / 2.0;
        }
    }
}

fn neumaier_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Probabilist Gauss-Hermite nodes and weights by Golub-Welsch: the nodes
/// are the eigenvalues of the symmetric tridiagonal Jacobi matrix (zero
/// diagonal, off-diagonal sqrt(j)), the weights the squared first
/// components of its eigenvectors. The implicit-shift QL sweep tracks only
/// that first row. Nodes are symmetrized exactly about zero.
fn hermite_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1, "quadrature needs at least one node");
    if n == 1 {
        return (vec![0.0], vec![1.0]);
    }
    let mut d = vec![0.0f64; n];
    let mut e: Vec<f64> = (1..n).map(|j| (j as f64).sqrt()).collect();
    e.push(0.0);
    let mut q = vec![0.0f64; n];
    q[0] = 1.0;

    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            assert!(iter <= 60, "QL sweep failed to converge");
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                if f.abs() >= g.abs() {
                    c = g / f;
                    r = c.hypot(1.0);
                    e[i + 1] = f * r;
                    s = 1.0 / r;
                    c *= s;
                } else {
                    s = f / g;
                    r = s.hypot(1.0);
                    e[i + 1] = g * r;
                    c = 1.0 / r;
                    s *= c;
                }
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                f = q[i + 1];
                q[i + 1] = s * q[i] + c * f;
                q[i] = c * q[i] - s * f;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].partial_cmp(&d[b]).unwrap());
    let mut x: Vec<f64> = order.iter().map(|&i| d[i]).collect();
    let mut w: Vec<f64> = order.iter().map(|&i| q[i] * q[i]).collect();
    // Enforce exact symmetry of the rule about the origin.
    for i in 0..n / 2 {
        let node = 0.5 * (x[n - 1 - i] - x[i]);
        x[i] = -node;
        x[n - 1 - i] = node;
        let weight = 0.5 * (w[i] + w[n - 1 - i]);
        w[i] = weight;
        w[n - 1 - i] = weight;
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    normalize(&mut w);
    (x, w)
}

/// Antiderivative of the terminal data from 0: the closed form when the
/// terminal carries one, an adaptive Simpson rule otherwise.
fn terminal_integral(terminal: &Terminal, y: f64) -> f64 {
    match terminal.antiderivative(y) {
        Some(v) => v,
        None => adaptive_simpson(|u| terminal.value(&[u]), 0.0, y, 1e-10, 48),
    }
}

fn adaptive_simpson(f: impl Fn(f64) -> f64 + Copy, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    }
    fn rec(
        f: impl Fn(f64) -> f64 + Copy,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let left = simpson(f, a, m);
        let right = simpson(f, m, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        rec(f, a, m, left, tol / 2.0, depth - 1) + rec(f, m, b, right, tol / 2.0, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    rec(f, a, b, simpson(f, a, b), tol, depth)
}

/// Cole-Hopf value of the Burgers solution at (t, x):
/// `u = E[H(q) phi(q)] / E[phi(q)]` with `q = x + eps * B_{T-t}` and
/// `phi(y) = exp(-eps^{-2} int_0^y H)`. The exponent is max-shifted before
/// exponentiation so the ratio never underflows.
pub fn burgers_exact(
    epsilon: f64,
    terminal: &Terminal,
    t: f64,
    x: f64,
    horizon: f64,
    quad: &Quadrature,
) -> Result<f64, ReferenceError> {
    if quad.dimension() != 1 {
        return Err(ReferenceError::DimensionMismatch { quad: quad.dimension(), expected: 1 });
    }
    if t > horizon {
        return Err(ReferenceError::Domain(format!("t = {t} exceeds the horizon {horizon}")));
    }
    let sd = epsilon * (horizon - t).sqrt();
    if sd == 0.0 {
        return Ok(terminal.value(&[x]));
    }
    let inv_eps2 = 1.0 / (epsilon * epsilon);
    let n = quad.len();
    let mut exponents = Vec::with_capacity(n);
    let mut values = Vec::with_capacity(n);
    let mut max_e = f64::NEG_INFINITY;
    let mut min_e = f64::INFINITY;
    for i in 0..n {
        let q = x + sd * quad.nodes[i];
        let e = -inv_eps2 * terminal_integral(terminal, q);
        if !e.is_finite() {
            return Err(ReferenceError::Overflow(e));
        }
        max_e = max_e.max(e);
        min_e = min_e.min(e);
        exponents.push(e);
        values.push(terminal.value(&[q]));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        let phi = (exponents[i] - max_e).exp();
        num += quad.weights[i] * values[i] * phi;
        den += quad.weights[i] * phi;
    }
    if !(den > 0.0) || !den.is_finite() {
        return Err(ReferenceError::DenominatorUnderflow {
            min_exponent: min_e,
            max_exponent: max_e,
        });
    }
    Ok(num / den)
}

/// Log-exponential value of the deterministic KPZ solution:
/// `u = log(E[exp(nu H(x + sigma B_{T-t}))]) / nu`, max-shifted.
pub fn kpz_exact(
    nu: f64,
    sigma: &[f64; 4],
    terminal: &Terminal,
    t: f64,
    x: &[f64; 2],
    horizon: f64,
    quad: &Quadrature,
) -> Result<f64, ReferenceError> {
    if quad.dimension() != 2 {
        return Err(ReferenceError::DimensionMismatch { quad: quad.dimension(), expected: 2 });
    }
    if t > horizon {
        return Err(ReferenceError::Domain(format!("t = {t} exceeds the horizon {horizon}")));
    }
    let sd = (horizon - t).sqrt();
    if sd == 0.0 {
        return Ok(terminal.value(x));
    }
    let n = quad.len();
    let mut exponents = Vec::with_capacity(n);
    let mut max_e = f64::NEG_INFINITY;
    for i in 0..n {
        let g = &quad.nodes[2 * i..2 * i + 2];
        let q = [
            x[0] + sd * (sigma[0] * g[0] + sigma[1] * g[1]),
            x[1] + sd * (sigma[2] * g[0] + sigma[3] * g[1]),
        ];
        let e = nu * terminal.value(&q);
        if !e.is_finite() {
            return Err(ReferenceError::Overflow(e));
        }
        max_e = max_e.max(e);
        exponents.push(e);
    }
    let mut acc = 0.0;
    for i in 0..n {
        acc += quad.weights[i] * (exponents[i] - max_e).exp();
    }
    if !acc.is_finite() || !(acc > 0.0) {
        return Err(ReferenceError::Overflow(max_e));
    }
    Ok((acc.ln() + max_e) / nu)
}

/// Explicit porous-media solution `u(t, x) = (4 / 3t) cos^2(pi x / L)`.
pub fn porous_exact(l: f64, t: f64, x: f64) -> Result<f64, ReferenceError> {
    if !(t > 0.0) {
        return Err(ReferenceError::Domain(format!("porous solution needs t > 0, got {t}")));
    }
    let c = (std::f64::consts::PI * x / l).cos();
    Ok(4.0 / (3.0 * t) * c * c)
}

/// Space derivative of the porous-media solution.
pub fn porous_exact_grad(l: f64, t: f64, x: f64) -> Result<f64, ReferenceError> {
    if !(t > 0.0) {
        return Err(ReferenceError::Domain(format!("porous solution needs t > 0, got {t}")));
    }
    let a = std::f64::consts::PI * x / l;
    Ok(-(8.0 * std::f64::consts::PI) / (3.0 * l * t) * a.cos() * a.sin())
}

/// Reference for v = grad_x u * sigma(x, u): central finite differences of
/// the reference solution, right-multiplied by the problem diffusion.
pub fn reference_gradient(
    u: impl Fn(f64, &[f64]) -> f64,
    problem: &Problem,
    t: f64,
    x: &[f64],
    step: f64,
) -> Vec<f64> {
    let d = problem.dimension;
    let mut grad = vec![0.0; d];
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + step;
        let up = u(t, &xp);
        xp[j] = x[j] - step;
        let um = u(t, &xp);
        xp[j] = x[j];
        grad[j] = (up - um) / (2.0 * step);
    }
    let mut sigma = vec![0.0; d * d];
    problem.diffusion(x, u(t, x), &mut sigma);
    let mut out = vec![0.0; d];
    for j in 0..d {
        for i in 0..d {
            out[j] += grad[i] * sigma[i * d + j];
        }
    }
    out
}
