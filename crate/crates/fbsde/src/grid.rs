//! Cartesian spatial grids, lattice projections and truncation.
//!
//! Nodes live on the lattice `delta * Z^d`, restricted per time slice to a
//! half-open box `Delta_k` whose radius is `R` at the initial slice and
//! `R + rho` afterwards. Nodes are stored as integer multi-indices; real
//! coordinates are always derived as `index * delta` so repeated projection
//! never drifts. In periodic mode the truncation is replaced by a modular
//! wrap into the fundamental cell `[0, period)` and every slice shares one
//! geometry.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("invalid grid parameter: {0}")]
    InvalidParam(String),
    #[error("period {period} on axis {axis} is not an integer multiple of delta = {delta}")]
    NonIntegerPeriod { axis: usize, period: f64, delta: f64 },
    #[error("only eta = 0 is implemented; got {0}")]
    UnsupportedEta(f64),
    #[error("rho = +inf requires periodic mode; an untruncated grid cannot be enumerated")]
    UnboundedGrid,
    #[error("grid has too many nodes to enumerate")]
    NodeCountOverflow,
    #[error("lattice point {point:?} lies outside the slice-{slice} domain")]
    OutsideDomain { slice: usize, point: Vec<f64> },
    #[error("linear interpolation is only available in dimension 1 (grid has d = {0})")]
    InterpolationDimension(usize),
}

/// Mesh parameters for the space-time discretization.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub dimension: usize,
    /// Mesh step delta.
    pub delta: f64,
    /// Radius R of the initial grid.
    pub radius: f64,
    /// Enlargement rho of the later grids; `f64::INFINITY` means untruncated.
    pub rho: f64,
    /// Growth exponent of psi(t) = t^eta; only 0 is implemented.
    pub eta: f64,
    /// Per-axis periods; when set the truncation is replaced by wrapping.
    pub period: Option<Vec<f64>>,
    /// Number of time steps N.
    pub n_steps: usize,
    /// Horizon T, so h = T / N.
    pub horizon: f64,
}

impl GridSpec {
    pub fn h(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Convenience constructor for periodic grids.
    pub fn periodic(dimension: usize, delta: f64, period: f64, n_steps: usize, horizon: f64) -> Self {
        GridSpec {
            dimension,
            delta,
            radius: period,
            rho: period,
            eta: 0.0,
            period: Some(vec![period; dimension]),
            n_steps,
            horizon,
        }
    }

    /// Convenience constructor for truncated grids.
    pub fn truncated(
        dimension: usize,
        delta: f64,
        radius: f64,
        rho: f64,
        n_steps: usize,
        horizon: f64,
    ) -> Self {
        GridSpec {
            dimension,
            delta,
            radius,
            rho,
            eta: 0.0,
            period: None,
            n_steps,
            horizon,
        }
    }
}

/// Coordinatewise lattice projection: component j maps to
/// `delta * floor(x_j / delta + 1/2)`; exact half-cells round up.
pub fn project_infinite(delta: f64, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&c| delta * lattice_index(delta, c) as f64).collect()
}

fn lattice_index(delta: f64, coord: f64) -> i64 {
    (coord / delta + 0.5).floor() as i64
}

/// Orthogonal projection of a lattice point onto the hypercube
/// `[-delta*floor(r/delta), delta*floor(r/delta)]^d`.
pub fn truncate(r: f64, delta: f64, y: &[f64]) -> Vec<f64> {
    let bound = (r / delta).floor() * delta;
    y.iter().map(|&c| c.clamp(-bound, bound)).collect()
}

/// Index identifying a node within one time slice; bijective with the
/// integer multi-index through the slice geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeIndex(pub usize);

#[derive(Debug, Clone, PartialEq)]
enum AxisGeom {
    /// Indices in [-bound, bound].
    Truncated { bound: i64 },
    /// Indices in [0, n), wrapped modulo n.
    Periodic { n: i64 },
}

impl AxisGeom {
    fn len(&self) -> usize {
        match *self {
            AxisGeom::Truncated { bound } => (2 * bound + 1) as usize,
            AxisGeom::Periodic { n } => n as usize,
        }
    }

    fn first(&self) -> i64 {
        match *self {
            AxisGeom::Truncated { bound } => -bound,
            AxisGeom::Periodic { .. } => 0,
        }
    }

    /// Offset of a raw lattice index within the axis after clamp/wrap.
    fn offset_of(&self, idx: i64) -> usize {
        match *self {
            AxisGeom::Truncated { bound } => (idx.clamp(-bound, bound) + bound) as usize,
            AxisGeom::Periodic { n } => idx.rem_euclid(n) as usize,
        }
    }

    fn contains(&self, idx: i64) -> bool {
        match *self {
            AxisGeom::Truncated { bound } => (-bound..=bound).contains(&idx),
            AxisGeom::Periodic { .. } => true,
        }
    }
}

/// Node layout of one time slice: per-axis ranges plus row-major strides,
/// lowest coordinate fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceGeometry {
    delta: f64,
    axes: Vec<AxisGeom>,
    strides: Vec<usize>,
    node_count: usize,
}

impl SliceGeometry {
    fn new(delta: f64, axes: Vec<AxisGeom>) -> Result<Self, GridError> {
        let mut strides = Vec::with_capacity(axes.len());
        let mut count: usize = 1;
        for axis in &axes {
            strides.push(count);
            count = count
                .checked_mul(axis.len())
                .ok_or(GridError::NodeCountOverflow)?;
        }
        Ok(SliceGeometry { delta, axes, strides, node_count: count })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn dimension(&self) -> usize {
        self.axes.len()
    }

    /// Rounds `x` to the lattice, clamps or wraps it into the slice and
    /// returns the flat node index. Always succeeds by construction.
    #[inline]
    pub fn locate(&self, x: &[f64]) -> usize {
        let mut flat = 0;
        for (j, axis) in self.axes.iter().enumerate() {
            let idx = lattice_index(self.delta, x[j]);
            flat += axis.offset_of(idx) * self.strides[j];
        }
        flat
    }

    /// Flat index of an in-domain lattice multi-index, if inside.
    pub fn flat_of_lattice(&self, idx: &[i64]) -> Option<usize> {
        let mut flat = 0;
        for (j, axis) in self.axes.iter().enumerate() {
            if !axis.contains(idx[j]) {
                return None;
            }
            flat += axis.offset_of(idx[j]) * self.strides[j];
        }
        Some(flat)
    }

    pub fn lattice_of_flat(&self, flat: usize, out: &mut [i64]) {
        let mut rest = flat;
        for (j, axis) in self.axes.iter().enumerate() {
            let n = axis.len();
            out[j] = axis.first() + (rest % n) as i64;
            rest /= n;
        }
    }

    pub fn coords_of_flat(&self, flat: usize, out: &mut [f64]) {
        let mut rest = flat;
        for (j, axis) in self.axes.iter().enumerate() {
            let n = axis.len();
            let idx = axis.first() + (rest % n) as i64;
            out[j] = idx as f64 * self.delta;
            rest /= n;
        }
    }

    /// True when the raw (pre-projection) point lies in the half-open box
    /// of the slice. Periodic slices contain everything.
    pub fn contains_raw(&self, x: &[f64]) -> bool {
        self.axes.iter().enumerate().all(|(j, axis)| match *axis {
            AxisGeom::Periodic { .. } => true,
            AxisGeom::Truncated { bound } => {
                let b = bound as f64 * self.delta;
                let half = self.delta / 2.0;
                (-b - half..b + half).contains(&x[j])
            }
        })
    }
}

/// Grid geometries for every time slice. With eta = 0 the slices k >= 1
/// all share one geometry, so only two are stored.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    spec: GridSpec,
    geom_initial: SliceGeometry,
    geom_rest: SliceGeometry,
}

impl SpatialGrid {
    pub fn new(spec: GridSpec) -> Result<Self, GridError> {
        let d = spec.dimension;
        if d == 0 {
            return Err(GridError::InvalidParam("dimension must be positive".into()));
        }
        if !(spec.delta > 0.0) {
            return Err(GridError::InvalidParam("delta must be positive".into()));
        }
        if spec.n_steps == 0 || !(spec.horizon > 0.0) {
            return Err(GridError::InvalidParam("need N >= 1 and T > 0".into()));
        }
        if spec.eta != 0.0 {
            if !(0.0..0.5).contains(&spec.eta) {
                return Err(GridError::InvalidParam("eta must lie in [0, 1/2)".into()));
            }
            return Err(GridError::UnsupportedEta(spec.eta));
        }
        let (geom_initial, geom_rest) = match &spec.period {
            Some(periods) => {
                if periods.len() != d {
                    return Err(GridError::InvalidParam(format!(
                        "period vector has length {}, expected {}",
                        periods.len(),
                        d
                    )));
                }
                let mut axes = Vec::with_capacity(d);
                for (axis, &p) in periods.iter().enumerate() {
                    if !(p > 0.0) {
                        return Err(GridError::InvalidParam("periods must be positive".into()));
                    }
                    let n = (p / spec.delta).round();
                    if n < 1.0 || (n * spec.delta - p).abs() > 1e-9 * p.max(1.0) {
                        return Err(GridError::NonIntegerPeriod {
                            axis,
                            period: p,
                            delta: spec.delta,
                        });
                    }
                    axes.push(AxisGeom::Periodic { n: n as i64 });
                }
                let g = SliceGeometry::new(spec.delta, axes)?;
                (g.clone(), g)
            }
            None => {
                if !(spec.radius > 0.0) {
                    return Err(GridError::InvalidParam("R must be positive".into()));
                }
                if spec.rho.is_infinite() {
                    return Err(GridError::UnboundedGrid);
                }
                if !(spec.rho > 0.0) {
                    return Err(GridError::InvalidParam("rho must be positive".into()));
                }
                let b0 = (spec.radius / spec.delta).floor() as i64;
                let b1 = ((spec.radius + spec.rho) / spec.delta).floor() as i64;
                let initial = SliceGeometry::new(
                    spec.delta,
                    vec![AxisGeom::Truncated { bound: b0 }; d],
                )?;
                let rest = SliceGeometry::new(
                    spec.delta,
                    vec![AxisGeom::Truncated { bound: b1 }; d],
                )?;
                (initial, rest)
            }
        };
        Ok(SpatialGrid { spec, geom_initial, geom_rest })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dimension(&self) -> usize {
        self.spec.dimension
    }

    pub fn delta(&self) -> f64 {
        self.spec.delta
    }

    pub fn n_steps(&self) -> usize {
        self.spec.n_steps
    }

    pub fn h(&self) -> f64 {
        self.spec.h()
    }

    pub fn is_periodic(&self) -> bool {
        self.spec.period.is_some()
    }

    /// Geometry of time slice k (0 <= k <= N).
    pub fn geometry(&self, k: usize) -> &SliceGeometry {
        debug_assert!(k <= self.spec.n_steps);
        if k == 0 {
            &self.geom_initial
        } else {
            &self.geom_rest
        }
    }

    /// Non-fatal sanity flags from the convergence analysis.
    pub fn regime_warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        let h = self.h();
        if self.spec.delta * self.spec.delta >= h {
            out.push(format!(
                "delta^2 = {:.3e} >= h = {:.3e}; outside the analyzed regime",
                self.spec.delta * self.spec.delta,
                h
            ));
        }
        if !self.is_periodic() && self.spec.rho < 1.0 {
            out.push(format!("rho = {} < 1; outside the analyzed regime", self.spec.rho));
        }
        out
    }

    /// Lattice projection, unrestricted by any slice.
    pub fn project_infinite(&self, x: &[f64]) -> Vec<f64> {
        project_infinite(self.spec.delta, x)
    }

    /// Full per-step projection: lattice rounding followed by truncation at
    /// radius R (k = 0) or R + rho (k >= 1), or by the periodic wrap.
    pub fn project_step(&self, k: usize, x: &[f64]) -> Vec<f64> {
        let geom = self.geometry(k);
        let flat = geom.locate(x);
        let mut out = vec![0.0; self.spec.dimension];
        geom.coords_of_flat(flat, &mut out);
        out
    }

    /// Flat-index variant of [`SpatialGrid::project_step`].
    #[inline]
    pub fn project_step_index(&self, k: usize, x: &[f64]) -> NodeIndex {
        NodeIndex(self.geometry(k).locate(x))
    }

    /// True when x lies in the half-open box Delta_k.
    pub fn contains(&self, k: usize, x: &[f64]) -> bool {
        self.geometry(k).contains_raw(x)
    }

    /// Iterates the slice-k nodes in flat order (lowest coordinate fastest).
    pub fn nodes(&self, k: usize) -> impl Iterator<Item = (NodeIndex, Vec<f64>)> + '_ {
        let geom = self.geometry(k);
        let d = self.spec.dimension;
        (0..geom.node_count()).map(move |flat| {
            let mut coords = vec![0.0; d];
            geom.coords_of_flat(flat, &mut coords);
            (NodeIndex(flat), coords)
        })
    }

    /// Flat index of a lattice point inside slice k. The point must come
    /// from the lattice; points outside the slice are an error (callers
    /// must project first).
    pub fn node_of(&self, k: usize, point: &[f64]) -> Result<NodeIndex, GridError> {
        let geom = self.geometry(k);
        let idx: Vec<i64> = point.iter().map(|&c| lattice_index(self.spec.delta, c)).collect();
        geom.flat_of_lattice(&idx)
            .map(NodeIndex)
            .ok_or_else(|| GridError::OutsideDomain { slice: k, point: point.to_vec() })
    }

    /// Piecewise-linear interpolation of per-node values at a real point;
    /// only in dimension 1. Outside the span of a truncated grid the value
    /// is clamped to the boundary node; periodic grids wrap.
    pub fn interp1d(&self, k: usize, values: &[f64], x: f64) -> Result<f64, GridError> {
        if self.spec.dimension != 1 {
            return Err(GridError::InterpolationDimension(self.spec.dimension));
        }
        let geom = self.geometry(k);
        debug_assert_eq!(values.len(), geom.node_count());
        let delta = self.spec.delta;
        Ok(match geom.axes[0] {
            AxisGeom::Periodic { n } => {
                let t = x / delta;
                let j0 = t.floor() as i64;
                let frac = t - j0 as f64;
                let a = values[j0.rem_euclid(n) as usize];
                let b = values[(j0 + 1).rem_euclid(n) as usize];
                a + frac * (b - a)
            }
            AxisGeom::Truncated { bound } => {
                if bound == 0 {
                    return Ok(values[0]);
                }
                let span = bound as f64 * delta;
                let xc = x.clamp(-span, span);
                let t = xc / delta;
                let j0 = (t.floor() as i64).clamp(-bound, bound - 1);
                let frac = t - j0 as f64;
                let a = values[(j0 + bound) as usize];
                let b = values[(j0 + 1 + bound) as usize];
                a + frac * (b - a)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lattice_projection_rounds_half_up() {
        assert_eq!(project_infinite(0.5, &[0.74]), vec![0.5]);
        assert_eq!(project_infinite(0.5, &[0.25]), vec![0.5]);
        assert_eq!(project_infinite(0.5, &[1.5]), vec![1.5]);
        assert_eq!(project_infinite(0.5, &[-0.25]), vec![0.0]);
    }

    #[test]
    fn truncation_clamps_to_floored_bound() {
        assert_eq!(truncate(1.2, 0.5, &[1.5]), vec![1.0]);
        assert_eq!(truncate(1.2, 0.5, &[0.5]), vec![0.5]);
        assert_eq!(truncate(1.2, 0.5, &[-3.0]), vec![-1.0]);
    }

    fn truncated_grid() -> SpatialGrid {
        SpatialGrid::new(GridSpec::truncated(2, 0.5, 1.0, 3.0, 10, 1.0)).unwrap()
    }

    #[test]
    fn step_projection_clamps_outside_points() {
        let g = truncated_grid();
        assert_eq!(g.project_step(1, &[10.0, -10.0]), vec![4.0, -4.0]);
        // Inside Delta_k the projection is the plain lattice rounding.
        assert_eq!(g.project_step(1, &[0.74, 0.2]), vec![0.5, 0.0]);
        // Slice 0 clamps at radius R.
        assert_eq!(g.project_step(0, &[10.0, 10.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn periodic_projection_wraps() {
        let g = SpatialGrid::new(GridSpec::periodic(1, 0.01, 1.0, 10, 1.0)).unwrap();
        let node = g.project_step(3, &[1.237]);
        assert!((node[0] - 0.24).abs() < 1e-12);
    }

    #[test]
    fn period_must_be_lattice_compatible() {
        let spec = GridSpec::periodic(1, 0.3, 1.0, 10, 1.0);
        assert!(matches!(
            SpatialGrid::new(spec),
            Err(GridError::NonIntegerPeriod { .. })
        ));
    }

    #[test]
    fn enumeration_is_row_major_and_bijective() {
        let g = truncated_grid();
        // Slice 0: bound = floor(1.0/0.5) = 2, so 5 nodes per axis.
        let nodes: Vec<_> = g.nodes(0).collect();
        assert_eq!(nodes.len(), 25);
        assert_eq!(nodes[0].1, vec![-1.0, -1.0]);
        assert_eq!(nodes[1].1, vec![-0.5, -1.0]); // lowest coordinate fastest
        assert_eq!(nodes[24].1, vec![1.0, 1.0]);
        for (idx, coords) in &nodes {
            assert_eq!(g.node_of(0, coords).unwrap(), *idx);
        }
    }

    #[test]
    fn node_of_outside_is_an_error() {
        let g = truncated_grid();
        assert!(matches!(
            g.node_of(0, &[3.0, 0.0]),
            Err(GridError::OutsideDomain { slice: 0, .. })
        ));
    }

    #[test]
    fn interp_reproduces_nodes_and_midpoints() {
        let g = SpatialGrid::new(GridSpec::truncated(1, 0.5, 1.0, 1.0, 4, 1.0)).unwrap();
        // Slice 1: bound 4, nodes -2.0..2.0 step 0.5 (9 nodes).
        let values: Vec<f64> = (0..9).map(|i| i as f64).collect();
        assert_eq!(g.interp1d(1, &values, -2.0).unwrap(), 0.0);
        assert_eq!(g.interp1d(1, &values, 0.0).unwrap(), 4.0);
        assert!((g.interp1d(1, &values, 0.25).unwrap() - 4.5).abs() < 1e-12);
        // Affine data is reproduced exactly between nodes.
        let affine: Vec<f64> = (0..9).map(|i| 3.0 * (-2.0 + 0.5 * i as f64) + 1.0).collect();
        for &x in &[-1.9, -0.3, 0.1, 1.99] {
            assert!((g.interp1d(1, &affine, x).unwrap() - (3.0 * x + 1.0)).abs() < 1e-12);
        }
        // Outside the span the boundary value is used.
        assert_eq!(g.interp1d(1, &values, 5.0).unwrap(), 8.0);
    }

    #[test]
    fn interp_rejects_higher_dimension() {
        let g = truncated_grid();
        assert!(matches!(
            g.interp1d(0, &vec![0.0; 25], 0.1),
            Err(GridError::InterpolationDimension(2))
        ));
    }

    #[test]
    fn membership_matches_index_bounds() {
        let g = truncated_grid();
        // Slice 1 bound = floor(4/0.5) = 8 -> box edge at 4.25.
        assert!(g.contains(1, &[4.2, 0.0]));
        assert!(!g.contains(1, &[4.3, 0.0]));
        assert!(g.contains(1, &[-4.24, 0.0]));
        assert!(!g.contains(1, &[-4.26, 0.0]));
    }

    #[test]
    fn eta_and_unbounded_grids_are_rejected() {
        let mut spec = GridSpec::truncated(1, 0.1, 1.0, 2.0, 10, 1.0);
        spec.eta = 0.25;
        assert!(matches!(SpatialGrid::new(spec), Err(GridError::UnsupportedEta(_))));
        let spec = GridSpec::truncated(1, 0.1, 1.0, f64::INFINITY, 10, 1.0);
        assert!(matches!(SpatialGrid::new(spec), Err(GridError::UnboundedGrid)));
    }
}
