//! Optimal vector quantization of the d-dimensional standard Gaussian.
//!
//! A quantizer grid is a set of M points with weights approximating
//! N(0, I_d) by nearest-neighbor projection. Training runs a randomized
//! Lloyd procedure (batch centroid iterations on a fixed Monte Carlo
//! sample) followed by a competitive-learning refinement pass; weights are
//! then estimated by cell counting on an independent sample. Training is
//! fully deterministic given `(seed, schedule)` and single-threaded, so a
//! grid can be reproduced bit-for-bit anywhere.
//!
//! The solver consumes the grid through `scaled_increment`: the quantized
//! Brownian increment over a step of length `h` is
//! `sqrt(h) * nearest(grid, w / sqrt(h))`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fmt_f64;

#[derive(Debug, Error)]
pub enum QuantizerError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("quantizer cell {0} received no samples; increase weight_samples")]
    EmptyCell(usize),
    #[error("{path}: io error: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: parse error in {field}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        field: &'static str,
        msg: String,
    },
    #[error("invalid quantizer grid: {0}")]
    Validation(String),
}

/// Parameters of the training run. Part of the on-disk cache key.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSchedule {
    /// Size of the fixed Monte Carlo sample the Lloyd iterations run on.
    pub lloyd_samples: usize,
    /// Maximum number of batch centroid iterations.
    pub lloyd_max_iters: usize,
    /// Stop Lloyd when the largest centroid move falls below this value.
    pub lloyd_tol: f64,
    /// Number of competitive-learning refinement samples.
    pub clvq_samples: usize,
    /// Learning rate schedule gamma_t = rate_a / (1 + rate_b * t).
    pub clvq_rate_a: f64,
    pub clvq_rate_b: f64,
    /// Independent sample size for the cell-weight estimation.
    pub weight_samples: usize,
    /// Independent sample size for the stored squared 2-distortion.
    pub distortion_samples: usize,
}

impl Default for TrainingSchedule {
    fn default() -> Self {
        TrainingSchedule {
            lloyd_samples: 200_000,
            lloyd_max_iters: 120,
            lloyd_tol: 1e-7,
            clvq_samples: 1_000_000,
            clvq_rate_a: 0.02,
            clvq_rate_b: 1e-4,
            weight_samples: 2_000_000,
            distortion_samples: 1_000_000,
        }
    }
}

impl TrainingSchedule {
    /// Stable content hash used in cache file names.
    pub fn digest(&self) -> String {
        let mut s = String::new();
        write!(
            s,
            "{};{};{};{};{};{};{};{}",
            self.lloyd_samples,
            self.lloyd_max_iters,
            fmt_f64(self.lloyd_tol),
            self.clvq_samples,
            fmt_f64(self.clvq_rate_a),
            fmt_f64(self.clvq_rate_b),
            self.weight_samples,
            self.distortion_samples
        )
        .unwrap();
        let hash = Sha256::digest(s.as_bytes());
        hash[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// M points with weights approximating N(0, I_d), plus the measured
/// squared 2-distortion of the projection.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerGrid {
    dimension: usize,
    /// Flattened row-major storage: point i occupies `[i*d, (i+1)*d)`.
    points: Vec<f64>,
    weights: Vec<f64>,
    distortion2: f64,
}

impl QuantizerGrid {
    /// Builds a grid from raw parts, checking the structural invariants:
    /// weights sum to 1 within 1e-12 and are positive, points are pairwise
    /// distinct, shapes are consistent.
    pub fn new(
        dimension: usize,
        points: Vec<f64>,
        weights: Vec<f64>,
        distortion2: f64,
    ) -> Result<Self, QuantizerError> {
        if dimension == 0 {
            return Err(QuantizerError::Validation("dimension must be positive".into()));
        }
        let m = weights.len();
        if m == 0 {
            return Err(QuantizerError::Validation("grid must contain at least one point".into()));
        }
        if points.len() != m * dimension {
            return Err(QuantizerError::Validation(format!(
                "expected {} coordinates for {} points in dimension {}, got {}",
                m * dimension,
                m,
                dimension,
                points.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(QuantizerError::Validation("non-finite point coordinate".into()));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(QuantizerError::Validation(format!(
                "weights sum to {sum}, expected 1 within 1e-12"
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(QuantizerError::Validation("all weights must be positive".into()));
        }
        if !(distortion2 >= 0.0) {
            return Err(QuantizerError::Validation("distortion2 must be nonnegative".into()));
        }
        for i in 0..m {
            for j in (i + 1)..m {
                if points[i * dimension..(i + 1) * dimension]
                    == points[j * dimension..(j + 1) * dimension]
                {
                    return Err(QuantizerError::Validation(format!(
                        "points {i} and {j} are identical"
                    )));
                }
            }
        }
        Ok(QuantizerGrid { dimension, points, weights, distortion2 })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Number of points M.
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Row-major flattened points, point i at `[i*d, (i+1)*d)`.
    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn distortion2(&self) -> f64 {
        self.distortion2
    }

    /// Weighted mean of the grid, `sum_i p_i y_i`. Near zero for a trained
    /// grid (the Gaussian is centered); its norm is the tolerance used by
    /// the gradient-centering checks.
    pub fn weighted_mean(&self) -> Vec<f64> {
        let d = self.dimension;
        let mut m = vec![0.0; d];
        for i in 0..self.len() {
            for j in 0..d {
                m[j] += self.weights[i] * self.points[i * d + j];
            }
        }
        m
    }

    /// Index and coordinates of the closest point in Euclidean distance;
    /// ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> (usize, &[f64]) {
        let idx = nearest_index(&self.points, self.dimension, v);
        (idx, self.point(idx))
    }

    /// Quantized Brownian increment: `sqrt(h) * nearest(w / sqrt(h))`.
    pub fn scaled_increment(&self, h: f64, w: &[f64]) -> Vec<f64> {
        assert!(h > 0.0, "step h must be positive");
        let rh = h.sqrt();
        let scaled: Vec<f64> = w.iter().map(|x| x / rh).collect();
        let (_, y) = self.nearest(&scaled);
        y.iter().map(|x| rh * x).collect()
    }

    /// Monte Carlo estimate of the p-distortion `||Z - G(Z)||_{L^p}`.
    /// Deterministic given the seed.
    pub fn distortion(&self, p: f64, samples: usize, seed: u64) -> f64 {
        assert!(p >= 1.0, "distortion order p must be >= 1");
        assert!(samples > 0);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = self.dimension;
        let mut buf = vec![0.0; d];
        let mut acc = 0.0;
        for _ in 0..samples {
            for slot in buf.iter_mut() {
                *slot = rng.sample(StandardNormal);
            }
            let idx = nearest_index(&self.points, d, &buf);
            let y = self.point(idx);
            let dist2: f64 = buf.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
            acc += dist2.powf(p / 2.0);
        }
        (acc / samples as f64).powf(1.0 / p)
    }

    /// Monte Carlo stationarity check: for every Voronoi cell, the
    /// distance between the point and the empirical conditional mean,
    /// minus three Monte Carlo standard errors of that mean. The maximum
    /// over cells is near or below zero for a stationary grid; cells with
    /// fewer than two samples are skipped.
    pub fn stationarity_excess(&self, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let d = self.dimension;
        let m = self.len();
        let mut sums = vec![0.0; m * d];
        let mut sq_sums = vec![0.0; m * d];
        let mut counts = vec![0usize; m];
        let mut buf = vec![0.0; d];
        for _ in 0..samples {
            for slot in buf.iter_mut() {
                *slot = rng.sample(StandardNormal);
            }
            let idx = nearest_index(&self.points, d, &buf);
            counts[idx] += 1;
            for j in 0..d {
                sums[idx * d + j] += buf[j];
                sq_sums[idx * d + j] += buf[j] * buf[j];
            }
        }
        let mut worst = f64::NEG_INFINITY;
        for i in 0..m {
            let n = counts[i] as f64;
            if counts[i] < 2 {
                continue;
            }
            let mut dist2 = 0.0;
            let mut se2 = 0.0;
            for j in 0..d {
                let mean = sums[i * d + j] / n;
                dist2 += (mean - self.points[i * d + j]).powi(2);
                let var = (sq_sums[i * d + j] / n - mean * mean).max(0.0);
                se2 += var / n;
            }
            worst = worst.max(dist2.sqrt() - 3.0 * se2.sqrt());
        }
        worst
    }

    /// Writes the grid in the text format: `d M`, then M lines of
    /// `y_1 .. y_d p_i`, then `distortion2 <value>`, all floats with 17
    /// significant digits.
    pub fn save(&self, path: &Path) -> Result<(), QuantizerError> {
        let mut out = String::new();
        let d = self.dimension;
        writeln!(out, "{} {}", d, self.len()).unwrap();
        for i in 0..self.len() {
            for j in 0..d {
                write!(out, "{} ", fmt_f64(self.points[i * d + j])).unwrap();
            }
            writeln!(out, "{}", fmt_f64(self.weights[i])).unwrap();
        }
        writeln!(out, "distortion2 {}", fmt_f64(self.distortion2)).unwrap();
        std::fs::write(path, out).map_err(|source| QuantizerError::Io {
            path: path.to_owned(),
            source,
        })
    }

    /// Reads a grid saved by [`QuantizerGrid::save`] and re-validates all
    /// structural invariants.
    pub fn load(path: &Path) -> Result<Self, QuantizerError> {
        let text = std::fs::read_to_string(path).map_err(|source| QuantizerError::Io {
            path: path.to_owned(),
            source,
        })?;
        let parse_err = |line: usize, field: &'static str, msg: String| QuantizerError::Parse {
            path: path.to_owned(),
            line,
            field,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "header", "empty file".into()))?;
        let mut it = header.split_whitespace();
        let d: usize = it
            .next()
            .ok_or_else(|| parse_err(1, "d", "missing".into()))?
            .parse()
            .map_err(|e| parse_err(1, "d", format!("{e}")))?;
        let m: usize = it
            .next()
            .ok_or_else(|| parse_err(1, "M", "missing".into()))?
            .parse()
            .map_err(|e| parse_err(1, "M", format!("{e}")))?;
        let mut points = Vec::with_capacity(m * d);
        let mut weights = Vec::with_capacity(m);
        for i in 0..m {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| parse_err(i + 2, "point", format!("expected {m} point lines")))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != d + 1 {
                return Err(parse_err(
                    lineno + 1,
                    "point",
                    format!("expected {} fields, got {}", d + 1, fields.len()),
                ));
            }
            for f in &fields[..d] {
                points.push(
                    f.parse::<f64>()
                        .map_err(|e| parse_err(lineno + 1, "coordinate", format!("{e}")))?,
                );
            }
            weights.push(
                fields[d]
                    .parse::<f64>()
                    .map_err(|e| parse_err(lineno + 1, "weight", format!("{e}")))?,
            );
        }
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| parse_err(m + 2, "distortion2", "missing final line".into()))?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("distortion2") => {}
            other => {
                return Err(parse_err(
                    lineno + 1,
                    "distortion2",
                    format!("expected 'distortion2', got {other:?}"),
                ))
            }
        }
        let distortion2: f64 = it
            .next()
            .ok_or_else(|| parse_err(lineno + 1, "distortion2", "missing value".into()))?
            .parse()
            .map_err(|e| parse_err(lineno + 1, "distortion2", format!("{e}")))?;
        QuantizerGrid::new(d, points, weights, distortion2)
    }
}

/// Linear-scan nearest neighbor with lowest-index tie break.
fn nearest_index(points: &[f64], d: usize, v: &[f64]) -> usize {
    debug_assert_eq!(v.len(), d);
    let m = points.len() / d;
    if d == 1 {
        let mut best = 0;
        let mut best_d = (v[0] - points[0]).abs();
        for i in 1..m {
            let dist = (v[0] - points[i]).abs();
            if dist < best_d {
                best_d = dist;
                best = i;
            }
        }
        return best;
    }
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for i in 0..m {
        let mut dist = 0.0;
        for j in 0..d {
            let t = v[j] - points[i * d + j];
            dist += t * t;
        }
        if dist < best_d {
            best_d = dist;
            best = i;
        }
    }
    best
}

/// Nearest-neighbor search over a codebook that is kept sorted in 1-D.
/// Falls back to the linear scan in higher dimension. Only used inside
/// training where the sorted order is maintained by construction.
struct CellLocator {
    midpoints: Vec<f64>,
}

impl CellLocator {
    fn build(points: &[f64], d: usize) -> Option<Self> {
        if d != 1 {
            return None;
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return None;
        }
        Some(CellLocator {
            midpoints: points.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect(),
        })
    }

    fn locate(&self, v: f64) -> usize {
        // v == midpoint is a tie; the left point has the lower index.
        self.midpoints.partition_point(|m| *m < v)
    }
}

fn assign(points: &[f64], d: usize, locator: Option<&CellLocator>, v: &[f64]) -> usize {
    match locator {
        Some(loc) => loc.locate(v[0]),
        None => nearest_index(points, d, v),
    }
}

/// Trains an M-point quantizer of N(0, I_d). Deterministic given
/// `(seed, schedule)`; single-threaded by contract.
pub fn train(
    dimension: usize,
    m: usize,
    seed: u64,
    schedule: &TrainingSchedule,
) -> Result<QuantizerGrid, QuantizerError> {
    if dimension == 0 {
        return Err(QuantizerError::InvalidParam("dimension must be positive".into()));
    }
    if m == 0 {
        return Err(QuantizerError::InvalidParam("M must be positive".into()));
    }
    if m > schedule.lloyd_samples {
        return Err(QuantizerError::InvalidParam(format!(
            "M = {} exceeds the Lloyd sample count {}",
            m, schedule.lloyd_samples
        )));
    }
    let d = dimension;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);

    // Fixed Monte Carlo sample for the batch Lloyd phase.
    let n = schedule.lloyd_samples;
    let mut sample = vec![0.0f64; n * d];
    for slot in sample.iter_mut() {
        *slot = rng.sample(StandardNormal);
    }

    let mut points = initial_codebook(&sample, n, d, m, &mut rng);
    sort_codebook(&mut points, d);

    lloyd(&mut points, &sample, n, d, schedule);
    clvq(&mut points, d, schedule, &mut rng);
    sort_codebook(&mut points, d);

    // Cell weights from an independent sample.
    let mut counts = vec![0usize; m];
    let locator = CellLocator::build(&points, d);
    let mut buf = vec![0.0; d];
    for _ in 0..schedule.weight_samples {
        for slot in buf.iter_mut() {
            *slot = rng.sample(StandardNormal);
        }
        counts[assign(&points, d, locator.as_ref(), &buf)] += 1;
    }
    if let Some(i) = counts.iter().position(|&c| c == 0) {
        return Err(QuantizerError::EmptyCell(i));
    }
    let total: f64 = schedule.weight_samples as f64;
    let mut weights: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let sum: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= sum;
    }

    // Center the codebook on its trained weighted mean: the target law is
    // centered, and this pins the M = 1 grid at the exact origin.
    let mut mean = vec![0.0; d];
    for i in 0..m {
        for j in 0..d {
            mean[j] += weights[i] * points[i * d + j];
        }
    }
    for i in 0..m {
        for j in 0..d {
            points[i * d + j] -= mean[j];
        }
    }

    // Squared 2-distortion on a third independent sample.
    let locator = CellLocator::build(&points, d);
    let mut acc = 0.0;
    for _ in 0..schedule.distortion_samples {
        for slot in buf.iter_mut() {
            *slot = rng.sample(StandardNormal);
        }
        let idx = assign(&points, d, locator.as_ref(), &buf);
        for j in 0..d {
            let t = buf[j] - points[idx * d + j];
            acc += t * t;
        }
    }
    let distortion2 = acc / schedule.distortion_samples as f64;

    QuantizerGrid::new(d, points, weights, distortion2)
}

/// Initial codebook. In 1-D the asymptotically optimal point density is
/// proportional to the cube root of the Gaussian density, which is the
/// N(0, 3) profile; seeding from sqrt(3)-scaled sample quantiles puts the
/// tail points where Lloyd wants them (plain quantiles leave the tails
/// underpopulated and Lloyd recovers only very slowly). Higher dimensions
/// use k-means++ style seeding.
fn initial_codebook(sample: &[f64], n: usize, d: usize, m: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    if d == 1 {
        let mut sorted = sample.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut points: Vec<f64> = (0..m)
            .map(|i| {
                let q = (i as f64 + 0.5) / m as f64;
                3f64.sqrt() * sorted[((q * n as f64) as usize).min(n - 1)]
            })
            .collect();
        points.dedup();
        while points.len() < m {
            points.push(points.last().unwrap() + 1e-6);
        }
        return points;
    }
    let mut points = Vec::with_capacity(m * d);
    let first = rng.gen_range(0..n);
    points.extend_from_slice(&sample[first * d..(first + 1) * d]);
    let mut dist2 = vec![f64::INFINITY; n];
    for k in 1..m {
        let last = &points[(k - 1) * d..k * d];
        let mut total = 0.0;
        for i in 0..n {
            let mut t = 0.0;
            for j in 0..d {
                let e = sample[i * d + j] - last[j];
                t += e * e;
            }
            if t < dist2[i] {
                dist2[i] = t;
            }
            total += dist2[i];
        }
        let threshold = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        let mut chosen = n - 1;
        for (i, &w) in dist2.iter().enumerate() {
            acc += w;
            if acc >= threshold {
                chosen = i;
                break;
            }
        }
        points.extend_from_slice(&sample[chosen * d..(chosen + 1) * d]);
    }
    points
}

fn sort_codebook(points: &mut Vec<f64>, d: usize) {
    let m = points.len() / d;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        points[a * d..(a + 1) * d]
            .partial_cmp(&points[b * d..(b + 1) * d])
            .unwrap()
    });
    let mut out = Vec::with_capacity(points.len());
    for &i in &order {
        out.extend_from_slice(&points[i * d..(i + 1) * d]);
    }
    *points = out;
}

/// Batch Lloyd iterations on the fixed sample: assign, recompute centroid
/// means, re-seed any empty cell with the sample point farthest from its
/// centroid.
fn lloyd(points: &mut [f64], sample: &[f64], n: usize, d: usize, schedule: &TrainingSchedule) {
    let m = points.len() / d;
    let mut sums = vec![0.0f64; m * d];
    let mut counts = vec![0usize; m];
    for _ in 0..schedule.lloyd_max_iters {
        sums.iter_mut().for_each(|s| *s = 0.0);
        counts.iter_mut().for_each(|c| *c = 0);
        let locator = CellLocator::build(points, d);
        let mut far_idx = 0usize;
        let mut far_dist = -1.0;
        for i in 0..n {
            let v = &sample[i * d..(i + 1) * d];
            let idx = assign(points, d, locator.as_ref(), v);
            counts[idx] += 1;
            let mut dist = 0.0;
            for j in 0..d {
                sums[idx * d + j] += v[j];
                let t = v[j] - points[idx * d + j];
                dist += t * t;
            }
            if dist > far_dist {
                far_dist = dist;
                far_idx = i;
            }
        }
        let mut max_move2 = 0.0f64;
        for c in 0..m {
            if counts[c] == 0 {
                for j in 0..d {
                    points[c * d + j] = sample[far_idx * d + j];
                }
                max_move2 = f64::INFINITY;
                continue;
            }
            let mut move2 = 0.0;
            for j in 0..d {
                let new = sums[c * d + j] / counts[c] as f64;
                let t = new - points[c * d + j];
                move2 += t * t;
                points[c * d + j] = new;
            }
            max_move2 = max_move2.max(move2);
        }
        if max_move2.sqrt() < schedule.lloyd_tol {
            break;
        }
    }
}

/// Competitive-learning refinement: move the winning point toward each
/// fresh sample with a decaying step.
fn clvq(points: &mut [f64], d: usize, schedule: &TrainingSchedule, rng: &mut ChaCha12Rng) {
    let mut buf = vec![0.0; d];
    for t in 0..schedule.clvq_samples {
        for slot in buf.iter_mut() {
            *slot = rng.sample(StandardNormal);
        }
        let idx = nearest_index(points, d, &buf);
        let gamma = schedule.clvq_rate_a / (1.0 + schedule.clvq_rate_b * t as f64);
        for j in 0..d {
            points[idx * d + j] += gamma * (buf[j] - points[idx * d + j]);
        }
    }
}

/// Returns the cached grid for `(d, M, seed, schedule)` if present under
/// `cache_dir`, otherwise trains, stores and returns it. The second value
/// is true on a cache hit.
pub fn cached_train(
    cache_dir: &Path,
    dimension: usize,
    m: usize,
    seed: u64,
    schedule: &TrainingSchedule,
) -> Result<(QuantizerGrid, bool), QuantizerError> {
    let path = cache_path(cache_dir, dimension, m, seed, schedule);
    if path.is_file() {
        return Ok((QuantizerGrid::load(&path)?, true));
    }
    let grid = train(dimension, m, seed, schedule)?;
    std::fs::create_dir_all(cache_dir).map_err(|source| QuantizerError::Io {
        path: cache_dir.to_owned(),
        source,
    })?;
    grid.save(&path)?;
    Ok((grid, false))
}

/// Cache file name for a training configuration.
pub fn cache_path(
    cache_dir: &Path,
    dimension: usize,
    m: usize,
    seed: u64,
    schedule: &TrainingSchedule,
) -> PathBuf {
    cache_dir.join(format!(
        "gaussian_d{}_m{}_seed{}_{}.quant",
        dimension,
        m,
        seed,
        schedule.digest()
    ))
}
