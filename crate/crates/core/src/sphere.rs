//! The discretized direction sphere: a spherical Fibonacci lattice of admissible
//! movement directions, label encoding on it, geodesic response smoothing,
//! entropy, and constrained peak picking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_between, UnitDirection, Vec3};

/// Default lattice size.
pub const DEFAULT_DIRECTIONS: usize = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct SphereGrid {
    directions: Vec<UnitDirection>,
}

impl SphereGrid {
    pub fn fibonacci(n: usize) -> Result<Self> {
        build_fibonacci_grid(n)
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[UnitDirection] {
        &self.directions
    }

    pub fn direction(&self, i: usize) -> UnitDirection {
        self.directions[i]
    }
}

/// Point `i` sits at height `1 - (2i+1)/n` and azimuth `2*pi*i/phi`.
pub fn build_fibonacci_grid(n: usize) -> Result<SphereGrid> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "sphere grid needs at least 2 points, got {n}"
        )));
    }
    let golden = (1.0 + 5f64.sqrt()) / 2.0;
    let directions = (0..n)
        .map(|i| {
            let z = 1.0 - (2 * i + 1) as f64 / n as f64;
            let ring = (1.0 - z * z).max(0.0).sqrt();
            let azimuth = 2.0 * std::f64::consts::PI * (i as f64 / golden).fract();
            let v = Vec3::new(ring * azimuth.cos(), ring * azimuth.sin(), z);
            UnitDirection::new_unchecked(v)
        })
        .collect();
    Ok(SphereGrid { directions })
}

/// Index of the grid direction with the largest dot product against `d`;
/// ties go to the lowest index.
pub fn nearest_grid_index(grid: &SphereGrid, d: UnitDirection) -> usize {
    let mut best = 0;
    let mut best_dot = f64::NEG_INFINITY;
    for (i, g) in grid.directions.iter().enumerate() {
        let dot = g.dot(d);
        if dot > best_dot {
            best_dot = dot;
            best = i;
        }
    }
    best
}

/// A normalized multi-hot target over the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionLabel {
    weights: Vec<f64>,
}

impl DirectionLabel {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn hot_indices(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn encode_directions(grid: &SphereGrid, dirs: &[UnitDirection]) -> Result<DirectionLabel> {
    if dirs.is_empty() || dirs.len() > 3 {
        return Err(Error::InvalidArgument(format!(
            "expected 1-3 label directions, got {}",
            dirs.len()
        )));
    }
    let mut weights = vec![0.0; grid.len()];
    for &d in dirs {
        weights[nearest_grid_index(grid, d)] += 1.0;
    }
    let total = dirs.len() as f64;
    for w in &mut weights {
        *w /= total;
    }
    Ok(DirectionLabel { weights })
}

/// A probability vector over the grid directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionResponse {
    probs: Vec<f64>,
}

impl DirectionResponse {
    /// Validates non-negativity and unit mass (within 1e-6).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidArgument("empty response".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidArgument(
                "response entries must be finite and non-negative".into(),
            ));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "response sums to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes arbitrary non-negative weights to unit mass.
    pub fn from_weights(mut w: Vec<f64>) -> Result<Self> {
        let sum: f64 = w.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "cannot normalize weights with total {sum}"
            )));
        }
        for v in &mut w {
            *v /= sum;
        }
        Self::new(w)
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn one_hot(n: usize, k: usize) -> Self {
        let mut probs = vec![0.0; n];
        probs[k] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Sparse Gaussian kernel over geodesic angles between grid points,
/// truncated at three standard deviations.
#[derive(Debug, Clone)]
pub struct SmoothingKernel {
    sigma_deg: f64,
    rows: Vec<Vec<(u32, f64)>>,
}

impl SmoothingKernel {
    pub fn new(grid: &SphereGrid, sigma_deg: f64) -> Result<Self> {
        if !(sigma_deg > 0.0 && sigma_deg.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing sigma must be positive, got {sigma_deg}"
            )));
        }
        let cutoff = 3.0 * sigma_deg;
        let cos_cutoff = cutoff.to_radians().cos();
        let dirs = grid.directions();
        let rows = dirs
            .iter()
            .map(|&a| {
                dirs.iter()
                    .enumerate()
                    // Cheap prefilter on the dot product before taking the arccos.
                    .filter(|(_, &b)| a.dot(b) >= cos_cutoff - 1e-12)
                    .filter_map(|(j, &b)| {
                        let theta = angle_between(a, b);
                        (theta <= cutoff).then(|| {
                            (j as u32, (-theta * theta / (2.0 * sigma_deg * sigma_deg)).exp())
                        })
                    })
                    .collect()
            })
            .collect();
        Ok(Self { sigma_deg, rows })
    }

    pub fn sigma_deg(&self) -> f64 {
        self.sigma_deg
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn apply(&self, r: &DirectionResponse) -> Result<DirectionResponse> {
        if r.len() != self.rows.len() {
            return Err(Error::InvalidArgument(format!(
                "response has {} entries, kernel expects {}",
                r.len(),
                self.rows.len()
            )));
        }
        let p = r.probs();
        let mut out: Vec<f64> = self
            .rows
            .iter()
            .map(|row| {
                let (num, den) = row.iter().fold((0.0, 0.0), |(n, d), &(j, w)| {
                    (n + w * p[j as usize], d + w)
                });
                num / den
            })
            .collect();
        let total: f64 = out.iter().sum();
        for v in &mut out {
            *v /= total;
        }
        Ok(DirectionResponse { probs: out })
    }
}

pub fn smooth_response(
    grid: &SphereGrid,
    r: &DirectionResponse,
    sigma_deg: f64,
) -> Result<DirectionResponse> {
    SmoothingKernel::new(grid, sigma_deg)?.apply(r)
}

/// How entropy is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyScale {
    /// Shannon entropy divided by `ln N`, in `[0, 1]`.
    #[default]
    Normalized,
    /// Raw Shannon entropy in nats.
    Nats,
}

pub fn shannon_entropy(r: &DirectionResponse) -> f64 {
    -r.probs()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn normalized_entropy(r: &DirectionResponse) -> f64 {
    let n = r.len();
    if n < 2 {
        return 0.0;
    }
    let p = r.probs();
    // A constant vector is the maximum exactly; summing 1000 rounded terms is not.
    if p.iter().all(|&v| v == p[0]) {
        return 1.0;
    }
    (shannon_entropy(r) / (n as f64).ln()).clamp(0.0, 1.0)
}

pub fn entropy(r: &DirectionResponse, scale: EntropyScale) -> f64 {
    match scale {
        EntropyScale::Normalized => normalized_entropy(r),
        EntropyScale::Nats => shannon_entropy(r),
    }
}

/// Angular constraints used when picking continuation directions (degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakConstraints {
    /// D1 must be strictly closer than this to the previous direction.
    pub forward_max_deg: f64,
    /// D2 must be at least this far from D1.
    pub opposite_min_deg: f64,
    /// D3 must be at least this far from both D1 and D2.
    pub branch_min_deg: f64,
}

impl Default for PeakConstraints {
    fn default() -> Self {
        Self {
            forward_max_deg: 60.0,
            opposite_min_deg: 110.0,
            branch_min_deg: 40.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub index: usize,
    pub direction: UnitDirection,
}

fn constrained_argmax(
    grid: &SphereGrid,
    probs: &[f64],
    admit: impl Fn(UnitDirection) -> bool,
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &d) in grid.directions().iter().enumerate() {
        if !admit(d) {
            continue;
        }
        match best {
            Some((_, v)) if probs[i] <= v => {}
            _ => best = Some((i, probs[i])),
        }
    }
    best.map(|(i, _)| i)
}

/// Picks D1, D2 and (for bifurcations) D3 from an already smoothed response.
pub fn detect_peaks(
    grid: &SphereGrid,
    r: &DirectionResponse,
    prev: Option<UnitDirection>,
    bifurcation: bool,
    c: &PeakConstraints,
) -> Result<Vec<Peak>> {
    if r.len() != grid.len() {
        return Err(Error::InvalidArgument(format!(
            "response has {} entries, grid has {}",
            r.len(),
            grid.len()
        )));
    }
    let p = r.probs();
    let empty = |what: &str| Error::DegenerateInput(format!("no grid point admissible for {what}"));

    let d1 = match prev {
        Some(prev) => constrained_argmax(grid, p, |d| angle_between(d, prev) < c.forward_max_deg),
        None => constrained_argmax(grid, p, |_| true),
    }
    .ok_or_else(|| empty("D1"))?;
    let g1 = grid.direction(d1);

    let d2 = constrained_argmax(grid, p, |d| angle_between(d, g1) >= c.opposite_min_deg)
        .ok_or_else(|| empty("D2"))?;
    let g2 = grid.direction(d2);

    let mut peaks = vec![
        Peak {
            index: d1,
            direction: g1,
        },
        Peak {
            index: d2,
            direction: g2,
        },
    ];
    if bifurcation {
        let d3 = constrained_argmax(grid, p, |d| {
            angle_between(d, g1) >= c.branch_min_deg && angle_between(d, g2) >= c.branch_min_deg
        })
        .ok_or_else(|| empty("D3"))?;
        peaks.push(Peak {
            index: d3,
            direction: grid.direction(d3),
        });
    }
    Ok(peaks)
}
