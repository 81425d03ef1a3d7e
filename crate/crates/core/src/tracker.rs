//! Breadth-first centerline tracking driven by a direction/stop predictor.
//!
//! Every queue entry carries a point, its segment, its parent point, a stop
//! counter and the direction it arrived from. An entry whose counter exceeds
//! `stop_counter_max` is discarded; otherwise the point is accepted and the
//! predictor is queried there. The smoothed direction response yields two
//! peaks (three when a bifurcation is predicted), each giving a candidate one
//! step away. Candidates within half a step of an accepted point are dropped.
//! A single survivor continues the segment, several survivors each open a new
//! segment. The counter grows while the stop probability or the direction
//! entropy is too high and resets otherwise.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{UnitDirection, Vec3, WorldPoint};
use crate::labeling::{sphere_crossings, EXIT_RADIUS};
use crate::network::{forward_dbc, forward_stc, Variant, Weights};
use crate::spatial::PointGrid;
use crate::sphere::{detect_peaks, normalized_entropy, DirectionResponse, PeakConstraints, SmoothingKernel, SphereGrid};
use crate::tree::{CenterlineTree, TreeIndex, Vessel};
use crate::volume::{extract_patch_pair, Volume};

#[derive(Debug, Clone, PartialEq)]
pub struct PredictorOutput {
    pub direction: DirectionResponse,
    pub bifurcation_prob: f64,
    pub stop_prob: f64,
}

impl PredictorOutput {
    pub fn new(direction: DirectionResponse, bifurcation_prob: f64, stop_prob: f64) -> Result<Self> {
        for (name, p) in [("bifurcation", bifurcation_prob), ("stop", stop_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} probability {p} outside [0, 1]")));
            }
        }
        Ok(Self {
            direction,
            bifurcation_prob,
            stop_prob,
        })
    }
}

/// Anything that can be queried for a prediction at a world point. Calls
/// must be pure: the tracker may issue them concurrently and in any order.
pub trait Predictor: Sync {
    fn predict(&self, p: WorldPoint) -> Result<PredictorOutput>;

    /// Number of directions in the responses this predictor produces.
    fn n_directions(&self) -> usize;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    pub step_size: f64,
    pub stop_counter_max: u32,
    pub dir_entropy_max: f64,
    pub stop_prob_max: f64,
    pub bifurcation_threshold: f64,
    pub peaks: PeakConstraints,
    pub smoothing_sigma_deg: f64,
    pub max_points: usize,
    /// Evaluate each round's predictions on the rayon pool.
    pub concurrent: bool,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            step_size: 1.0,
            stop_counter_max: 3,
            dir_entropy_max: 0.8,
            stop_prob_max: 0.3,
            bifurcation_threshold: 0.5,
            peaks: PeakConstraints::default(),
            smoothing_sigma_deg: 7.0,
            max_points: 20_000,
            concurrent: false,
        }
    }
}

impl TrackerConfig {
    pub fn revisit_distance(&self) -> f64 {
        0.5 * self.step_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_size", self.step_size),
            ("dir_entropy_max", self.dir_entropy_max),
            ("stop_prob_max", self.stop_prob_max),
            ("bifurcation_threshold", self.bifurcation_threshold),
            ("smoothing_sigma_deg", self.smoothing_sigma_deg),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.max_points == 0 {
            return Err(Error::InvalidArgument("max_points must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveEntry {
    pub point: WorldPoint,
    pub segment: usize,
    pub parent: Option<usize>,
    pub stop_counter: u32,
    pub prev_dir: Option<UnitDirection>,
}

/// One line of the tracking log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Diagnostic {
    Accepted {
        point: usize,
        segment: usize,
        position: [f64; 3],
        entropy: f64,
        stop_prob: f64,
        bifurcation_prob: f64,
        stop_counter: u32,
        candidates: usize,
        kept: usize,
    },
    Dropped {
        position: [f64; 3],
        segment: usize,
        stop_counter: u32,
    },
    Revisited {
        position: [f64; 3],
        segment: usize,
    },
    PredictorFailed {
        position: [f64; 3],
        segment: usize,
        message: String,
    },
    NoPeaks {
        point: usize,
        message: String,
    },
    Truncated {
        max_points: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackResult {
    pub tree: CenterlineTree,
    pub truncated: bool,
    pub diagnostics: Vec<Diagnostic>,
    pub predictor_calls: usize,
}

pub fn write_diagnostics(path: impl AsRef<Path>, diags: &[Diagnostic]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for d in diags {
        let line = serde_json::to_string(d).expect("diagnostic serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn candidate_points(p: WorldPoint, dirs: &[UnitDirection], step: f64) -> Result<Vec<WorldPoint>> {
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("step {step} must be positive")));
    }
    Ok(dirs.iter().map(|d| p + d.vec() * step).collect())
}

/// Reusable tracking state: the sphere grid and smoothing kernel are built
/// once per configuration.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    grid: SphereGrid,
    kernel: SmoothingKernel,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, n_directions: usize) -> Result<Self> {
        cfg.validate()?;
        let grid = SphereGrid::fibonacci(n_directions)?;
        let kernel = SmoothingKernel::new(&grid, cfg.smoothing_sigma_deg)?;
        Ok(Self { cfg, grid, kernel })
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn grid(&self) -> &SphereGrid {
        &self.grid
    }

    pub fn track<P: Predictor + ?Sized>(&self, predictor: &P, seeds: &[WorldPoint]) -> Result<TrackResult> {
        if seeds.is_empty() || seeds.len() > 2 {
            return Err(Error::InvalidArgument(format!("expected 1 or 2 seeds, got {}", seeds.len())));
        }
        if let Some(s) = seeds.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("seed {s:?} is not finite")));
        }
        if predictor.n_directions() != self.grid.len() {
            return Err(Error::Compatibility(format!(
                "predictor emits {} directions, tracker grid has {}",
                predictor.n_directions(),
                self.grid.len()
            )));
        }
        let cfg = &self.cfg;
        let mut tree = CenterlineTree::new();
        let mut accepted = PointGrid::new(cfg.step_size);
        let mut diagnostics = Vec::new();
        let mut queue: VecDeque<ActiveEntry> = seeds
            .iter()
            .map(|&point| ActiveEntry {
                point,
                segment: tree.new_segment(),
                parent: None,
                stop_counter: 0,
                prev_dir: None,
            })
            .collect();
        let mut calls = 0;
        let mut truncated = false;

        'rounds: while !queue.is_empty() {
            // Entries present at the start of a round are exactly the next
            // ones a serial FIFO loop would pop, and predictions depend only
            // on the point, so predicting them together and committing in
            // order reproduces the serial result bit for bit.
            let round: Vec<ActiveEntry> = queue.drain(..).collect();
            let live: Vec<&ActiveEntry> = round
                .iter()
                .filter(|e| {
                    let keep = e.stop_counter <= cfg.stop_counter_max;
                    if !keep {
                        diagnostics.push(Diagnostic::Dropped {
                            position: e.point.to_array(),
                            segment: e.segment,
                            stop_counter: e.stop_counter,
                        });
                    }
                    keep
                })
                .collect();
            let predict = |e: &&ActiveEntry| predictor.predict(e.point);
            let outputs: Vec<Result<PredictorOutput>> = if cfg.concurrent {
                live.par_iter().map(predict).collect()
            } else {
                live.iter().map(predict).collect()
            };
            calls += outputs.len();

            for (entry, out) in live.into_iter().zip(outputs) {
                // Another entry may have claimed this spot since the
                // candidate was generated.
                if accepted.any_within(entry.point, cfg.revisit_distance()) {
                    diagnostics.push(Diagnostic::Revisited {
                        position: entry.point.to_array(),
                        segment: entry.segment,
                    });
                    continue;
                }
                let out = match out {
                    Ok(o) => o,
                    Err(e) => {
                        diagnostics.push(Diagnostic::PredictorFailed {
                            position: entry.point.to_array(),
                            segment: entry.segment,
                            message: e.to_string(),
                        });
                        continue;
                    }
                };
                let id = tree.push_point(entry.point, None, entry.segment, entry.parent);
                accepted.insert(entry.point);

                let smoothed = self.kernel.apply(&out.direction)?;
                let entropy = normalized_entropy(&smoothed);
                let bifurcation = out.bifurcation_prob > cfg.bifurcation_threshold;
                let peaks = match detect_peaks(&self.grid, &smoothed, entry.prev_dir, bifurcation, &cfg.peaks) {
                    Ok(p) => p,
                    Err(e) => {
                        diagnostics.push(Diagnostic::NoPeaks {
                            point: id,
                            message: e.to_string(),
                        });
                        Vec::new()
                    }
                };
                let dirs: Vec<UnitDirection> = peaks.iter().map(|p| p.direction).collect();
                let cands = candidate_points(entry.point, &dirs, cfg.step_size)?;
                let counter = if out.stop_prob > cfg.stop_prob_max || entropy > cfg.dir_entropy_max {
                    entry.stop_counter + 1
                } else {
                    0
                };
                let survivors: Vec<(WorldPoint, UnitDirection)> = cands
                    .iter()
                    .zip(&dirs)
                    .filter(|(c, _)| !accepted.any_within(**c, cfg.revisit_distance()))
                    .map(|(&c, &d)| (c, d))
                    .collect();
                diagnostics.push(Diagnostic::Accepted {
                    point: id,
                    segment: entry.segment,
                    position: entry.point.to_array(),
                    entropy,
                    stop_prob: out.stop_prob,
                    bifurcation_prob: out.bifurcation_prob,
                    stop_counter: counter,
                    candidates: cands.len(),
                    kept: survivors.len(),
                });

                if tree.len() >= cfg.max_points {
                    truncated = true;
                    diagnostics.push(Diagnostic::Truncated {
                        max_points: cfg.max_points,
                    });
                    break 'rounds;
                }

                let single = survivors.len() == 1;
                for (c, d) in survivors {
                    queue.push_back(ActiveEntry {
                        point: c,
                        segment: if single { entry.segment } else { tree.new_segment() },
                        parent: Some(id),
                        stop_counter: counter,
                        prev_dir: Some(d),
                    });
                }
            }
        }
        tree.compact_segments();
        Ok(TrackResult {
            tree,
            truncated,
            diagnostics,
            predictor_calls: calls,
        })
    }
}

/// Tracks from `seeds` with a fresh [`Tracker`].
pub fn track<P: Predictor + ?Sized>(predictor: &P, seeds: &[WorldPoint], cfg: &TrackerConfig) -> Result<TrackResult> {
    Tracker::new(cfg.clone(), predictor.n_directions())?.track(predictor, seeds)
}

/// Ground-truth predictor built from a reference tree.
///
/// Directions point at the places where the reference centerline leaves a
/// 1.5 mm sphere around the query point (around its projection onto the tree
/// when the point itself is farther than that), each drawn as a bump
/// `exp(kappa * (dot - 1))` on the sphere grid. When a vessel end lies inside
/// the sphere, a bump toward that end is added. The stop probability is high
/// outside the lumen and within 1.5 mm of a vessel end.
pub struct OraclePredictor<'a> {
    index: TreeIndex<'a>,
    terminals: Vec<usize>,
    grid: SphereGrid,
    kappa: f64,
    noise: f64,
}

impl<'a> OraclePredictor<'a> {
    pub fn new(tree: &'a CenterlineTree, n_directions: usize, kappa: f64, noise: f64) -> Result<Self> {
        if tree.is_empty() {
            return Err(Error::InvalidArgument("oracle needs a non-empty tree".into()));
        }
        if !(kappa > 0.0) || !(0.0..=1.0).contains(&noise) {
            return Err(Error::InvalidArgument(format!(
                "kappa {kappa} must be positive and noise {noise} in [0, 1]"
            )));
        }
        let mut terminals = tree.leaf_endpoints();
        terminals.extend(tree.ostia());
        Ok(Self {
            index: TreeIndex::new(tree),
            terminals,
            grid: SphereGrid::fibonacci(n_directions)?,
            kappa,
            noise,
        })
    }

    fn bumps(&self, exits: &[UnitDirection]) -> DirectionResponse {
        let n = self.grid.len();
        let mut w: Vec<f64> = self
            .grid
            .directions()
            .iter()
            .map(|g| exits.iter().map(|e| (self.kappa * (g.dot(*e) - 1.0)).exp()).sum())
            .collect();
        let s: f64 = w.iter().sum();
        for v in &mut w {
            *v = (1.0 - self.noise) * *v / s + self.noise / n as f64;
        }
        DirectionResponse::from_weights(w).expect("positive weights")
    }
}

impl Predictor for OraclePredictor<'_> {
    fn predict(&self, p: WorldPoint) -> Result<PredictorOutput> {
        let n = self.grid.len();
        let tree = self.index.tree();
        let proj = self.index.project(p).expect("tree is non-empty");
        if proj.distance > 2.0 * EXIT_RADIUS {
            return PredictorOutput::new(DirectionResponse::uniform(n), 0.1, 0.9);
        }
        let local_radius = proj.radius.unwrap_or(EXIT_RADIUS);
        let near_end = |q: WorldPoint| {
            self.terminals
                .iter()
                .map(|&t| tree.position(t))
                .filter(|e| e.distance(q) < EXIT_RADIUS)
                .min_by(|a, b| a.distance(q).total_cmp(&b.distance(q)))
        };
        let stop = if proj.distance > local_radius || near_end(proj.position).is_some() {
            0.9
        } else {
            0.1
        };
        let center = if proj.distance < EXIT_RADIUS { p } else { proj.position };
        match sphere_crossings(&self.index, center, EXIT_RADIUS) {
            Ok(mut exits) => {
                let bif = if exits.len() == 3 { 0.9 } else { 0.1 };
                // With a vessel end inside the sphere the only exit points
                // back; aim at the end itself until it is reached.
                if exits.len() == 1 {
                    if let Some(end) = near_end(center).filter(|e| e.distance(center) > 0.5) {
                        exits.push(UnitDirection::new(end - center)?);
                    }
                }
                PredictorOutput::new(self.bumps(&exits), bif, stop)
            }
            Err(_) => PredictorOutput::new(DirectionResponse::uniform(n), 0.1, 0.9),
        }
    }

    fn n_directions(&self) -> usize {
        self.grid.len()
    }
}

/// Predictor backed by the direction and stop networks on a volume. Patches
/// are sampled axis-aligned around the query point.
pub struct NetworkPredictor<'a> {
    volume: &'a Volume,
    direction: &'a Weights,
    stop: &'a Weights,
}

impl<'a> NetworkPredictor<'a> {
    pub fn new(volume: &'a Volume, direction: &'a Weights, stop: &'a Weights) -> Result<Self> {
        if direction.variant() != Variant::Dbc || stop.variant() != Variant::Stc {
            return Err(Error::InvalidArgument(
                "expected direction weights then stop weights".into(),
            ));
        }
        Ok(Self { volume, direction, stop })
    }
}

impl Predictor for NetworkPredictor<'_> {
    fn predict(&self, p: WorldPoint) -> Result<PredictorOutput> {
        let pair = extract_patch_pair(self.volume, p, &crate::geometry::EulerRotation::IDENTITY);
        let d = forward_dbc(self.direction, &pair)?;
        let s = forward_stc(self.stop, &pair)?;
        PredictorOutput::new(d.direction, d.bifurcation_prob, s)
    }

    fn n_directions(&self) -> usize {
        self.direction.arch().n_directions
    }
}

pub const SELECTION_REACH: f64 = 5.0;

/// Path from `ostium` to the tracked point nearest `selection`, among points
/// grown from that ostium.
pub fn extract_vessel(tree: &CenterlineTree, ostium: usize, selection: WorldPoint) -> Result<Vessel> {
    if tree.is_empty() {
        return Err(Error::InvalidArgument("tree is empty".into()));
    }
    if ostium >= tree.len() || tree.point(ostium).parent.is_some() {
        return Err(Error::InvalidArgument(format!("point {ostium} is not a root")));
    }
    let mut root = vec![0; tree.len()];
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in tree.points().iter().enumerate() {
        root[i] = p.parent.map_or(i, |q| root[q]);
        if root[i] != ostium {
            continue;
        }
        let d = p.position.distance(selection);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    match best {
        Some((i, d)) if d <= SELECTION_REACH => Ok(Vessel::from_tree_path(tree, &tree.path_to(i))),
        Some((_, d)) => Err(Error::NotFound(format!(
            "nearest tracked point is {d:.2} mm from the selection (limit {SELECTION_REACH} mm)"
        ))),
        None => Err(Error::NotFound("ostium has no tracked points".into())),
    }
}

/// Root of `tree` closest to `p`.
pub fn nearest_root(tree: &CenterlineTree, p: Vec3) -> Option<usize> {
    tree.ostia()
        .iter()
        .copied()
        .min_by(|&a, &b| tree.position(a).distance(p).total_cmp(&tree.position(b).distance(p)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::angle_between;
    use crate::phantom::{generate_tree, TreeSpec};
    use crate::sphere::smooth_response;

    fn tube(len_mm: f64) -> CenterlineTree {
        let mut t = CenterlineTree::new();
        let s = t.new_segment();
        let mut prev = None;
        let n = (len_mm / 0.5) as usize;
        for k in 0..=n {
            prev = Some(t.push_point(Vec3::new(0.0, 0.0, k as f64 * 0.5), Some(1.5), s, prev));
        }
        t
    }

    #[test]
    fn candidate_examples() {
        let c = candidate_points(Vec3::ZERO, &[UnitDirection::X], 1.0).unwrap();
        assert_eq!(c, vec![Vec3::new(1.0, 0.0, 0.0)]);
        let c = candidate_points(Vec3::new(1.0, 2.0, 3.0), &[UnitDirection::Z, -UnitDirection::Z], 0.5).unwrap();
        assert_eq!(c, vec![Vec3::new(1.0, 2.0, 3.5), Vec3::new(1.0, 2.0, 2.5)]);
        assert!(candidate_points(Vec3::ZERO, &[UnitDirection::X], 0.0).is_err());
    }

    /// Scripted predictor: a tight bump along +x and -x, with the stop
    /// probability read from a per-x-position script.
    struct Scripted {
        grid: SphereGrid,
        stops: Vec<bool>,
    }

    impl Predictor for Scripted {
        fn predict(&self, p: WorldPoint) -> Result<PredictorOutput> {
            let k = p.x.round() as i64;
            let stop = usize::try_from(k).ok().and_then(|k| self.stops.get(k)).copied().unwrap_or(true);
            let w = self
                .grid
                .directions()
                .iter()
                .map(|g| (50.0 * (g.vec().x.abs() - 1.0)).exp())
                .collect();
            PredictorOutput::new(DirectionResponse::from_weights(w)?, 0.0, if stop { 0.9 } else { 0.0 })
        }

        fn n_directions(&self) -> usize {
            self.grid.len()
        }
    }

    fn scripted(stops: &[bool]) -> TrackResult {
        let p = Scripted {
            grid: SphereGrid::fibonacci(1000).unwrap(),
            stops: stops.to_vec(),
        };
        track(&p, &[Vec3::ZERO], &TrackerConfig::default()).unwrap()
    }

    /// Points of the chain heading to +x.
    fn forward_chain(r: &TrackResult) -> Vec<WorldPoint> {
        let mut xs: Vec<WorldPoint> = r.tree.points().iter().map(|p| p.position).filter(|p| p.x >= -0.01).collect();
        xs.sort_by(|a, b| a.x.total_cmp(&b.x));
        xs
    }

    #[test]
    fn stop_counter_terminates_after_four() {
        let r = scripted(&[true; 50]);
        // Both directions from the seed, each chain ending after
        // stop_counter_max + 1 accepted points.
        let fwd = forward_chain(&r);
        assert_eq!(fwd.len(), 4);
        assert_eq!(r.tree.len(), 7);
        assert!(!r.truncated);
    }

    #[test]
    fn non_stop_step_resets_counter() {
        // S S N S S S S ... along +x: the reset at x = 2 restarts the run,
        // so the chain holds x = 0..=6.
        let mut s = vec![true; 50];
        s[2] = false;
        let r = scripted(&s);
        let fwd = forward_chain(&r);
        assert_eq!(fwd.len(), 7);
        for (k, p) in fwd.iter().enumerate() {
            assert!((p.x - k as f64).abs() < 0.06, "{p:?}");
        }
    }

    struct Uniform(usize);

    impl Predictor for Uniform {
        fn predict(&self, _: WorldPoint) -> Result<PredictorOutput> {
            PredictorOutput::new(DirectionResponse::uniform(self.0), 0.0, 0.0)
        }

        fn n_directions(&self) -> usize {
            self.0
        }
    }

    #[test]
    fn uniform_response_stops_every_chain() {
        let r = track(&Uniform(1000), &[Vec3::ZERO], &TrackerConfig::default()).unwrap();
        // Every root-to-leaf chain accepts exactly stop_counter_max + 1 points.
        for leaf in r.tree.leaf_endpoints() {
            assert_eq!(r.tree.path_to(leaf).len(), 4);
        }
        assert_eq!(r.predictor_calls, r.tree.len());
    }

    #[test]
    fn rejects_mismatched_direction_count() {
        let e = Tracker::new(TrackerConfig::default(), 1000)
            .unwrap()
            .track(&Uniform(500), &[Vec3::ZERO]);
        assert!(matches!(e, Err(Error::Compatibility(_))));
    }

    #[test]
    fn consecutive_points_are_one_step_apart() {
        let t = generate_tree(&TreeSpec {
            depth: 1,
            seed: 4,
            ..TreeSpec::default()
        })
        .unwrap();
        let o = OraclePredictor::new(&t, 1000, 50.0, 0.0).unwrap();
        let r = track(&o, &[t.position(0)], &TrackerConfig::default()).unwrap();
        r.tree.validate(false).unwrap();
        for p in r.tree.points() {
            if let Some(q) = p.parent {
                assert!((p.position.distance(r.tree.position(q)) - 1.0).abs() < 1e-9);
            }
        }
        // No two accepted points are closer than the revisit distance unless
        // linked.
        let g = PointGrid::from_points(1.0, r.tree.points().iter().map(|p| p.position));
        for (i, p) in r.tree.points().iter().enumerate() {
            g.for_each_within(p.position, 0.5, |j, _| {
                if j != i {
                    let linked = p.parent == Some(j) || r.tree.point(j).parent == Some(i);
                    assert!(linked, "points {i} and {j} too close");
                }
            });
        }
    }

    #[test]
    fn straight_tube_is_followed() {
        let t = tube(30.0);
        let o = OraclePredictor::new(&t, 1000, 50.0, 0.0).unwrap();
        let r = track(&o, &[Vec3::ZERO], &TrackerConfig::default()).unwrap();
        let idx = TreeIndex::new(&t);
        let v = extract_vessel(&r.tree, 0, Vec3::new(0.0, 0.0, 30.0)).unwrap();
        let close = v.points.iter().filter(|&&p| idx.project(p).unwrap().distance <= 0.5).count();
        assert!(close as f64 >= 0.95 * v.points.len() as f64);
        assert!(v.points.last().unwrap().distance(Vec3::new(0.0, 0.0, 30.0)) < 1.5);
        // Tracking dies out within stop_counter_max steps past the end.
        let far_end = r.tree.points().iter().map(|p| p.position.z).fold(f64::MIN, f64::max);
        assert!((far_end - 30.0).abs() <= 5.0, "ended at z = {far_end}");
        assert!(r.tree.len() <= v.points.len() + 2 * 4 + 2);
    }

    #[test]
    fn y_phantom_recovers_both_leaves() {
        let t = generate_tree(&TreeSpec {
            depth: 1,
            seed: 1,
            ..TreeSpec::default()
        })
        .unwrap();
        let o = OraclePredictor::new(&t, 1000, 50.0, 0.0).unwrap();
        let r = track(&o, &[t.position(0)], &TrackerConfig::default()).unwrap();
        assert!(r.tree.segments().len() >= 3);
        for leaf in t.leaf_endpoints() {
            let v = extract_vessel(&r.tree, 0, t.position(leaf)).unwrap();
            assert!(v.points.last().unwrap().distance(t.position(leaf)) < 2.0);
        }
    }

    #[test]
    fn concurrent_mode_is_bit_identical() {
        let t = generate_tree(&TreeSpec {
            depth: 2,
            seed: 2,
            ..TreeSpec::default()
        })
        .unwrap();
        let o = OraclePredictor::new(&t, 1000, 50.0, 0.05).unwrap();
        let serial = track(&o, &[t.position(0)], &TrackerConfig::default()).unwrap();
        let cfg = TrackerConfig {
            concurrent: true,
            ..TrackerConfig::default()
        };
        let par = track(&o, &[t.position(0)], &cfg).unwrap();
        assert_eq!(serial, par);
    }

    #[test]
    fn truncation_flag() {
        let t = tube(60.0);
        let o = OraclePredictor::new(&t, 1000, 50.0, 0.0).unwrap();
        let cfg = TrackerConfig {
            max_points: 10,
            ..TrackerConfig::default()
        };
        let r = track(&o, &[Vec3::ZERO], &cfg).unwrap();
        assert!(r.truncated);
        assert_eq!(r.tree.len(), 10);
    }

    #[test]
    fn failing_predictor_is_logged() {
        struct Fails;
        impl Predictor for Fails {
            fn predict(&self, _: WorldPoint) -> Result<PredictorOutput> {
                Err(Error::DegenerateInput("nope".into()))
            }
            fn n_directions(&self) -> usize {
                1000
            }
        }
        let r = track(&Fails, &[Vec3::ZERO, Vec3::new(5.0, 0.0, 0.0)], &TrackerConfig::default()).unwrap();
        assert!(r.tree.is_empty());
        assert_eq!(
            r.diagnostics
                .iter()
                .filter(|d| matches!(d, Diagnostic::PredictorFailed { .. }))
                .count(),
            2
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        write_diagnostics(&path, &r.diagnostics).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"event\":\"predictor_failed\""));
    }

    #[test]
    fn oracle_examples() {
        let t = tube(30.0);
        let grid = SphereGrid::fibonacci(1000).unwrap();
        let o = OraclePredictor::new(&t, 1000, 50.0, 0.0).unwrap();
        let out = o.predict(Vec3::new(0.1, -0.2, 12.3)).unwrap();
        let s = smooth_response(&grid, &out.direction, 7.0).unwrap();
        let peaks = detect_peaks(&grid, &s, Some(UnitDirection::Z), false, &PeakConstraints::default()).unwrap();
        // The exits sit where the axis crosses the sphere around the query
        // point, so they lean back toward the axis by the lateral offset.
        let off = (0.1f64.powi(2) + 0.2f64.powi(2)).sqrt();
        let lean = (off / 1.5).asin().to_degrees();
        assert!(angle_between(peaks[0].direction, UnitDirection::Z) < lean + 6.0);
        assert!(angle_between(peaks[1].direction, -UnitDirection::Z) < lean + 6.0);
        assert_eq!(out.stop_prob, 0.1);
        assert_eq!(out.bifurcation_prob, 0.1);

        let on_axis = o.predict(Vec3::new(0.0, 0.0, 12.0)).unwrap();
        let s = smooth_response(&grid, &on_axis.direction, 7.0).unwrap();
        let peaks = detect_peaks(&grid, &s, None, false, &PeakConstraints::default()).unwrap();
        let axis = peaks.iter().map(|p| angle_between(p.direction, UnitDirection::Z).min(angle_between(p.direction, -UnitDirection::Z)));
        for a in axis {
            assert!(a < 6.0, "{a}");
        }

        assert_eq!(o.predict(Vec3::new(0.0, 0.0, 33.0)).unwrap().stop_prob, 0.9);
        let noisy = OraclePredictor::new(&t, 1000, 50.0, 1.0).unwrap();
        let out = noisy.predict(Vec3::new(0.0, 0.0, 10.0)).unwrap();
        assert!(normalized_entropy(&out.direction) > 0.8);
        let far = o.predict(Vec3::new(40.0, 0.0, 0.0)).unwrap();
        assert_eq!(far.stop_prob, 0.9);
        assert!((normalized_entropy(&far.direction) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn extract_vessel_paths() {
        let t = generate_tree(&TreeSpec {
            depth: 1,
            seed: 3,
            ..TreeSpec::default()
        })
        .unwrap();
        let leaf = t.leaf_endpoints()[0];
        let v = extract_vessel(&t, 0, t.position(leaf)).unwrap();
        assert_eq!(v.points.len(), t.path_to(leaf).len());
        assert_eq!(v.points[0], t.position(0));
        let mid = t.segments()[0][10];
        let v = extract_vessel(&t, 0, t.position(mid) + Vec3::new(0.3, 0.0, 0.0)).unwrap();
        assert_eq!(*v.points.last().unwrap(), t.position(mid));
        assert!(matches!(
            extract_vessel(&t, 0, t.position(leaf) + Vec3::new(50.0, 0.0, 0.0)),
            Err(Error::NotFound(_))
        ));
    }
}
