//! Synthetic vascular trees and their rasterized volumes.
//!
//! Trees grow from a single root. Every segment is a gently wavy curve whose
//! waviness envelope vanishes, together with its slope, at both ends, so the
//! geometry near each bifurcation apex is locally straight. Points are placed
//! every 0.5 mm of arc; a segment's last point sits 0.25 mm after the previous
//! regular point and child segments start 0.25 mm past the apex, which keeps
//! every centerline point at least 0.25 mm away from the 1.5 mm label sphere
//! around any apex.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EulerRotation, UnitDirection, Vec3, WorldPoint};
use crate::spatial::PointGrid;
use crate::tree::{CenterlineTree, MIN_RADIUS};
use crate::volume::Volume;

pub const POINT_SPACING: f64 = 0.5;
const APEX_OFFSET: f64 = 0.25;
const MAX_ATTEMPTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeSpec {
    /// Number of bifurcation generations below the root segment.
    pub depth: u32,
    /// Deviation of each child from the parent direction, degrees.
    pub branch_angle_range: (f64, f64),
    /// Radius ratio per generation.
    pub taper: f64,
    pub segment_length_range: (f64, f64),
    /// Peak lateral waviness amplitude, mm.
    pub tortuosity: f64,
    pub root_radius: f64,
    pub root_start: [f64; 3],
    pub root_direction: [f64; 3],
    pub seed: u64,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            depth: 2,
            branch_angle_range: (25.0, 45.0),
            taper: 0.75,
            segment_length_range: (15.0, 30.0),
            tortuosity: 1.0,
            root_radius: 3.0,
            root_start: [0.0, 0.0, 0.0],
            root_direction: [0.0, 0.0, 1.0],
            seed: 0,
        }
    }
}

impl TreeSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let (lo, hi) = self.branch_angle_range;
        if !(lo <= hi && 2.0 * lo >= 45.0 && hi < 60.0) {
            return bad(format!(
                "branch angle range {lo}..{hi}: children must separate by >= 45 deg and deviate < 60 deg"
            ));
        }
        if !(self.taper > 0.5 && self.taper < 1.0) {
            return bad(format!("taper {} outside (0.5, 1.0)", self.taper));
        }
        let (smin, smax) = self.segment_length_range;
        if !(smin >= 5.0 && smin <= smax) {
            return bad(format!("segment length range {smin}..{smax} must start at >= 5 mm"));
        }
        if !(self.tortuosity >= 0.0 && self.tortuosity <= 0.1 * smin) {
            return bad(format!(
                "tortuosity {} must lie in [0, {}]",
                self.tortuosity,
                0.1 * smin
            ));
        }
        if !(self.root_radius >= MIN_RADIUS && self.root_radius <= 4.0) {
            return bad(format!("root radius {} outside [0.15, 4]", self.root_radius));
        }
        UnitDirection::new(Vec3::from_array(self.root_direction))?;
        Ok(())
    }
}

struct SegmentPlan {
    start: WorldPoint,
    direction: UnitDirection,
    generation: u32,
    parent_point: Option<usize>,
}

fn radius_at(spec: &TreeSpec, generation: u32, frac: f64) -> f64 {
    let r0 = spec.root_radius * spec.taper.powi(generation as i32);
    r0 * (1.0 + (spec.taper - 1.0) * frac)
}

/// Samples the wavy curve for one segment at the given arc positions.
fn segment_curve(
    start: WorldPoint,
    dir: UnitDirection,
    length: f64,
    amplitude: f64,
    rng: &mut ChaCha8Rng,
) -> impl Fn(f64) -> WorldPoint {
    let d = dir.vec();
    let n1 = d.any_orthogonal();
    let n2 = d.cross(n1);
    let psi = rng.random_range(0.0..std::f64::consts::TAU);
    let axis = n1 * psi.cos() + n2 * psi.sin();
    let cycles = rng.random_range(0.5..1.5);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    move |s: f64| {
        let u = s / length;
        let envelope = (std::f64::consts::PI * u).sin().powi(2);
        let wave = (std::f64::consts::TAU * cycles * u + phase).sin();
        start + d * s + axis * (amplitude * envelope * wave)
    }
}

/// Arc positions for a segment starting `offset` past its origin: regular
/// points every 0.5 mm and a final point 0.25 mm after the last regular one.
fn arc_positions(offset: f64, target_length: f64) -> Vec<f64> {
    let steps = ((target_length - offset - APEX_OFFSET) / POINT_SPACING).round().max(2.0) as usize;
    let mut s: Vec<f64> = (0..=steps).map(|k| offset + k as f64 * POINT_SPACING).collect();
    s.push(offset + steps as f64 * POINT_SPACING + APEX_OFFSET);
    s
}

fn grow(spec: &TreeSpec, rng: &mut ChaCha8Rng) -> CenterlineTree {
    let mut tree = CenterlineTree::new();
    let root_dir = UnitDirection::new(Vec3::from_array(spec.root_direction)).expect("validated");
    let mut queue = std::collections::VecDeque::from([SegmentPlan {
        start: Vec3::from_array(spec.root_start),
        direction: root_dir,
        generation: 0,
        parent_point: None,
    }]);

    while let Some(plan) = queue.pop_front() {
        if radius_at(spec, plan.generation, 0.0) < MIN_RADIUS {
            // Too thin to represent: the branch is truncated.
            continue;
        }
        let length = rng.random_range(spec.segment_length_range.0..=spec.segment_length_range.1);
        let offset = if plan.parent_point.is_some() { APEX_OFFSET } else { 0.0 };
        let curve = segment_curve(plan.start, plan.direction, length, spec.tortuosity, rng);
        let arcs = arc_positions(offset, length);
        let total = *arcs.last().unwrap();

        let seg = tree.new_segment();
        let mut prev = plan.parent_point;
        for &s in &arcs {
            let r = radius_at(spec, plan.generation, s / total).max(MIN_RADIUS);
            prev = Some(tree.push_point(curve(s), Some(r), seg, prev));
        }
        let apex = prev.unwrap();

        if plan.generation < spec.depth {
            // Tangent at the end is the segment axis because the waviness has
            // zero slope there.
            let t = plan.direction.vec();
            let n1 = t.any_orthogonal();
            let n2 = t.cross(n1);
            let psi = rng.random_range(0.0..std::f64::consts::TAU);
            let side = n1 * psi.cos() + n2 * psi.sin();
            let (lo, hi) = spec.branch_angle_range;
            for sign in [1.0, -1.0] {
                let a = rng.random_range(lo..=hi).to_radians();
                let dir = UnitDirection::new(t * a.cos() + side * (sign * a.sin())).expect("unit");
                queue.push_back(SegmentPlan {
                    start: tree.position(apex),
                    direction: dir,
                    generation: plan.generation + 1,
                    parent_point: Some(apex),
                });
            }
        }
    }
    tree
}

/// Arc length from the root to every point.
fn arc_from_root(tree: &CenterlineTree) -> Vec<f64> {
    let mut cum = vec![0.0; tree.len()];
    for (i, p) in tree.points().iter().enumerate() {
        if let Some(par) = p.parent {
            cum[i] = cum[par] + p.position.distance(tree.position(par));
        }
    }
    cum
}

fn depths(tree: &CenterlineTree) -> Vec<usize> {
    let mut d = vec![0; tree.len()];
    for (i, p) in tree.points().iter().enumerate() {
        if let Some(par) = p.parent {
            d[i] = d[par] + 1;
        }
    }
    d
}

fn tree_distance(tree: &CenterlineTree, cum: &[f64], depth: &[usize], a: usize, b: usize) -> f64 {
    let (mut x, mut y) = (a, b);
    while depth[x] > depth[y] {
        x = tree.point(x).parent.unwrap();
    }
    while depth[y] > depth[x] {
        y = tree.point(y).parent.unwrap();
    }
    while x != y {
        x = tree.point(x).parent.unwrap();
        y = tree.point(y).parent.unwrap();
    }
    cum[a] + cum[b] - 2.0 * cum[x]
}

/// Rejects trees where parts that are far apart along the tree come close in
/// space, which would put unrelated vessels inside one label sphere.
fn has_clearance(tree: &CenterlineTree) -> bool {
    let cum = arc_from_root(tree);
    let depth = depths(tree);
    let grid = PointGrid::from_points(1.0, tree.points().iter().map(|p| p.position));
    let near = 3.5;
    for i in 0..tree.len() {
        let mut ok = true;
        grid.for_each_within(tree.position(i), near, |j, d2| {
            if j > i && ok {
                let g = tree_distance(tree, &cum, &depth, i, j);
                if g > 4.0 * d2.sqrt() + 2.0 {
                    ok = false;
                }
            }
        });
        if !ok {
            return false;
        }
    }
    true
}

/// Generates a tree deterministically from `spec.seed`.
pub fn generate_tree(spec: &TreeSpec) -> Result<CenterlineTree> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut tree = grow(spec, &mut rng);
    for _ in 1..MAX_ATTEMPTS {
        if has_clearance(&tree) {
            return Ok(tree);
        }
        tree = grow(spec, &mut rng);
    }
    log::warn!(
        "seed {}: no self-clearing tree after {MAX_ATTEMPTS} attempts, keeping the last one",
        spec.seed
    );
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasterSpec {
    pub dims: [usize; 3],
    /// Isotropic voxel spacing, mm.
    pub spacing: f64,
    pub contrast: f64,
    pub noise_sigma: f64,
    /// Width of the smooth tube wall, mm.
    pub blur_sigma: f64,
    pub seed: u64,
}

impl RasterSpec {
    /// Dimensions that contain the tree with `margin` mm of clearance around
    /// every tube surface.
    pub fn fitted(tree: &CenterlineTree, spacing: f64, margin: f64) -> Self {
        let (lo, hi) = tube_bounds(tree);
        let ext = hi - lo;
        let n = |e: f64| ((e + 2.0 * margin) / spacing).ceil() as usize + 1;
        Self {
            dims: [n(ext.x), n(ext.y), n(ext.z)],
            spacing,
            contrast: 1.0,
            noise_sigma: 0.1,
            blur_sigma: 0.4,
            seed: 0,
        }
    }
}

fn tube_bounds(tree: &CenterlineTree) -> (Vec3, Vec3) {
    let mut lo = Vec3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
    let mut hi = -lo;
    for p in tree.points() {
        let r = p.radius.unwrap_or(0.0);
        lo = Vec3::new(lo.x.min(p.position.x - r), lo.y.min(p.position.y - r), lo.z.min(p.position.z - r));
        hi = Vec3::new(hi.x.max(p.position.x + r), hi.y.max(p.position.y + r), hi.z.max(p.position.z + r));
    }
    (lo, hi)
}

/// Soft tube indicator: 1 inside, 0 outside, with an error-function shoulder
/// centered on the wall. The shoulder narrows for thin vessels so the
/// centerline always reads close to full contrast.
pub fn tube_indicator(distance: f64, radius: f64, blur: f64) -> f64 {
    let w = blur.min(0.5 * radius);
    if w <= 0.0 {
        return if distance <= radius { 1.0 } else { 0.0 };
    }
    0.5 * libm::erfc((distance - radius) / (std::f64::consts::SQRT_2 * w))
}

/// Renders the tree as bright tubes on a zero background plus Gaussian noise.
/// The volume is centered on the tree.
pub fn rasterize(tree: &CenterlineTree, spec: &RasterSpec) -> Result<Volume> {
    if tree.is_empty() {
        return Err(Error::InvalidArgument("cannot rasterize an empty tree".into()));
    }
    if !(spec.spacing > 0.0) || spec.dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("bad raster geometry {spec:?}")));
    }
    let (lo, hi) = tube_bounds(tree);
    let size = Vec3::new(
        (spec.dims[0] - 1) as f64,
        (spec.dims[1] - 1) as f64,
        (spec.dims[2] - 1) as f64,
    ) * spec.spacing;
    let origin = (lo + hi) / 2.0 - size / 2.0;
    let far = origin + size;
    let margin = [lo.x - origin.x, lo.y - origin.y, lo.z - origin.z, far.x - hi.x, far.y - hi.y, far.z - hi.z]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    if margin < 2.0 - 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "tree does not fit with a 2 mm margin (margin {margin:.2} mm)"
        )));
    }

    let [nx, ny, nz] = spec.dims;
    let mut field = vec![0.0f64; nx * ny * nz];
    let sp = spec.spacing;
    let splat = |field: &mut Vec<f64>, a: Vec3, ra: f64, b: Vec3, rb: f64| {
        let reach = ra.max(rb) + 5.0 * spec.blur_sigma.min(0.5 * ra.max(rb));
        let lo = Vec3::new(a.x.min(b.x), a.y.min(b.y), a.z.min(b.z)) - Vec3::new(reach, reach, reach);
        let hi = Vec3::new(a.x.max(b.x), a.y.max(b.y), a.z.max(b.z)) + Vec3::new(reach, reach, reach);
        let idx = |v: f64, o: f64, n: usize| (((v - o) / sp).floor().max(0.0) as usize).min(n - 1);
        let idx_hi = |v: f64, o: f64, n: usize| (((v - o) / sp).ceil().max(0.0) as usize).min(n - 1);
        let ab = b - a;
        let len2 = ab.norm_squared();
        for k in idx(lo.z, origin.z, nz)..=idx_hi(hi.z, origin.z, nz) {
            for j in idx(lo.y, origin.y, ny)..=idx_hi(hi.y, origin.y, ny) {
                for i in idx(lo.x, origin.x, nx)..=idx_hi(hi.x, origin.x, nx) {
                    let p = origin + Vec3::new(i as f64, j as f64, k as f64) * sp;
                    let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                    let d = p.distance(a + ab * t);
                    let r = ra + (rb - ra) * t;
                    let v = tube_indicator(d, r, spec.blur_sigma);
                    let cell = &mut field[(k * ny + j) * nx + i];
                    if v > *cell {
                        *cell = v;
                    }
                }
            }
        }
    };
    for p in tree.points() {
        let r = p.radius.unwrap_or(MIN_RADIUS);
        match p.parent {
            Some(par) => {
                let q = tree.point(par);
                splat(&mut field, q.position, q.radius.unwrap_or(MIN_RADIUS), p.position, r);
            }
            None => splat(&mut field, p.position, r, p.position, r),
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let values = field
        .into_iter()
        .map(|v| {
            let n = noise.as_ref().map_or(0.0, |n| n.sample(&mut rng));
            (spec.contrast * v + n) as f32
        })
        .collect();
    Volume::new(spec.dims, [sp; 3], origin, values)
}

/// Narrows the vessel around `point_index` with a smooth radius dip reaching
/// `1 - severity` at the center and vanishing at `extent` mm.
pub fn apply_stenosis(
    tree: &CenterlineTree,
    point_index: usize,
    severity: f64,
    extent: f64,
) -> Result<CenterlineTree> {
    if point_index >= tree.len() {
        return Err(Error::InvalidArgument(format!(
            "point {point_index} out of range (tree has {})",
            tree.len()
        )));
    }
    if !(0.0..1.0).contains(&severity) {
        return Err(Error::InvalidArgument(format!("severity {severity} outside [0, 1)")));
    }
    if !(extent > 0.0) {
        return Err(Error::InvalidArgument(format!("extent {extent} must be positive")));
    }
    let mut out = tree.clone();
    if severity == 0.0 {
        return Ok(out);
    }
    let c = tree.position(point_index);
    for i in 0..tree.len() {
        let d = tree.position(i).distance(c);
        if d >= extent {
            continue;
        }
        if let Some(r) = tree.point(i).radius {
            let dip = (std::f64::consts::FRAC_PI_2 * d / extent).cos().powi(2);
            out.set_radius(i, Some((r * (1.0 - severity * dip)).max(MIN_RADIUS)));
        }
    }
    Ok(out)
}

/// A random rotation with each Euler angle uniform in `[-pi, pi]`.
pub fn random_rotation(rng: &mut impl Rng) -> EulerRotation {
    let pi = std::f64::consts::PI;
    EulerRotation::new(
        rng.random_range(-pi..=pi),
        rng.random_range(-pi..=pi),
        rng.random_range(-pi..=pi),
    )
    .expect("angles in range")
}

/// Uniformly distributed unit vector.
pub fn random_unit(rng: &mut impl Rng) -> UnitDirection {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi = rng.random_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).max(0.0).sqrt();
    UnitDirection::new(Vec3::new(r * phi.cos(), r * phi.sin(), z)).expect("unit")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(depth: u32, seed: u64) -> TreeSpec {
        TreeSpec {
            depth,
            seed,
            ..TreeSpec::default()
        }
    }

    #[test]
    fn depth_zero_is_one_segment() {
        let t = generate_tree(&spec(0, 1)).unwrap();
        assert_eq!(t.segments().len(), 1);
        assert!(t.bifurcation_points().is_empty());
        t.validate(true).unwrap();
    }

    #[test]
    fn depth_two_has_seven_segments() {
        for seed in 0..10 {
            let t = generate_tree(&spec(2, seed)).unwrap();
            assert_eq!(t.segments().len(), 7);
            assert_eq!(t.bifurcation_points().len(), 3);
            assert_eq!(t.leaf_endpoints().len(), 4);
            t.validate(true).unwrap();
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_tree(&spec(3, 42)).unwrap();
        let b = generate_tree(&spec(3, 42)).unwrap();
        assert_eq!(crate::tree::encode_actl(&a), crate::tree::encode_actl(&b));
        let c = generate_tree(&spec(3, 43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn thin_branches_are_truncated() {
        let s = TreeSpec {
            depth: 12,
            taper: 0.6,
            root_radius: 1.0,
            segment_length_range: (5.0, 6.0),
            tortuosity: 0.2,
            ..spec(12, 3)
        };
        let t = generate_tree(&s).unwrap();
        t.validate(true).unwrap();
        assert!(t.points().iter().all(|p| p.radius.unwrap() >= MIN_RADIUS));
        // 1.0 * 0.6^g < 0.15 from g = 4 on, so at most 1+2+4+8 segments
        assert_eq!(t.segments().len(), 15);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = spec(1, 0);
        s.branch_angle_range = (10.0, 20.0);
        assert!(generate_tree(&s).is_err());
        let mut s = spec(1, 0);
        s.taper = 0.4;
        assert!(generate_tree(&s).is_err());
    }

    fn straight_tube(radius: f64) -> CenterlineTree {
        let mut t = CenterlineTree::new();
        let s = t.new_segment();
        let mut prev = None;
        for k in 0..=40 {
            prev = Some(t.push_point(Vec3::new(0.0, 0.0, k as f64 * 0.5), Some(radius), s, prev));
        }
        t
    }

    #[test]
    fn indicator_contrast_bounds() {
        // analytic: at d = 0 the indicator is 0.5*erfc(-r/(sqrt2 w)) >= 0.5*erfc(-sqrt2)
        for r in [0.15, 0.3, 0.8, 1.5, 3.0] {
            assert!(tube_indicator(0.0, r, 0.4) >= 0.9);
            assert!(tube_indicator(3.0 * r, r, 0.4) <= 0.05);
            assert!((tube_indicator(r, r, 0.4) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn rasterized_centerline_and_background() {
        let t = straight_tube(1.0);
        let mut rs = RasterSpec::fitted(&t, 0.5, 6.0);
        rs.noise_sigma = 0.0;
        let v = rasterize(&t, &rs).unwrap();
        for k in 0..=40 {
            let p = Vec3::new(0.0, 0.0, k as f64 * 0.5);
            assert!(v.sample(p) >= 0.9, "centerline value {}", v.sample(p));
            assert!(v.sample(p + Vec3::new(3.0, 0.0, 0.0)) <= 0.05);
        }
    }

    #[test]
    fn background_noise_level() {
        let t = straight_tube(1.0);
        let mut rs = RasterSpec::fitted(&t, 0.5, 10.0);
        rs.seed = 5;
        let v = rasterize(&t, &rs).unwrap();
        let bg: Vec<f64> = (0..v.values().len())
            .filter(|&i| {
                let nx = v.dims()[0];
                let ny = v.dims()[1];
                let (x, y) = (i % nx, (i / nx) % ny);
                let c = v.voxel_center(x, y, 0);
                (c.x * c.x + c.y * c.y).sqrt() > 5.0
            })
            .take(10_000)
            .map(|i| v.values()[i] as f64)
            .collect();
        assert_eq!(bg.len(), 10_000);
        let mean = bg.iter().sum::<f64>() / bg.len() as f64;
        let sd = (bg.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (bg.len() - 1) as f64).sqrt();
        assert!((0.08..=0.12).contains(&sd), "sd {sd}");
    }

    #[test]
    fn raster_rejects_tight_bounds() {
        let t = straight_tube(1.0);
        let mut rs = RasterSpec::fitted(&t, 0.5, 1.0);
        rs.noise_sigma = 0.0;
        assert!(rasterize(&t, &rs).is_err());
    }

    #[test]
    fn stenosis_profile() {
        let t = straight_tube(2.0);
        assert_eq!(apply_stenosis(&t, 20, 0.0, 3.0).unwrap(), t);
        let s = apply_stenosis(&t, 20, 0.5, 3.0).unwrap();
        assert_eq!(s.point(20).radius, Some(1.0));
        assert_eq!(s.point(10).radius, Some(2.0));
        assert_eq!(s.point(26).radius, Some(2.0));
        assert!(s.point(22).radius.unwrap() < 2.0 && s.point(22).radius.unwrap() > 1.0);
        assert_eq!(s.segments(), t.segments());
        assert!(apply_stenosis(&t, 99, 0.5, 3.0).is_err());
    }

    #[test]
    fn stenosed_cross_section_follows_radius() {
        // The indicator is 0.5 exactly on the wall, so the half-max contour of
        // the union is the union of the per-edge surfaces: a frustum for the
        // edge containing the slice plus the end caps of every vertex.
        let t = apply_stenosis(&straight_tube(2.0), 20, 0.5, 4.0).unwrap();
        let mut rs = RasterSpec::fitted(&t, 0.25, 4.0);
        rs.noise_sigma = 0.0;
        let v = rasterize(&t, &rs).unwrap();
        for z in [6.0, 7.8, 8.1, 9.0, 9.75, 10.0, 11.3, 14.0] {
            let k = (z / 0.5f64).floor() as usize;
            let f = z / 0.5 - k as f64;
            let r = |i: usize| t.point(i).radius.unwrap();
            let mut want = r(k) + (r(k + 1) - r(k)) * f;
            for i in 0..t.len() {
                let dz = t.position(i).z - z;
                if r(i) > dz.abs() {
                    want = want.max((r(i) * r(i) - dz * dz).sqrt());
                }
            }
            let mut x = 0.0;
            while v.sample(Vec3::new(x, 0.0, z)) >= 0.5 {
                x += 0.005;
            }
            assert!((x - want).abs() < 0.05, "z={z}: half-max at {x}, expected {want}");
        }
    }

    #[test]
    fn intensity_peaks_on_centerline() {
        let t = generate_tree(&spec(1, 9)).unwrap();
        let mut rs = RasterSpec::fitted(&t, 0.5, 4.0);
        rs.noise_sigma = 0.05;
        rs.seed = 2;
        let v = rasterize(&t, &rs).unwrap();
        let bif = t.bifurcation_points();
        // Cross-section profiles perpendicular to the local tangent; the
        // brightness-weighted center above half maximum must sit on the
        // centerline to within one voxel.
        for (i, p) in t.points().iter().enumerate().step_by(7) {
            let Some(par) = p.parent else { continue };
            if bif.iter().any(|&b| t.position(b).distance(p.position) < 6.0) {
                continue;
            }
            let tan = (p.position - t.position(par)) / p.position.distance(t.position(par));
            let n = tan.any_orthogonal();
            let r = p.radius.unwrap();
            let samples: Vec<(f64, f64)> = (-60..=60)
                .map(|s| {
                    let off = s as f64 * 0.05 * r;
                    (off, v.sample(p.position + n * off) as f64)
                })
                .collect();
            let (num, den) = samples
                .iter()
                .filter(|(_, val)| *val > 0.5)
                .fold((0.0, 0.0), |(a, b), (o, val)| (a + o * val, b + val));
            let center = num / den;
            assert!(center.abs() <= 0.5, "point {i}: profile center {center}");
        }
    }
}
