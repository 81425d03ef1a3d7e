//! Centerline trees: points with segment and parent topology and optional
//! radii, shared by ground truth, tracker output and evaluation.
//!
//! File formats:
//!
//! * `ACTL v1`: a header line `ACTL v1 <point_count>` followed by one line per
//!   point, `point_id segment_id parent_point_id x y z radius`, with parent
//!   `-1` for roots and radius `0` when unknown.
//! * Interchange: one vessel per file, one `x y z radius` line per point.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Vec3, WorldPoint};
use crate::spatial::PointGrid;

pub const MIN_RADIUS: f64 = 0.15;
pub const MAX_RADIUS: f64 = 4.0;

const ACTL_TAG: &str = "ACTL v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreePoint {
    pub position: WorldPoint,
    pub radius: Option<f64>,
    pub segment: usize,
    pub parent: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CenterlineTree {
    points: Vec<TreePoint>,
    segments: Vec<Vec<usize>>,
    ostia: Vec<usize>,
}

impl CenterlineTree {
    pub fn new() -> Self {
        Self::default()
    }

    /// Opens a new, empty segment and returns its id.
    pub fn new_segment(&mut self) -> usize {
        self.segments.push(Vec::new());
        self.segments.len() - 1
    }

    /// Appends a point to `segment`. Points without a parent become ostia.
    pub fn push_point(
        &mut self,
        position: WorldPoint,
        radius: Option<f64>,
        segment: usize,
        parent: Option<usize>,
    ) -> usize {
        assert!(segment < self.segments.len(), "unknown segment {segment}");
        if let Some(p) = parent {
            assert!(p < self.points.len(), "parent {p} does not exist yet");
        }
        let id = self.points.len();
        self.points.push(TreePoint {
            position,
            radius,
            segment,
            parent,
        });
        self.segments[segment].push(id);
        if parent.is_none() {
            self.ostia.push(id);
        }
        id
    }

    /// Rebuilds segment lists and ostia from raw points. Parents must refer to
    /// earlier points so the structure is acyclic.
    pub fn from_points(points: Vec<TreePoint>) -> Result<Self> {
        let mut seg_ids: Vec<usize> = points.iter().map(|p| p.segment).collect();
        seg_ids.sort_unstable();
        seg_ids.dedup();
        let remap: HashMap<usize, usize> = seg_ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let mut tree = CenterlineTree {
            points: Vec::with_capacity(points.len()),
            segments: vec![Vec::new(); seg_ids.len()],
            ostia: Vec::new(),
        };
        for (i, mut p) in points.into_iter().enumerate() {
            if let Some(par) = p.parent {
                if par >= i {
                    return Err(Error::InvalidArgument(format!(
                        "point {i} has parent {par}, which does not precede it"
                    )));
                }
            }
            if !p.position.is_finite() {
                return Err(Error::InvalidArgument(format!("point {i} is not finite")));
            }
            p.segment = remap[&p.segment];
            tree.segments[p.segment].push(i);
            if p.parent.is_none() {
                tree.ostia.push(i);
            }
            tree.points.push(p);
        }
        Ok(tree)
    }

    /// Drops segments that never received a point, renumbering the rest.
    pub fn compact_segments(&mut self) {
        let mut remap = vec![usize::MAX; self.segments.len()];
        let mut kept = Vec::new();
        for (i, s) in self.segments.drain(..).enumerate() {
            if !s.is_empty() {
                remap[i] = kept.len();
                kept.push(s);
            }
        }
        for p in &mut self.points {
            p.segment = remap[p.segment];
        }
        self.segments = kept;
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[TreePoint] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &TreePoint {
        &self.points[i]
    }

    pub fn position(&self, i: usize) -> WorldPoint {
        self.points[i].position
    }

    pub fn set_radius(&mut self, i: usize, r: Option<f64>) {
        self.points[i].radius = r;
    }

    pub fn segments(&self) -> &[Vec<usize>] {
        &self.segments
    }

    pub fn ostia(&self) -> &[usize] {
        &self.ostia
    }

    /// Child point lists per point.
    pub fn children(&self) -> Vec<Vec<usize>> {
        let mut ch = vec![Vec::new(); self.points.len()];
        for (i, p) in self.points.iter().enumerate() {
            if let Some(par) = p.parent {
                ch[par].push(i);
            }
        }
        ch
    }

    /// Undirected neighbor lists over the point/parent edges.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.points.len()];
        for (i, p) in self.points.iter().enumerate() {
            if let Some(par) = p.parent {
                adj[par].push(i);
                adj[i].push(par);
            }
        }
        adj
    }

    /// Points with no children and a parent: distal vessel ends.
    pub fn leaf_endpoints(&self) -> Vec<usize> {
        let ch = self.children();
        (0..self.points.len())
            .filter(|&i| ch[i].is_empty() && self.points[i].parent.is_some())
            .collect()
    }

    /// Points where more than one child segment leaves.
    pub fn bifurcation_points(&self) -> Vec<usize> {
        self.children()
            .iter()
            .enumerate()
            .filter(|(_, c)| c.len() >= 2)
            .map(|(i, _)| i)
            .collect()
    }

    /// Root-to-`point` path through the parent links, ordered proximal first.
    pub fn path_to(&self, point: usize) -> Vec<usize> {
        let mut path = vec![point];
        let mut cur = point;
        while let Some(p) = self.points[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    pub fn root_of(&self, point: usize) -> usize {
        let mut cur = point;
        while let Some(p) = self.points[cur].parent {
            cur = p;
        }
        cur
    }

    /// Parent segment of each segment (via the parent of its first point).
    pub fn segment_parents(&self) -> Vec<Option<usize>> {
        self.segments
            .iter()
            .map(|s| {
                s.first()
                    .and_then(|&f| self.points[f].parent)
                    .map(|par| self.points[par].segment)
            })
            .collect()
    }

    pub fn total_length(&self) -> f64 {
        self.points
            .iter()
            .filter_map(|p| p.parent.map(|par| p.position.distance(self.points[par].position)))
            .sum()
    }

    pub fn radii(&self, ids: &[usize]) -> Option<Vec<f64>> {
        ids.iter().map(|&i| self.points[i].radius).collect()
    }

    /// Checks the structural invariants every tree must satisfy, plus the
    /// radius range when `require_radii` is set (ground-truth trees).
    pub fn validate(&self, require_radii: bool) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.ostia.is_empty() && !self.points.is_empty() {
            return bad("tree has points but no root".into());
        }
        for (i, p) in self.points.iter().enumerate() {
            if let Some(par) = p.parent {
                if par >= i {
                    return bad(format!("point {i}: parent {par} does not precede it"));
                }
            }
            if require_radii {
                match p.radius {
                    Some(r) if (MIN_RADIUS..=MAX_RADIUS).contains(&r) => {}
                    other => return bad(format!("point {i}: radius {other:?} out of range")),
                }
            }
        }
        for (s, ids) in self.segments.iter().enumerate() {
            if ids.is_empty() {
                return bad(format!("segment {s} is empty"));
            }
            for w in ids.windows(2) {
                if self.points[w[1]].parent != Some(w[0]) {
                    return bad(format!("segment {s}: point {} does not continue {}", w[1], w[0]));
                }
                let gap = self.points[w[0]].position.distance(self.points[w[1]].position);
                if gap > 1.0 + 1e-9 {
                    return bad(format!("segment {s}: spacing {gap} mm exceeds 1 mm"));
                }
            }
            let first = ids[0];
            if let Some(par) = self.points[first].parent {
                if self.points[par].segment == s {
                    return bad(format!("segment {s}: first point's parent is in the same segment"));
                }
                let gap = self.points[first].position.distance(self.points[par].position);
                if gap > 1.0 + 1e-9 {
                    return bad(format!("segment {s}: starts {gap} mm from its parent"));
                }
            }
        }
        Ok(())
    }
}

fn fmt_radius(r: Option<f64>) -> String {
    match r {
        Some(r) => format!("{r}"),
        None => "0".into(),
    }
}

pub fn encode_actl(tree: &CenterlineTree) -> String {
    let mut out = format!("{ACTL_TAG} {}\n", tree.len());
    for (i, p) in tree.points.iter().enumerate() {
        let parent = p.parent.map_or(-1, |x| x as i64);
        let _ = writeln!(
            out,
            "{i} {} {parent} {} {} {} {}",
            p.segment,
            p.position.x,
            p.position.y,
            p.position.z,
            fmt_radius(p.radius)
        );
    }
    out
}

pub fn decode_actl(text: &str, path: &Path) -> Result<CenterlineTree> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::corrupt(path, "empty file"))?;
    let count: usize = header
        .strip_prefix(ACTL_TAG)
        .and_then(|rest| rest.trim().parse().ok())
        .ok_or_else(|| Error::corrupt(path, format!("bad header `{header}`")))?;

    let mut ids = HashMap::new();
    let mut raw = Vec::with_capacity(count);
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(Error::format(path, format!("line {}: expected 7 fields", ln + 2)));
        }
        let err = || Error::format(path, format!("line {}: unparsable field", ln + 2));
        let id: i64 = f[0].parse().map_err(|_| err())?;
        let seg: usize = f[1].parse().map_err(|_| err())?;
        let parent: i64 = f[2].parse().map_err(|_| err())?;
        let mut xyzr = [0.0; 4];
        for (o, s) in xyzr.iter_mut().zip(&f[3..]) {
            *o = s.parse().map_err(|_| err())?;
        }
        if ids.insert(id, raw.len()).is_some() {
            return Err(Error::format(path, format!("duplicate point id {id}")));
        }
        raw.push((seg, parent, xyzr));
    }
    if raw.len() != count {
        return Err(Error::format(
            path,
            format!("header announces {count} points, found {}", raw.len()),
        ));
    }
    let points = raw
        .into_iter()
        .map(|(segment, parent, [x, y, z, r])| {
            let parent = if parent < 0 {
                None
            } else {
                Some(*ids.get(&parent).ok_or_else(|| {
                    Error::format(path, format!("unknown parent id {parent}"))
                })?)
            };
            Ok(TreePoint {
                position: Vec3::new(x, y, z),
                radius: (r > 0.0).then_some(r),
                segment,
                parent,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CenterlineTree::from_points(points).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_actl(path: impl AsRef<Path>, tree: &CenterlineTree) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_actl(tree)).map_err(|e| Error::io(path, e))
}

pub fn read_actl(path: impl AsRef<Path>) -> Result<CenterlineTree> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_actl(&text, path)
}

/// A single vessel as an ordered point list with optional radii.
#[derive(Debug, Clone, PartialEq)]
pub struct Vessel {
    pub points: Vec<WorldPoint>,
    pub radii: Option<Vec<f64>>,
}

impl Vessel {
    pub fn from_tree_path(tree: &CenterlineTree, ids: &[usize]) -> Self {
        Vessel {
            points: ids.iter().map(|&i| tree.position(i)).collect(),
            radii: tree.radii(ids),
        }
    }
}

pub fn encode_vessel(v: &Vessel) -> String {
    let mut out = String::new();
    for (i, p) in v.points.iter().enumerate() {
        let r = v.radii.as_ref().map(|r| r[i]);
        let _ = writeln!(out, "{} {} {} {}", p.x, p.y, p.z, fmt_radius(r));
    }
    out
}

pub fn decode_vessel(text: &str, path: &Path) -> Result<Vessel> {
    let mut points = Vec::new();
    let mut radii = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let f: Vec<f64> = line
            .split_whitespace()
            .map(|s| s.parse())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::format(path, format!("line {}: unparsable number", ln + 1)))?;
        if f.len() != 4 {
            return Err(Error::format(path, format!("line {}: expected `x y z radius`", ln + 1)));
        }
        points.push(Vec3::new(f[0], f[1], f[2]));
        radii.push(f[3]);
    }
    let radii = radii.iter().all(|&r| r > 0.0).then_some(radii);
    Ok(Vessel { points, radii })
}

pub fn write_vessel(path: impl AsRef<Path>, v: &Vessel) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_vessel(v)).map_err(|e| Error::io(path, e))
}

pub fn read_vessel(path: impl AsRef<Path>) -> Result<Vessel> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    decode_vessel(&text, path)
}

/// Geometric lookup structure over a tree's points and edges.
#[derive(Debug, Clone)]
pub struct TreeIndex<'a> {
    tree: &'a CenterlineTree,
    grid: PointGrid,
    adjacency: Vec<Vec<usize>>,
    max_edge: f64,
}

/// Closest location on the tree's piecewise-linear centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub position: WorldPoint,
    pub distance: f64,
    /// Radius interpolated along the edge, when both ends carry one.
    pub radius: Option<f64>,
    pub nearest_point: usize,
}

impl<'a> TreeIndex<'a> {
    pub fn new(tree: &'a CenterlineTree) -> Self {
        let max_edge = tree
            .points()
            .iter()
            .filter_map(|p| p.parent.map(|q| p.position.distance(tree.position(q))))
            .fold(0.0, f64::max);
        Self {
            tree,
            grid: PointGrid::from_points(1.0, tree.points().iter().map(|p| p.position)),
            adjacency: tree.adjacency(),
            max_edge,
        }
    }

    pub fn tree(&self) -> &'a CenterlineTree {
        self.tree
    }

    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn nearest_point(&self, p: WorldPoint) -> Option<(usize, f64)> {
        self.grid.nearest(p)
    }

    pub fn points_within(&self, p: WorldPoint, radius: f64) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        self.grid.for_each_within(p, radius, |i, d2| out.push((i, d2.sqrt())));
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    /// Projects `p` onto the nearest edge (or isolated point) of the tree.
    pub fn project(&self, p: WorldPoint) -> Option<Projection> {
        let (nearest, d_near) = self.nearest_point(p)?;
        // Any closer edge must have an endpoint within d_near + max_edge / 2.
        let reach = d_near + 0.5 * self.max_edge + 1e-9;
        let mut best = Projection {
            position: self.tree.position(nearest),
            distance: d_near,
            radius: self.tree.point(nearest).radius,
            nearest_point: nearest,
        };
        let mut edges = Vec::new();
        self.grid.for_each_within(p, reach, |i, _| {
            for &j in &self.adjacency[i] {
                // Each edge is keyed by its child end.
                let child = if self.tree.point(j).parent == Some(i) { j } else { i };
                edges.push(child);
            }
        });
        edges.sort_unstable();
        edges.dedup();
        for i in edges {
            let a = self.tree.point(i);
            let par = a.parent.expect("edge child has a parent");
            let b = self.tree.point(par);
            let ab = b.position - a.position;
            let len2 = ab.norm_squared();
            let t = if len2 > 0.0 {
                ((p - a.position).dot(ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let q = a.position + ab * t;
            let d = q.distance(p);
            if d < best.distance {
                let radius = match (a.radius, b.radius) {
                    (Some(ra), Some(rb)) => Some(ra + (rb - ra) * t),
                    _ => None,
                };
                best = Projection {
                    position: q,
                    distance: d,
                    radius,
                    nearest_point: if t <= 0.5 { i } else { par },
                };
            }
        }
        Some(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn y_tree() -> CenterlineTree {
        let mut t = CenterlineTree::new();
        let s0 = t.new_segment();
        let mut last = None;
        for k in 0..=10 {
            last = Some(t.push_point(Vec3::new(0.0, 0.0, k as f64 * 0.5), Some(2.0), s0, last));
        }
        let apex = last.unwrap();
        for sign in [1.0, -1.0] {
            let s = t.new_segment();
            let mut prev = apex;
            for k in 1..=10 {
                let a = k as f64 * 0.5;
                prev = t.push_point(
                    Vec3::new(sign * a * 0.5, 0.0, 5.0 + a * 0.866),
                    Some(1.5),
                    s,
                    Some(prev),
                );
            }
        }
        t
    }

    #[test]
    fn topology_queries() {
        let t = y_tree();
        t.validate(true).unwrap();
        assert_eq!(t.ostia(), &[0]);
        assert_eq!(t.segments().len(), 3);
        assert_eq!(t.bifurcation_points(), vec![10]);
        assert_eq!(t.leaf_endpoints(), vec![20, 30]);
        assert_eq!(t.path_to(25)[..12], [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 21]);
        assert_eq!(t.segment_parents(), vec![None, Some(0), Some(0)]);
        assert_eq!(t.root_of(30), 0);
    }

    #[test]
    fn actl_round_trip() {
        let mut t = y_tree();
        t.set_radius(4, None);
        let text = encode_actl(&t);
        let back = decode_actl(&text, Path::new("mem")).unwrap();
        assert_eq!(back, t);
        assert_eq!(encode_actl(&back), text);
    }

    #[test]
    fn actl_corruption() {
        let text = encode_actl(&y_tree());
        let p = Path::new("x");
        assert!(matches!(decode_actl("", p), Err(Error::CorruptHeader { .. })));
        assert!(matches!(decode_actl(&text.replacen("ACTL", "ACTX", 1), p), Err(Error::CorruptHeader { .. })));
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(decode_actl(&truncated, p), Err(Error::Format { .. })));
        let bad_parent = text.replacen("\n1 0 0 ", "\n1 0 77 ", 1);
        assert!(matches!(decode_actl(&bad_parent, p), Err(Error::Format { .. })));
    }

    #[test]
    fn vessel_round_trip() {
        let t = y_tree();
        let v = Vessel::from_tree_path(&t, &t.path_to(30));
        let text = encode_vessel(&v);
        let back = decode_vessel(&text, Path::new("v")).unwrap();
        assert_eq!(back, v);
        let unknown = Vessel { points: v.points.clone(), radii: None };
        assert_eq!(decode_vessel(&encode_vessel(&unknown), Path::new("v")).unwrap(), unknown);
    }

    #[test]
    fn validation_catches_wide_spacing() {
        let mut t = CenterlineTree::new();
        let s = t.new_segment();
        let a = t.push_point(Vec3::ZERO, Some(1.0), s, None);
        t.push_point(Vec3::new(0.0, 0.0, 1.5), Some(1.0), s, Some(a));
        assert!(t.validate(true).is_err());
    }

    #[test]
    fn projection_onto_edges() {
        let t = y_tree();
        let idx = TreeIndex::new(&t);
        let pr = idx.project(Vec3::new(0.3, 0.4, 2.25)).unwrap();
        assert!((pr.distance - 0.5).abs() < 1e-12);
        assert!((pr.position.z - 2.25).abs() < 1e-12);
        assert_eq!(pr.radius, Some(2.0));
    }

    #[test]
    fn projection_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut t = CenterlineTree::new();
        let s = t.new_segment();
        let mut prev = None;
        let mut pos = Vec3::ZERO;
        for _ in 0..40 {
            prev = Some(t.push_point(pos, Some(1.0), s, prev));
            // Mixed short and long edges.
            let len = if rng.random_bool(0.3) { 4.0 } else { 0.3 };
            pos += Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0) * len;
        }
        let idx = TreeIndex::new(&t);
        for _ in 0..500 {
            let q = Vec3::new(rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0), rng.random_range(-5.0..60.0));
            let mut best = f64::INFINITY;
            for (i, pt) in t.points().iter().enumerate().skip(1) {
                let a = pt.position;
                let b = t.position(i - 1);
                let ab = b - a;
                let u = ((q - a).dot(ab) / ab.norm_squared()).clamp(0.0, 1.0);
                best = best.min(q.distance(a + ab * u));
            }
            let got = idx.project(q).unwrap().distance;
            assert!((got - best).abs() < 1e-12, "{got} vs {best}");
        }
    }
}
