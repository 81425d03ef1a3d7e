//! Uniform hash grid over 3D points for fixed-radius neighbor queries.

use std::collections::HashMap;

use crate::geometry::Vec3;

type Cell = (i64, i64, i64);

#[derive(Debug, Clone)]
pub struct PointGrid {
    cell: f64,
    buckets: HashMap<Cell, Vec<usize>>,
    points: Vec<Vec3>,
}

impl PointGrid {
    pub fn new(cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        Self {
            cell: cell_size,
            buckets: HashMap::new(),
            points: Vec::new(),
        }
    }

    pub fn from_points(cell_size: f64, points: impl IntoIterator<Item = Vec3>) -> Self {
        let mut g = Self::new(cell_size);
        for p in points {
            g.insert(p);
        }
        g
    }

    fn key(&self, p: Vec3) -> Cell {
        (
            (p.x / self.cell).floor() as i64,
            (p.y / self.cell).floor() as i64,
            (p.z / self.cell).floor() as i64,
        )
    }

    /// Inserts `p` and returns its index (insertion order).
    pub fn insert(&mut self, p: Vec3) -> usize {
        let id = self.points.len();
        self.points.push(p);
        let k = self.key(p);
        self.buckets.entry(k).or_default().push(id);
        id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> Vec3 {
        self.points[id]
    }

    /// Calls `f(id, distance_squared)` for every point within `radius` of `p`.
    pub fn for_each_within(&self, p: Vec3, radius: f64, mut f: impl FnMut(usize, f64)) {
        let r2 = radius * radius;
        let reach = (radius / self.cell).ceil() as i64;
        let side = (2 * reach + 1) as f64;
        if side * side * side > self.points.len() as f64 {
            for (id, q) in self.points.iter().enumerate() {
                let d2 = q.distance_squared(p);
                if d2 <= r2 {
                    f(id, d2);
                }
            }
            return;
        }
        let (cx, cy, cz) = self.key(p);
        for dz in -reach..=reach {
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    if let Some(ids) = self.buckets.get(&(cx + dx, cy + dy, cz + dz)) {
                        for &id in ids {
                            let d2 = self.points[id].distance_squared(p);
                            if d2 <= r2 {
                                f(id, d2);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Whether some point lies within `radius` (inclusive).
    pub fn any_within(&self, p: Vec3, radius: f64) -> bool {
        let mut hit = false;
        self.for_each_within(p, radius, |_, _| hit = true);
        hit
    }

    /// Nearest point within `radius`; ties go to the lowest index.
    pub fn nearest_within(&self, p: Vec3, radius: f64) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        self.for_each_within(p, radius, |id, d2| match best {
            Some((bid, bd2)) if d2 > bd2 || (d2 == bd2 && id > bid) => {}
            _ => best = Some((id, d2)),
        });
        best.map(|(id, d2)| (id, d2.sqrt()))
    }

    /// Nearest point overall, growing the search shell until a hit is certain.
    pub fn nearest(&self, p: Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut radius = self.cell;
        loop {
            if let Some(hit) = self.nearest_within(p, radius) {
                return Some(hit);
            }
            radius *= 2.0;
            if radius > 1e6 * self.cell {
                // Far outside the populated region; fall back to a scan.
                return self
                    .points
                    .iter()
                    .enumerate()
                    .map(|(i, q)| (i, q.distance(p)))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec3> = (0..500)
            .map(|_| Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let grid = PointGrid::from_points(0.7, pts.iter().copied());
        for _ in 0..200 {
            let q = Vec3::new(rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0), rng.random_range(-6.0..6.0));
            let r = rng.random_range(0.1..2.0);
            let mut got = Vec::new();
            grid.for_each_within(q, r, |id, _| got.push(id));
            got.sort_unstable();
            let want: Vec<usize> = (0..pts.len()).filter(|&i| pts[i].distance(q) <= r).collect();
            assert_eq!(got, want);

            let (nid, nd) = grid.nearest(q).unwrap();
            let best = pts.iter().map(|p| p.distance(q)).fold(f64::INFINITY, f64::min);
            assert_eq!(nd, best);
            assert_eq!(pts[nid].distance(q), best);
        }
    }

    #[test]
    fn empty_grid() {
        let g = PointGrid::new(1.0);
        assert!(g.nearest(Vec3::ZERO).is_none());
        assert!(!g.any_within(Vec3::ZERO, 10.0));
    }
}
