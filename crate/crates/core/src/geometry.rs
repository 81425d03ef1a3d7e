//! Small fixed-size 3D vector algebra shared by every stage of the pipeline.
//!
//! Positions are millimetres in world coordinates. Rotations use Euler angles
//! applied about the fixed X, then Y, then Z axes, so the composed matrix is
//! `Rz * Ry * Rx`.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

/// A position in world coordinates (mm).
pub type WorldPoint = Vec3;

impl Vec3 {
    pub const ZERO: Vec3 = Vec3::new(0.0, 0.0, 0.0);

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn distance_squared(self, o: Vec3) -> f64 {
        (self - o).norm_squared()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn lerp(self, o: Vec3, t: f64) -> Vec3 {
        self + (o - self) * t
    }

    /// Any unit vector orthogonal to `self` (which need not be normalized).
    pub fn any_orthogonal(self) -> Vec3 {
        let a = if self.x.abs() <= self.y.abs() && self.x.abs() <= self.z.abs() {
            Vec3::new(1.0, 0.0, 0.0)
        } else if self.y.abs() <= self.z.abs() {
            Vec3::new(0.0, 1.0, 0.0)
        } else {
            Vec3::new(0.0, 0.0, 1.0)
        };
        let c = self.cross(a);
        c / c.norm()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Div<f64> for Vec3 {
    type Output = Vec3;
    fn div(self, s: f64) -> Vec3 {
        Vec3::new(self.x / s, self.y / s, self.z / s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// A vector of unit Euclidean norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec3", into = "Vec3")]
pub struct UnitDirection(Vec3);

impl UnitDirection {
    pub const X: UnitDirection = UnitDirection(Vec3::new(1.0, 0.0, 0.0));
    pub const Y: UnitDirection = UnitDirection(Vec3::new(0.0, 1.0, 0.0));
    pub const Z: UnitDirection = UnitDirection(Vec3::new(0.0, 0.0, 1.0));

    /// Normalizes `v`. Fails on zero-length or non-finite input.
    pub fn new(v: Vec3) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "cannot normalize vector {v:?}"
            )));
        }
        Ok(Self(v / n))
    }

    /// Wraps a vector already known to be unit-norm.
    pub(crate) fn new_unchecked(v: Vec3) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9, "not unit: {v:?}");
        Self(v)
    }

    pub fn vec(self) -> Vec3 {
        self.0
    }

    pub fn dot(self, o: UnitDirection) -> f64 {
        self.0.dot(o.0)
    }
}

impl Neg for UnitDirection {
    type Output = UnitDirection;
    fn neg(self) -> UnitDirection {
        UnitDirection(-self.0)
    }
}

impl From<UnitDirection> for Vec3 {
    fn from(d: UnitDirection) -> Vec3 {
        d.0
    }
}

impl TryFrom<Vec3> for UnitDirection {
    type Error = Error;
    fn try_from(v: Vec3) -> Result<Self> {
        UnitDirection::new(v)
    }
}

/// Row-major 3x3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub const IDENTITY: Mat3 = Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    pub fn rot_x(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    }

    pub fn rot_y(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    }

    pub fn rot_z(a: f64) -> Mat3 {
        let (s, c) = a.sin_cos();
        Mat3([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0][0] * v.x + m[0][1] * v.y + m[0][2] * v.z,
            m[1][0] * v.x + m[1][1] * v.y + m[1][2] * v.z,
            m[2][0] * v.x + m[2][1] * v.y + m[2][2] * v.z,
        )
    }

    pub fn mul_mat(&self, o: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, cell) in row.iter_mut().enumerate() {
                *cell = (0..3).map(|k| self.0[i][k] * o.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            [m[0][0], m[1][0], m[2][0]],
            [m[0][1], m[1][1], m[2][1]],
            [m[0][2], m[1][2], m[2][2]],
        ])
    }
}

/// Euler angles (radians), each in `[-pi, pi]`, applied about X then Y then Z.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EulerRotation {
    pub phi_x: f64,
    pub phi_y: f64,
    pub phi_z: f64,
}

impl EulerRotation {
    pub const IDENTITY: EulerRotation = EulerRotation {
        phi_x: 0.0,
        phi_y: 0.0,
        phi_z: 0.0,
    };

    pub fn new(phi_x: f64, phi_y: f64, phi_z: f64) -> Result<Self> {
        let pi = std::f64::consts::PI;
        for a in [phi_x, phi_y, phi_z] {
            if !(-pi..=pi).contains(&a) {
                return Err(Error::InvalidArgument(format!(
                    "Euler angle {a} outside [-pi, pi]"
                )));
            }
        }
        Ok(Self {
            phi_x,
            phi_y,
            phi_z,
        })
    }

    pub fn is_identity(&self) -> bool {
        self.phi_x == 0.0 && self.phi_y == 0.0 && self.phi_z == 0.0
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::rot_z(self.phi_z)
            .mul_mat(&Mat3::rot_y(self.phi_y))
            .mul_mat(&Mat3::rot_x(self.phi_x))
    }

    /// Rotates an arbitrary vector (not necessarily unit).
    pub fn apply(&self, v: Vec3) -> Vec3 {
        let v = Mat3::rot_x(self.phi_x).mul_vec(v);
        let v = Mat3::rot_y(self.phi_y).mul_vec(v);
        Mat3::rot_z(self.phi_z).mul_vec(v)
    }

    /// Undoes `apply`: negated angles in Z, Y, X order.
    pub fn apply_inverse(&self, v: Vec3) -> Vec3 {
        let v = Mat3::rot_z(-self.phi_z).mul_vec(v);
        let v = Mat3::rot_y(-self.phi_y).mul_vec(v);
        Mat3::rot_x(-self.phi_x).mul_vec(v)
    }
}

pub fn rotate_vector(v: UnitDirection, r: &EulerRotation) -> UnitDirection {
    let out = r.apply(v.vec());
    // Rotation preserves the norm up to round-off; renormalize so the
    // unit-norm invariant never drifts under repeated application.
    UnitDirection::new_unchecked(out / out.norm())
}

/// Angle between two unit directions in degrees, in `[0, 180]`.
pub fn angle_between(u: UnitDirection, v: UnitDirection) -> f64 {
    u.dot(v).clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Resampled {
    pub points: Vec<WorldPoint>,
    pub radii: Option<Vec<f64>>,
}

pub fn polyline_length(points: &[WorldPoint]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Resamples a polyline at uniform arc-length `spacing`, keeping the first and
/// last points. Radii, when given, are interpolated linearly along the arc.
pub fn resample_polyline(
    points: &[WorldPoint],
    radii: Option<&[f64]>,
    spacing: f64,
) -> Result<Resampled> {
    if points.len() < 2 {
        return Err(Error::DegenerateInput(format!(
            "polyline needs at least 2 points, got {}",
            points.len()
        )));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive, got {spacing}"
        )));
    }
    if let Some(r) = radii {
        if r.len() != points.len() {
            return Err(Error::InvalidArgument(format!(
                "{} radii for {} points",
                r.len(),
                points.len()
            )));
        }
    }

    let mut cumulative = Vec::with_capacity(points.len());
    cumulative.push(0.0);
    for w in points.windows(2) {
        let last = *cumulative.last().unwrap();
        cumulative.push(last + w[0].distance(w[1]));
    }
    let total = *cumulative.last().unwrap();
    let eps = 1e-9 * total.max(1.0);

    let mut out_points = Vec::new();
    let mut out_radii = radii.map(|_| Vec::new());
    let mut seg = 0usize;
    let mut k = 0usize;
    loop {
        let s = k as f64 * spacing;
        if k > 0 && s >= total - eps {
            break;
        }
        while seg + 2 < cumulative.len() && cumulative[seg + 1] < s {
            seg += 1;
        }
        let len = cumulative[seg + 1] - cumulative[seg];
        let t = if len > 0.0 {
            ((s - cumulative[seg]) / len).clamp(0.0, 1.0)
        } else {
            0.0
        };
        out_points.push(points[seg].lerp(points[seg + 1], t));
        if let (Some(out), Some(r)) = (out_radii.as_mut(), radii) {
            out.push(r[seg] + (r[seg + 1] - r[seg]) * t);
        }
        k += 1;
    }
    out_points.push(*points.last().unwrap());
    if let (Some(out), Some(r)) = (out_radii.as_mut(), radii) {
        out.push(*r.last().unwrap());
    }

    Ok(Resampled {
        points: out_points,
        radii: out_radii,
    })
}
