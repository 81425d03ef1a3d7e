//! Scalar volumes in world coordinates: trilinear sampling, rotated
//! dual-resolution patch extraction, maximum intensity projection, and the
//! `AVOL v1` file format.
//!
//! `AVOL v1` layout: a UTF-8 text header, one `key=value` per line after the
//! `AVOL v1` tag line, terminated by an empty line, followed by
//! `nx*ny*nz` little-endian `f32` values with x varying fastest:
//!
//! ```text
//! AVOL v1
//! dims=64 64 48
//! spacing=0.5 0.5 0.5
//! origin=-16 -16 -12
//! dtype=f32le
//! normalization=1 0
//!
//! <raw bytes>
//! ```
//!
//! `normalization=scale offset` records the affine map that was applied to the
//! source intensities (`stored = scale * source + offset`).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{EulerRotation, Mat3, Vec3, WorldPoint};

pub const PATCH_SIZE: usize = 19;
pub const FINE_SPACING: f64 = 0.5;
pub const COARSE_SPACING: f64 = 1.0;

const AVOL_TAG: &str = "AVOL v1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub scale: f64,
    pub offset: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            scale: 1.0,
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: WorldPoint,
    normalization: Normalization,
    values: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: WorldPoint,
        values: Vec<f32>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-sized dims {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {spacing:?}"
            )));
        }
        if !origin.is_finite() {
            return Err(Error::InvalidArgument("non-finite origin".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{} values for dims {dims:?} ({n} voxels)",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite voxel value".into()));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            normalization: Normalization::default(),
            values,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], origin: WorldPoint, value: f32) -> Result<Self> {
        Self::new(dims, spacing, origin, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Builds a volume by evaluating `f` at every voxel center.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: WorldPoint,
        mut f: impl FnMut(WorldPoint) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    values.push(f(origin
                        + Vec3::new(
                            i as f64 * spacing[0],
                            j as f64 * spacing[1],
                            k as f64 * spacing[2],
                        )));
                }
            }
        }
        Self::new(dims, spacing, origin, values)
    }

    pub fn with_normalization(mut self, n: Normalization) -> Self {
        self.normalization = n;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> WorldPoint {
        self.origin
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> WorldPoint {
        self.origin
            + Vec3::new(
                i as f64 * self.spacing[0],
                j as f64 * self.spacing[1],
                k as f64 * self.spacing[2],
            )
    }

    /// Continuous voxel coordinates of a world point.
    pub fn world_to_voxel(&self, p: WorldPoint) -> Vec3 {
        let d = p - self.origin;
        Vec3::new(
            d.x / self.spacing[0],
            d.y / self.spacing[1],
            d.z / self.spacing[2],
        )
    }

    /// World-space bounds `(min, max)` spanned by the voxel centers.
    pub fn bounds(&self) -> (WorldPoint, WorldPoint) {
        let max = self.voxel_center(self.dims[0] - 1, self.dims[1] - 1, self.dims[2] - 1);
        (self.origin, max)
    }

    pub fn sample(&self, p: WorldPoint) -> f32 {
        trilinear_sample(self, p, 0.0)
    }
}

fn axis_cell(x: f64, n: usize) -> Option<(usize, usize, f64)> {
    let max = (n - 1) as f64;
    if !(0.0..=max).contains(&x) {
        return None;
    }
    if n == 1 {
        return Some((0, 0, 0.0));
    }
    let lo = (x.floor() as usize).min(n - 2);
    Some((lo, lo + 1, x - lo as f64))
}

/// Trilinear interpolation between the eight surrounding voxel centers.
/// Points outside the hull of voxel centers return `background`.
pub fn trilinear_sample(v: &Volume, p: WorldPoint, background: f32) -> f32 {
    let c = v.world_to_voxel(p);
    let (Some((x0, x1, fx)), Some((y0, y1, fy)), Some((z0, z1, fz))) = (
        axis_cell(c.x, v.dims[0]),
        axis_cell(c.y, v.dims[1]),
        axis_cell(c.z, v.dims[2]),
    ) else {
        return background;
    };
    let g = |i, j, k| v.get(i, j, k) as f64;
    let c00 = g(x0, y0, z0) * (1.0 - fx) + g(x1, y0, z0) * fx;
    let c10 = g(x0, y1, z0) * (1.0 - fx) + g(x1, y1, z0) * fx;
    let c01 = g(x0, y0, z1) * (1.0 - fx) + g(x1, y0, z1) * fx;
    let c11 = g(x0, y1, z1) * (1.0 - fx) + g(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    (c0 * (1.0 - fz) + c1 * fz) as f32
}

/// A cubic, isotropic sample grid around a center. The voxel at offset `o`
/// (in voxel units, centered) holds the volume value at
/// `center + frame * (o * spacing)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub spacing: f64,
    pub center: WorldPoint,
    pub frame: Mat3,
    pub values: Vec<f32>,
}

impl Patch {
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[(k * self.size + j) * self.size + i]
    }

    /// Physical edge length covered by the voxel centers.
    pub fn extent(&self) -> f64 {
        (self.size - 1) as f64 * self.spacing
    }
}

/// Co-centered fine (0.5 mm) and coarse (1.0 mm) patches.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub fine: Patch,
    pub coarse: Patch,
}

pub fn extract_patch(
    v: &Volume,
    center: WorldPoint,
    frame: &Mat3,
    size: usize,
    spacing: f64,
    background: f32,
) -> Result<Patch> {
    if size.is_multiple_of(2) || size == 0 {
        return Err(Error::InvalidArgument(format!(
            "patch size must be odd, got {size}"
        )));
    }
    let half = (size / 2) as f64;
    let mut values = Vec::with_capacity(size * size * size);
    for k in 0..size {
        for j in 0..size {
            for i in 0..size {
                let o = Vec3::new(i as f64 - half, j as f64 - half, k as f64 - half) * spacing;
                values.push(trilinear_sample(v, center + frame.mul_vec(o), background));
            }
        }
    }
    Ok(Patch {
        size,
        spacing,
        center,
        frame: *frame,
        values,
    })
}

/// Extracts the fine/coarse pair with an explicit sampling frame.
pub fn extract_patch_pair_in_frame(
    v: &Volume,
    center: WorldPoint,
    frame: &Mat3,
    size: usize,
) -> Result<PatchPair> {
    Ok(PatchPair {
        fine: extract_patch(v, center, frame, size, FINE_SPACING, 0.0)?,
        coarse: extract_patch(v, center, frame, size, COARSE_SPACING, 0.0)?,
    })
}

/// Extracts the 19^3 fine/coarse pair, sampling at `center + rot(o * spacing)`.
pub fn extract_patch_pair(v: &Volume, center: WorldPoint, rot: &EulerRotation) -> PatchPair {
    extract_patch_pair_in_frame(v, center, &rot.matrix(), PATCH_SIZE)
        .expect("default patch size is odd")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn name(self) -> &'static str {
        match self {
            Axis::X => "x",
            Axis::Y => "y",
            Axis::Z => "z",
        }
    }
}

/// Row-major 2D image; pixel `(u, v)` is at `values[v * width + u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
}

impl Image2D {
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.values[v * self.width + u]
    }
}

/// In-plane axes `(u, v)` remaining after collapsing `axis`.
pub fn projection_axes(axis: Axis) -> (usize, usize) {
    match axis {
        Axis::X => (1, 2),
        Axis::Y => (0, 2),
        Axis::Z => (0, 1),
    }
}

/// Maximum intensity projection along `axis`.
pub fn mip_project(v: &Volume, axis: Axis) -> Image2D {
    let [nx, ny, nz] = v.dims;
    let (ua, va) = projection_axes(axis);
    let (width, height) = (v.dims[ua], v.dims[va]);
    let mut values = vec![f32::NEG_INFINITY; width * height];
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let ijk = [i, j, k];
                let px = ijk[va] * width + ijk[ua];
                let val = v.values[(k * ny + j) * nx + i];
                if val > values[px] {
                    values[px] = val;
                }
            }
        }
    }
    Image2D {
        width,
        height,
        values,
    }
}

fn fmt3(a: [f64; 3]) -> String {
    format!("{} {} {}", a[0], a[1], a[2])
}

pub fn encode_avol(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(128 + 4 * v.values.len());
    let header = format!(
        "{AVOL_TAG}\ndims={} {} {}\nspacing={}\norigin={}\ndtype=f32le\nnormalization={} {}\n\n",
        v.dims[0],
        v.dims[1],
        v.dims[2],
        fmt3(v.spacing),
        fmt3(v.origin.to_array()),
        v.normalization.scale,
        v.normalization.offset,
    );
    out.extend_from_slice(header.as_bytes());
    for x in &v.values {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn parse_floats<const N: usize>(path: &Path, key: &str, s: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != N {
        return Err(Error::corrupt(path, format!("`{key}` needs {N} numbers")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .parse()
            .map_err(|_| Error::corrupt(path, format!("bad number `{p}` in `{key}`")))?;
    }
    Ok(out)
}

pub fn decode_avol(bytes: &[u8], path: &Path) -> Result<Volume> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::corrupt(path, "header is not terminated by a blank line"))?;
    let header = std::str::from_utf8(&bytes[..end])
        .map_err(|_| Error::corrupt(path, "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(AVOL_TAG) {
        return Err(Error::corrupt(path, "missing `AVOL v1` tag"));
    }
    let (mut dims, mut spacing, mut origin, mut dtype, mut norm) = (None, None, None, None, None);
    for line in lines {
        let (k, val) = line
            .split_once('=')
            .ok_or_else(|| Error::corrupt(path, format!("malformed header line `{line}`")))?;
        match k.trim() {
            "dims" => {
                let d = parse_floats::<3>(path, k, val)?;
                if d.iter().any(|x| x.fract() != 0.0 || *x < 1.0) {
                    return Err(Error::corrupt(path, "dims must be positive integers"));
                }
                dims = Some([d[0] as usize, d[1] as usize, d[2] as usize]);
            }
            "spacing" => spacing = Some(parse_floats::<3>(path, k, val)?),
            "origin" => origin = Some(Vec3::from_array(parse_floats::<3>(path, k, val)?)),
            "dtype" => dtype = Some(val.trim().to_string()),
            "normalization" => {
                let n = parse_floats::<2>(path, k, val)?;
                norm = Some(Normalization {
                    scale: n[0],
                    offset: n[1],
                });
            }
            other => {
                return Err(Error::corrupt(path, format!("unknown header key `{other}`")));
            }
        }
    }
    let missing = |k: &str| Error::corrupt(path, format!("missing `{k}`"));
    let dims = dims.ok_or_else(|| missing("dims"))?;
    let spacing = spacing.ok_or_else(|| missing("spacing"))?;
    let origin = origin.ok_or_else(|| missing("origin"))?;
    let norm = norm.ok_or_else(|| missing("normalization"))?;
    match dtype.as_deref() {
        Some("f32le") => {}
        Some(other) => return Err(Error::corrupt(path, format!("unsupported dtype `{other}`"))),
        None => return Err(missing("dtype")),
    }

    let data = &bytes[end + 2..];
    let n = dims[0] * dims[1] * dims[2];
    if data.len() != 4 * n {
        return Err(Error::format(
            path,
            format!("expected {} data bytes, found {}", 4 * n, data.len()),
        ));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(dims, spacing, origin, values)
        .map(|v| v.with_normalization(norm))
        .map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_avol(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_avol(v)).map_err(|e| Error::io(path, e))
}

pub fn read_avol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_avol(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn linear_field(p: Vec3) -> f64 {
        2.0 * p.x + 3.0 * p.y - p.z
    }

    fn linear_volume() -> Volume {
        Volume::from_fn([20, 18, 16], [0.5, 0.7, 0.9], Vec3::new(-3.0, 1.0, 2.0), |p| {
            linear_field(p) as f32
        })
        .unwrap()
    }

    #[test]
    fn sample_at_voxel_center_and_midpoint() {
        let v = Volume::from_fn([4, 4, 4], [1.0; 3], Vec3::ZERO, |p| (p.x * 10.0 + p.y + p.z * 0.1) as f32).unwrap();
        assert_eq!(v.sample(v.voxel_center(2, 1, 3)), v.get(2, 1, 3));
        let mid = (v.voxel_center(1, 2, 2) + v.voxel_center(2, 2, 2)) / 2.0;
        let want = (v.get(1, 2, 2) + v.get(2, 2, 2)) / 2.0;
        assert!((v.sample(mid) - want).abs() < 1e-5);
        assert_eq!(v.sample(Vec3::new(-0.1, 0.0, 0.0)), 0.0);
        assert_eq!(trilinear_sample(&v, Vec3::new(9.0, 0.0, 0.0), -5.0), -5.0);
    }

    #[test]
    fn linear_field_reproduced_exactly() {
        let v = linear_volume();
        let (lo, hi) = v.bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let p = Vec3::new(
                rng.random_range(lo.x..hi.x),
                rng.random_range(lo.y..hi.y),
                rng.random_range(lo.z..hi.z),
            );
            let got = v.sample(p) as f64;
            assert!((got - linear_field(p)).abs() < 1e-4 * (1.0 + linear_field(p).abs()));
        }
    }

    #[test]
    fn constant_volume_gives_constant_patches() {
        let v = Volume::filled([70, 70, 70], [0.5; 3], Vec3::new(-17.0, -17.0, -17.0), 3.5).unwrap();
        let pair = extract_patch_pair(&v, Vec3::ZERO, &EulerRotation::new(0.4, -1.0, 2.0).unwrap());
        assert!(pair.fine.values.iter().all(|&x| x == 3.5));
        assert!(pair.coarse.values.iter().all(|&x| x == 3.5));
        assert_eq!(pair.fine.center, pair.coarse.center);
        assert_eq!(pair.fine.frame, pair.coarse.frame);
        assert!((pair.coarse.extent() - 2.0 * pair.fine.extent()).abs() < 1e-12);
    }

    #[test]
    fn identity_patch_equals_voxel_neighborhood() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Volume::from_fn([30, 30, 30], [0.5; 3], Vec3::ZERO, |_| rng.random()).unwrap();
        let c = v.voxel_center(14, 15, 13);
        let p = extract_patch(&v, c, &Mat3::IDENTITY, 19, 0.5, 0.0).unwrap();
        for k in 0..19 {
            for j in 0..19 {
                for i in 0..19 {
                    assert_eq!(p.get(i, j, k), v.get(14 + i - 9, 15 + j - 9, 13 + k - 9));
                }
            }
        }
        // integer translation commutes with extraction
        let q = extract_patch(&v, v.voxel_center(15, 15, 13), &Mat3::IDENTITY, 19, 0.5, 0.0).unwrap();
        for k in 0..19 {
            for j in 0..19 {
                for i in 0..18 {
                    assert_eq!(q.get(i, j, k), p.get(i + 1, j, k));
                }
            }
        }
    }

    #[test]
    fn rotated_patch_samples_rotated_points() {
        let v = Volume::from_fn([76, 74, 78], [0.5; 3], Vec3::new(-18.0, -18.0, -17.0), |p| {
            linear_field(p) as f32
        })
        .unwrap();
        let rot = EulerRotation::new(0.3, -0.2, 0.7).unwrap();
        let c = Vec3::new(0.3, -0.4, 1.1);
        let pair = extract_patch_pair(&v, c, &rot);
        for patch in [&pair.fine, &pair.coarse] {
            for k in 0..19 {
                for j in 0..19 {
                    for i in 0..19 {
                        let o = Vec3::new(i as f64 - 9.0, j as f64 - 9.0, k as f64 - 9.0) * patch.spacing;
                        let want = linear_field(c + rot.apply(o));
                        let got = patch.get(i, j, k) as f64;
                        assert!((got - want).abs() < 1e-4 * (1.0 + want.abs()), "{got} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn extraction_is_reproducible() {
        let v = linear_volume();
        let rot = EulerRotation::new(1.0, 2.0, -3.0).unwrap();
        let a = extract_patch_pair(&v, Vec3::new(1.0, 6.0, 8.0), &rot);
        let b = extract_patch_pair(&v, Vec3::new(1.0, 6.0, 8.0), &rot);
        let bits = |p: &Patch| p.values.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.fine), bits(&b.fine));
        assert_eq!(bits(&a.coarse), bits(&b.coarse));
    }

    #[test]
    fn mip_examples() {
        let v = Volume::filled([5, 6, 7], [1.0; 3], Vec3::ZERO, 2.0).unwrap();
        for axis in Axis::ALL {
            assert!(mip_project(&v, axis).values.iter().all(|&x| x == 2.0));
        }

        let mut vals = vec![0.0f32; 5 * 6 * 7];
        let v0 = Volume::filled([5, 6, 7], [1.0; 3], Vec3::ZERO, 0.0).unwrap();
        vals[v0.index(3, 4, 5)] = 9.0;
        let v = Volume::new([5, 6, 7], [1.0; 3], Vec3::ZERO, vals).unwrap();
        let z = mip_project(&v, Axis::Z);
        assert_eq!((z.width, z.height), (5, 6));
        assert_eq!(z.get(3, 4), 9.0);
        assert_eq!(z.values.iter().filter(|&&x| x == 9.0).count(), 1);
        assert_eq!(mip_project(&v, Axis::X).get(4, 5), 9.0);
        assert_eq!(mip_project(&v, Axis::Y).get(3, 5), 9.0);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Volume::from_fn([7, 5, 6], [1.0; 3], Vec3::ZERO, |_| rng.random_range(-1.0..1.0)).unwrap();
        let img = mip_project(&v, Axis::Y);
        for k in 0..6 {
            for i in 0..7 {
                let mut m = f32::NEG_INFINITY;
                for j in 0..5 {
                    m = m.max(v.get(i, j, k));
                }
                assert_eq!(img.get(i, k), m);
            }
        }
    }

    #[test]
    fn avol_round_trip_and_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = Volume::from_fn([6, 5, 4], [0.5, 0.25, 1.0 / 3.0], Vec3::new(-1.1, 0.3, 1e-7), |_| rng.random_range(-2.0..2.0))
            .unwrap()
            .with_normalization(Normalization { scale: 1.0 / 1024.0, offset: -0.1 });
        let bytes = encode_avol(&v);
        let back = decode_avol(&bytes, Path::new("mem")).unwrap();
        assert_eq!(encode_avol(&back), bytes);
        assert_eq!(back, v);

        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_avol(truncated, Path::new("t")), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_avol(&bad, Path::new("b")), Err(Error::CorruptHeader { .. })));
        assert!(matches!(decode_avol(b"AVOL v1\ndims=1 1 1\n", Path::new("h")), Err(Error::CorruptHeader { .. })));
    }
}
