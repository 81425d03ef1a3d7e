//! Maximum intensity projections with centerline overlays.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

use vesseltrack::geometry::WorldPoint;
use vesseltrack::tree::CenterlineTree;
use vesseltrack::volume::{mip_project, projection_axes, read_avol, Axis, Image2D, Volume};

use crate::commands::{load_tree, RenderArgs};

pub const TRACKED_COLOR: Rgb<u8> = Rgb([255, 40, 40]);
pub const REFERENCE_COLOR: Rgb<u8> = Rgb([40, 220, 40]);

/// Pixel `(column, row)` of world point `p` in the projection along `axis`;
/// `None` outside the volume.
pub fn pixel_of(v: &Volume, axis: Axis, p: WorldPoint) -> Option<(u32, u32)> {
    let ijk = v.world_to_voxel(p).to_array();
    let (ua, va) = projection_axes(axis);
    let dims = v.dims();
    let (u, w) = (ijk[ua].round(), ijk[va].round());
    let inside = |x: f64, n: usize| x >= 0.0 && x < n as f64;
    (inside(u, dims[ua]) && inside(w, dims[va])).then_some((u as u32, w as u32))
}

fn grayscale(mip: &Image2D) -> RgbImage {
    let (lo, hi) = mip
        .values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    RgbImage::from_fn(mip.width as u32, mip.height as u32, |u, v| {
        let g = ((mip.get(u as usize, v as usize) - lo) / span * 255.0).round() as u8;
        Rgb([g, g, g])
    })
}

fn overlay(img: &mut RgbImage, v: &Volume, axis: Axis, tree: &CenterlineTree, color: Rgb<u8>) {
    for p in tree.points() {
        if let Some((u, w)) = pixel_of(v, axis, p.position) {
            img.put_pixel(u, w, color);
        }
    }
}

pub fn render_axis(
    v: &Volume,
    axis: Axis,
    tracked: Option<&CenterlineTree>,
    reference: Option<&CenterlineTree>,
) -> RgbImage {
    let mut img = grayscale(&mip_project(v, axis));
    if let Some(r) = reference {
        overlay(&mut img, v, axis, r, REFERENCE_COLOR);
    }
    if let Some(t) = tracked {
        overlay(&mut img, v, axis, t, TRACKED_COLOR);
    }
    img
}

fn output_path(stem: &Path, axis: Axis) -> PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push(format!("_{}.png", axis.name()));
    stem.with_file_name(name)
}

pub fn render(a: &RenderArgs) -> Result<()> {
    let vol = read_avol(&a.volume)?;
    let tracked = a.tracked.as_deref().map(load_tree).transpose()?;
    let reference = a.reference.as_deref().map(load_tree).transpose()?;
    for axis in Axis::ALL {
        let img = render_axis(&vol, axis, tracked.as_ref(), reference.as_ref());
        let path = output_path(&a.out, axis);
        img.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use vesseltrack::geometry::Vec3;

    #[test]
    fn known_point_lands_on_hand_computed_pixel() {
        // Origin (-2, -1, 0), spacing 0.5: x = 1.0 is column 6, y = 0.5 is
        // row 3, z = 2.0 is slice 4.
        let v = Volume::filled([10, 8, 6], [0.5; 3], Vec3::new(-2.0, -1.0, 0.0), 0.0).unwrap();
        let p = Vec3::new(1.0, 0.5, 2.0);
        assert_eq!(pixel_of(&v, Axis::Z, p), Some((6, 3)));
        assert_eq!(pixel_of(&v, Axis::Y, p), Some((6, 4)));
        assert_eq!(pixel_of(&v, Axis::X, p), Some((3, 4)));
        assert_eq!(pixel_of(&v, Axis::Z, Vec3::new(9.0, 0.0, 0.0)), None);

        let mut t = CenterlineTree::new();
        let s = t.new_segment();
        t.push_point(p, None, s, None);
        let img = render_axis(&v, Axis::Z, Some(&t), None);
        assert_eq!(img.dimensions(), (10, 8));
        assert_eq!(*img.get_pixel(6, 3), TRACKED_COLOR);
        assert_eq!(*img.get_pixel(5, 3), Rgb([0, 0, 0]));
    }

    #[test]
    fn empty_tree_gives_plain_mip() {
        let v = Volume::from_fn([5, 4, 3], [1.0; 3], Vec3::ZERO, |p| (p.x + p.y + p.z) as f32).unwrap();
        let plain = render_axis(&v, Axis::Y, None, None);
        let empty = CenterlineTree::new();
        assert_eq!(render_axis(&v, Axis::Y, Some(&empty), Some(&empty)), plain);
        // Brightest column along y is j = 3: values i + 3 + k, max at i = 4, k = 2.
        assert_eq!(*plain.get_pixel(4, 2), Rgb([255, 255, 255]));
        assert_eq!(*plain.get_pixel(0, 0), Rgb([0, 0, 0]));
    }

    #[test]
    fn stem_gets_axis_suffix() {
        assert_eq!(output_path(Path::new("out/case.v1"), Axis::X), PathBuf::from("out/case.v1_x.png"));
    }
}
