//! Training-sample construction: sphere-exit direction labels, translation
//! and rotation augmentation, stop/normal patches and the ADS v1 dataset
//! files.
//!
//! ADS v1 is a pair of files per dataset. `<stem>.json` holds the manifest;
//! `<stem>.bin` holds `sample_count` records of little-endian f32, each laid
//! out as the fine patch, the coarse patch, the label weights (direction
//! datasets only) and the 0/1 flag. Patches are stored x fastest.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_between, EulerRotation, UnitDirection, Vec3, WorldPoint};
use crate::phantom::{random_rotation, random_unit};
use crate::sphere::{encode_directions, DirectionLabel, SphereGrid};
use crate::tree::{CenterlineTree, TreeIndex};
use crate::volume::{extract_patch_pair_in_frame, PatchPair, Volume, COARSE_SPACING, FINE_SPACING, PATCH_SIZE};

pub const EXIT_RADIUS: f64 = 1.5;
pub const EXIT_DEDUP_DEG: f64 = 5.0;
pub const PSEUDO_CENTER_WEIGHT: f64 = 0.2;
pub const STOP_REACH: f64 = 5.0;

/// All distinct directions in which the centerline leaves the sphere of
/// radius `r` around `center`, in discovery order.
///
/// Only the part of the tree connected to the nearest point through points
/// inside the sphere is considered, so a neighboring branch that merely grazes
/// the sphere contributes nothing.
pub fn sphere_crossings(index: &TreeIndex, center: WorldPoint, r: f64) -> Result<Vec<UnitDirection>> {
    let tree = index.tree();
    let no_exit = || Error::NoExit(format!("no centerline point within {r} mm of {center:?}"));
    let (start, d0) = index.nearest_point(center).ok_or_else(no_exit)?;
    if d0 >= r {
        return Err(no_exit());
    }
    let f = |i: usize| tree.position(i).distance(center) - r;
    let adj = index.adjacency();
    let mut seen = vec![false; tree.len()];
    let mut queue = VecDeque::from([start]);
    seen[start] = true;
    let mut exits: Vec<UnitDirection> = Vec::new();
    while let Some(u) = queue.pop_front() {
        let fu = f(u);
        for &w in &adj[u] {
            let fw = f(w);
            if fw < 0.0 {
                if !seen[w] {
                    seen[w] = true;
                    queue.push_back(w);
                }
                continue;
            }
            let t = fu / (fu - fw);
            let x = tree.position(u).lerp(tree.position(w), t);
            let Ok(dir) = UnitDirection::new(x - center) else { continue };
            if exits.iter().all(|&e| angle_between(e, dir) >= EXIT_DEDUP_DEG) {
                exits.push(dir);
            }
        }
    }
    if exits.is_empty() {
        return Err(Error::NoExit(format!(
            "centerline near {center:?} never leaves the {r} mm sphere"
        )));
    }
    Ok(exits)
}

/// Sphere exits restricted to the 1–3 directions a valid label can hold.
pub fn sphere_exits_in(index: &TreeIndex, center: WorldPoint, r: f64) -> Result<Vec<UnitDirection>> {
    let exits = sphere_crossings(index, center, r)?;
    if exits.len() > 3 {
        return Err(Error::DegenerateInput(format!(
            "{} sphere exits at {center:?}; at most 3 are representable",
            exits.len()
        )));
    }
    Ok(exits)
}

pub fn sphere_exits(tree: &CenterlineTree, center: WorldPoint, r: f64) -> Result<Vec<UnitDirection>> {
    sphere_exits_in(&TreeIndex::new(tree), center, r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleMeta {
    pub point_index: usize,
    pub translation: Vec3,
    pub rotation: EulerRotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSample {
    pub pair: PatchPair,
    pub label: DirectionLabel,
    pub bifurcation: bool,
    pub meta: SampleMeta,
}

/// Translated patch center and the damped center used for labeling.
pub fn augmented_centers(
    point: WorldPoint,
    radius: f64,
    lambda_t: f64,
    direction: UnitDirection,
) -> (WorldPoint, WorldPoint, Vec3) {
    let delta = direction.vec() * (lambda_t * radius);
    (point + delta, point + delta * PSEUDO_CENTER_WEIGHT, delta)
}

/// Builds one direction sample around `point_index`.
///
/// The patch is centered at the translated point; the label comes from the
/// exits at the pseudo-center, rotated by `rot`. The patch samples at
/// `center + rot^T * o` so that a vessel heading along `d` in world space shows
/// up along `rot(d)` in patch coordinates, matching its label.
#[allow(clippy::too_many_arguments)]
pub fn make_direction_sample(
    v: &Volume,
    index: &TreeIndex,
    grid: &SphereGrid,
    point_index: usize,
    lambda_t: f64,
    translation_dir: UnitDirection,
    rot: &EulerRotation,
) -> Result<DirectionSample> {
    let tree = index.tree();
    if point_index >= tree.len() {
        return Err(Error::InvalidArgument(format!("point {point_index} out of range")));
    }
    if !(0.0..=1.0).contains(&lambda_t) {
        return Err(Error::InvalidArgument(format!("lambda_t {lambda_t} outside [0, 1]")));
    }
    let radius = tree.point(point_index).radius.ok_or_else(|| {
        Error::InvalidArgument(format!("point {point_index} has no radius"))
    })?;
    let (patch_center, pseudo, delta) =
        augmented_centers(tree.position(point_index), radius, lambda_t, translation_dir);
    let exits = sphere_exits_in(index, pseudo, EXIT_RADIUS)?;
    let rotated: Vec<UnitDirection> = exits
        .iter()
        .map(|&d| crate::geometry::rotate_vector(d, rot))
        .collect();
    let label = encode_directions(grid, &rotated)?;
    let pair = extract_patch_pair_in_frame(v, patch_center, &rot.matrix().transpose(), PATCH_SIZE)?;
    Ok(DirectionSample {
        pair,
        label,
        bifurcation: exits.len() == 3,
        meta: SampleMeta {
            point_index,
            translation: delta,
            rotation: *rot,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StopSample {
    pub pair: PatchPair,
    pub stop: bool,
    pub center: WorldPoint,
}

/// Stop-class patches beyond each leaf endpoint, plus as many normal-class
/// patches drawn from the remaining centerline points (`normal_ratio` per stop
/// sample).
pub fn make_stop_samples(
    v: &Volume,
    tree: &CenterlineTree,
    per_endpoint: usize,
    normal_ratio: f64,
    rng: &mut impl Rng,
) -> Result<Vec<StopSample>> {
    let children = tree.children();
    let mut stops = Vec::new();
    for (i, p) in tree.points().iter().enumerate() {
        if !children[i].is_empty() {
            continue;
        }
        let Some(par) = p.parent else {
            log::warn!("point {i} is a single-point leaf; no stop samples");
            continue;
        };
        let Ok(d) = UnitDirection::new(p.position - tree.position(par)) else {
            log::warn!("leaf {i} coincides with its parent; no stop samples");
            continue;
        };
        for _ in 0..per_endpoint {
            // (0, 5]: 1 - u with u in [0, 1).
            let t = STOP_REACH * (1.0 - rng.random::<f64>());
            stops.push(p.position + d.vec() * t);
        }
    }

    let endpoints: Vec<bool> = (0..tree.len())
        .map(|i| children[i].is_empty() || tree.point(i).parent.is_none())
        .collect();
    let interior: Vec<usize> = (0..tree.len()).filter(|&i| !endpoints[i]).collect();
    let n_normal = (stops.len() as f64 * normal_ratio).round() as usize;
    let normals: Vec<WorldPoint> = if interior.is_empty() {
        Vec::new()
    } else if n_normal <= interior.len() {
        rand::seq::index::sample(rng, interior.len(), n_normal)
            .into_iter()
            .map(|k| tree.position(interior[k]))
            .collect()
    } else {
        (0..n_normal)
            .map(|_| tree.position(interior[rng.random_range(0..interior.len())]))
            .collect()
    };

    let mut out = Vec::with_capacity(stops.len() + normals.len());
    for (center, stop) in stops
        .into_iter()
        .map(|c| (c, true))
        .chain(normals.into_iter().map(|c| (c, false)))
    {
        let rot = random_rotation(rng);
        out.push(StopSample {
            pair: extract_patch_pair_in_frame(v, center, &rot.matrix().transpose(), PATCH_SIZE)?,
            stop,
            center,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    /// Target share of bifurcation-flagged direction samples.
    pub bifurcation_fraction: f64,
    pub stop_per_endpoint: usize,
    pub normal_per_stop: f64,
    pub max_lambda: f64,
    pub rotate: bool,
    pub n_directions: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            bifurcation_fraction: 0.2,
            stop_per_endpoint: 8,
            normal_per_stop: 1.0,
            max_lambda: 1.0,
            rotate: true,
            n_directions: crate::sphere::DEFAULT_DIRECTIONS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Direction,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub kind: DatasetKind,
    pub sample_count: usize,
    pub patch_size: usize,
    pub fine_spacing: f64,
    pub coarse_spacing: f64,
    pub n_directions: usize,
    /// Floats per record: two patches, the label (direction only) and the flag.
    pub record_floats: usize,
    pub rng_seed: u64,
    pub flags: Vec<u8>,
}

impl DatasetManifest {
    fn new(kind: DatasetKind, n_directions: usize, seed: u64) -> Self {
        let label = if kind == DatasetKind::Direction { n_directions } else { 0 };
        Self {
            format: "ADS".into(),
            version: 1,
            kind,
            sample_count: 0,
            patch_size: PATCH_SIZE,
            fine_spacing: FINE_SPACING,
            coarse_spacing: COARSE_SPACING,
            n_directions,
            record_floats: 2 * PATCH_SIZE.pow(3) + label + 1,
            rng_seed: seed,
            flags: Vec::new(),
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size.pow(3)
    }

    pub fn label_len(&self) -> usize {
        match self.kind {
            DatasetKind::Direction => self.n_directions,
            DatasetKind::Stop => 0,
        }
    }
}

/// An in-memory ADS dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub data: Vec<f32>,
}

/// Borrowed view of one record.
#[derive(Debug, Clone, Copy)]
pub struct Record<'a> {
    pub fine: &'a [f32],
    pub coarse: &'a [f32],
    pub label: &'a [f32],
    pub flag: bool,
}

impl Dataset {
    pub fn new(kind: DatasetKind, n_directions: usize, seed: u64) -> Self {
        Self {
            manifest: DatasetManifest::new(kind, n_directions, seed),
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.manifest.sample_count
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push(&mut self, pair: &PatchPair, label: Option<&DirectionLabel>, flag: bool) -> Result<()> {
        let m = &self.manifest;
        let label_len = label.map_or(0, |l| l.weights().len());
        if pair.fine.values.len() != m.patch_len()
            || pair.coarse.values.len() != m.patch_len()
            || label_len != m.label_len()
        {
            return Err(Error::InvalidArgument(format!(
                "record does not match dataset layout (patch {}/{}, label {label_len})",
                pair.fine.values.len(),
                pair.coarse.values.len()
            )));
        }
        self.data.extend_from_slice(&pair.fine.values);
        self.data.extend_from_slice(&pair.coarse.values);
        if let Some(l) = label {
            self.data.extend(l.weights().iter().map(|&w| w as f32));
        }
        self.data.push(if flag { 1.0 } else { 0.0 });
        self.manifest.flags.push(flag as u8);
        self.manifest.sample_count += 1;
        Ok(())
    }

    pub fn record(&self, i: usize) -> Record<'_> {
        let m = &self.manifest;
        let n = m.record_floats;
        let r = &self.data[i * n..(i + 1) * n];
        let p = m.patch_len();
        Record {
            fine: &r[..p],
            coarse: &r[p..2 * p],
            label: &r[2 * p..2 * p + m.label_len()],
            flag: r[n - 1] != 0.0,
        }
    }

    fn duplicate(&mut self, i: usize) {
        let n = self.manifest.record_floats;
        self.data.extend_from_within(i * n..(i + 1) * n);
        let f = self.manifest.flags[i];
        self.manifest.flags.push(f);
        self.manifest.sample_count += 1;
    }

    pub fn flagged_fraction(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        self.manifest.flags.iter().filter(|&&f| f == 1).count() as f64 / self.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltDatasets {
    pub direction: Dataset,
    pub stop: Dataset,
    pub warnings: Vec<String>,
}

struct CaseSamples {
    direction: Dataset,
    stop: Dataset,
    dropped: usize,
}

fn build_case(
    case: usize,
    v: &Volume,
    tree: &CenterlineTree,
    grid: &SphereGrid,
    cfg: &DatasetConfig,
) -> Result<CaseSamples> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(case as u64);
    let index = TreeIndex::new(tree);
    let mut direction = Dataset::new(DatasetKind::Direction, grid.len(), cfg.seed);
    let mut dropped = 0;
    for i in 0..tree.len() {
        let lambda = rng.random_range(0.0..=cfg.max_lambda);
        let dir = random_unit(&mut rng);
        let rot = if cfg.rotate {
            random_rotation(&mut rng)
        } else {
            EulerRotation::IDENTITY
        };
        match make_direction_sample(v, &index, grid, i, lambda, dir, &rot) {
            Ok(s) => direction.push(&s.pair, Some(&s.label), s.bifurcation)?,
            Err(e) => {
                log::debug!("case {case} point {i}: sample dropped: {e}");
                dropped += 1;
            }
        }
    }
    if direction.is_empty() {
        return Err(Error::EmptyCase {
            case,
            reason: "no valid direction samples".into(),
        });
    }
    let mut stop = Dataset::new(DatasetKind::Stop, grid.len(), cfg.seed);
    for s in make_stop_samples(v, tree, cfg.stop_per_endpoint, cfg.normal_per_stop, &mut rng)? {
        stop.push(&s.pair, None, s.stop)?;
    }
    Ok(CaseSamples {
        direction,
        stop,
        dropped,
    })
}

/// Builds the direction and stop datasets from volume/tree cases. Cases are
/// processed in parallel and merged in case order, so the output depends only
/// on the inputs and `cfg.seed`.
pub fn build_dataset(cases: &[(Volume, CenterlineTree)], cfg: &DatasetConfig) -> Result<BuiltDatasets> {
    if cases.is_empty() {
        return Err(Error::InvalidArgument("no cases given".into()));
    }
    if !(0.0..1.0).contains(&cfg.bifurcation_fraction) {
        return Err(Error::InvalidArgument(format!(
            "bifurcation fraction {} outside [0, 1)",
            cfg.bifurcation_fraction
        )));
    }
    if !(0.0..=1.0).contains(&cfg.max_lambda) {
        return Err(Error::InvalidArgument(format!("max lambda {} outside [0, 1]", cfg.max_lambda)));
    }
    let grid = SphereGrid::fibonacci(cfg.n_directions)?;
    let per_case: Vec<CaseSamples> = cases
        .par_iter()
        .enumerate()
        .map(|(c, (v, t))| build_case(c, v, t, &grid, cfg))
        .collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let mut direction = Dataset::new(DatasetKind::Direction, grid.len(), cfg.seed);
    let mut stop = Dataset::new(DatasetKind::Stop, grid.len(), cfg.seed);
    for (c, cs) in per_case.into_iter().enumerate() {
        if cs.dropped > 0 {
            warnings.push(format!("case {c}: {} points without a valid label were skipped", cs.dropped));
        }
        direction.data.extend(cs.direction.data);
        direction.manifest.flags.extend(cs.direction.manifest.flags);
        direction.manifest.sample_count += cs.direction.manifest.sample_count;
        stop.data.extend(cs.stop.data);
        stop.manifest.flags.extend(cs.stop.manifest.flags);
        stop.manifest.sample_count += cs.stop.manifest.sample_count;
    }

    let bif: Vec<usize> = (0..direction.len()).filter(|&i| direction.manifest.flags[i] == 1).collect();
    if bif.is_empty() {
        warnings.push("no bifurcation samples; the bifurcation fraction cannot be met".into());
    } else {
        let f = cfg.bifurcation_fraction;
        let n = direction.len() as f64;
        let extra = ((f * n - bif.len() as f64) / (1.0 - f)).round();
        if extra > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(u64::MAX);
            for _ in 0..extra as usize {
                direction.duplicate(bif[rng.random_range(0..bif.len())]);
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(BuiltDatasets {
        direction,
        stop,
        warnings,
    })
}

/// Paths of the manifest and blob for a dataset stem.
pub fn dataset_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_owned();
    let mut json = s.clone();
    json.push(".json");
    let mut bin = s;
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

pub fn encode_dataset(ds: &Dataset) -> (String, Vec<u8>) {
    let manifest = serde_json::to_string_pretty(&ds.manifest).expect("manifest serializes");
    let mut blob = Vec::with_capacity(ds.data.len() * 4);
    for x in &ds.data {
        blob.extend_from_slice(&x.to_le_bytes());
    }
    (manifest, blob)
}

pub fn decode_dataset(manifest: &str, blob: &[u8], path: &Path) -> Result<Dataset> {
    let value: serde_json::Value =
        serde_json::from_str(manifest).map_err(|e| Error::corrupt(path, e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) != Some("ADS") {
        return Err(Error::corrupt(path, "missing ADS format tag"));
    }
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(1) {
        return Err(Error::VersionMismatch {
            expected: "1".into(),
            found: version.map_or_else(|| "none".into(), |v| v.to_string()),
        });
    }
    let m: DatasetManifest =
        serde_json::from_value(value).map_err(|e| Error::corrupt(path, e.to_string()))?;
    let expected = DatasetManifest::new(m.kind, m.n_directions, m.rng_seed);
    if m.record_floats != 2 * m.patch_len() + m.label_len() + 1 || m.patch_size != expected.patch_size {
        return Err(Error::corrupt(path, "record layout inconsistent with patch size and label length"));
    }
    if m.flags.len() != m.sample_count || m.flags.iter().any(|&f| f > 1) {
        return Err(Error::corrupt(path, "flags do not match the sample count"));
    }
    let want = m.sample_count * m.record_floats * 4;
    if blob.len() != want {
        return Err(Error::format(path, format!("blob holds {} bytes, expected {want}", blob.len())));
    }
    let data: Vec<f32> = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let ds = Dataset { manifest: m, data };
    for i in 0..ds.len() {
        let flag = ds.data[(i + 1) * ds.manifest.record_floats - 1];
        if flag != ds.manifest.flags[i] as f32 {
            return Err(Error::format(path, format!("record {i} flag disagrees with the manifest")));
        }
    }
    Ok(ds)
}

pub fn write_dataset(stem: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let (json, bin) = dataset_paths(stem.as_ref());
    let (manifest, blob) = encode_dataset(ds);
    std::fs::write(&json, manifest).map_err(|e| Error::io(&json, e))?;
    std::fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))
}

/// Reads a dataset given its stem or the path of its `.json` manifest.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let p = path.as_ref();
    let stem = if p.extension().is_some_and(|e| e == "json") {
        p.with_extension("")
    } else {
        p.to_path_buf()
    };
    let (json, bin) = dataset_paths(&stem);
    let manifest = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let blob = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    decode_dataset(&manifest, &blob, &json)
}

/// Writes `<prefix>.direction.{json,bin}` and `<prefix>.stop.{json,bin}`.
pub fn write_datasets(prefix: impl AsRef<Path>, built: &BuiltDatasets) -> Result<(PathBuf, PathBuf)> {
    let prefix = prefix.as_ref().as_os_str();
    let mut d = prefix.to_owned();
    d.push(".direction");
    let mut s = prefix.to_owned();
    s.push(".stop");
    write_dataset(&d, &built.direction)?;
    write_dataset(&s, &built.stop)?;
    Ok((PathBuf::from(d), PathBuf::from(s)))
}
