use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use vesseltrack::geometry::{Mat3, Vec3, WorldPoint};
use vesseltrack::labeling::{build_dataset, read_dataset, write_datasets, DatasetConfig, DatasetKind};
use vesseltrack::metrics::{default_selections, evaluate_case, EvalConfig};
use vesseltrack::network::{
    forward_dbc, forward_stc, load_weights, save_weights, ArchConfig, Variant, Weights,
};
use vesseltrack::phantom::{apply_stenosis, generate_tree, rasterize, RasterSpec, TreeSpec};
use vesseltrack::sphere::{normalized_entropy, PeakConstraints};
use vesseltrack::tracker::{track, write_diagnostics, NetworkPredictor, OraclePredictor, TrackerConfig};
use vesseltrack::tree::{read_actl, read_vessel, write_actl, CenterlineTree};
use vesseltrack::volume::{read_avol, write_avol, Patch, PatchPair, PATCH_SIZE};
use vesseltrack::Error;

use crate::{Cli, Command, UsageError};

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Phantom(a) => phantom(a, g.seed),
        Command::Dataset(a) => dataset(a, g.seed),
        Command::Track(a) => track_cmd(a, g.threads > 1 && !g.deterministic),
        Command::Eval(a) => eval(a),
        Command::Render(a) => crate::render::render(a),
        Command::Forward(a) => forward(a),
        Command::InitWeights(a) => init_weights(a, g.seed),
    }
}

fn parse_point(s: &str) -> Result<WorldPoint, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| format!("`{s}`: {e}"))?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("`{s}`: expected x,y,z")),
    }
}

/// Reads an ACTL tree, or a single `x y z radius` vessel as a one-segment tree.
pub fn load_tree(path: &Path) -> Result<CenterlineTree> {
    let head = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if head.starts_with(b"ACTL") {
        return Ok(read_actl(path)?);
    }
    let v = read_vessel(path)?;
    let mut t = CenterlineTree::new();
    let seg = t.new_segment();
    let mut prev = None;
    for (i, p) in v.points.iter().enumerate() {
        let r = v.radii.as_ref().map(|r| r[i]);
        prev = Some(t.push_point(*p, r, seg, prev));
    }
    Ok(t)
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Bifurcation generations below the root segment.
    #[arg(long, default_value_t = 2)]
    pub depth: u32,
    /// Smallest child deviation from the parent direction, degrees.
    #[arg(long, default_value_t = 25.0)]
    pub branch_angle_min: f64,
    /// Largest child deviation from the parent direction, degrees.
    #[arg(long, default_value_t = 45.0)]
    pub branch_angle_max: f64,
    /// Radius ratio from parent to child.
    #[arg(long, default_value_t = 0.75)]
    pub taper: f64,
    #[arg(long, default_value_t = 15.0)]
    pub segment_min: f64,
    #[arg(long, default_value_t = 30.0)]
    pub segment_max: f64,
    /// Peak lateral waviness, mm.
    #[arg(long, default_value_t = 1.0)]
    pub tortuosity: f64,
    /// Root radius, mm.
    #[arg(long, default_value_t = 3.0)]
    pub root_radius: f64,
    /// Voxel spacing, mm.
    #[arg(long, default_value_t = 0.5)]
    pub spacing: f64,
    /// Clearance between the tubes and the volume border, mm.
    #[arg(long, default_value_t = 12.0)]
    pub margin: f64,
    /// Lumen intensity above background.
    #[arg(long, default_value_t = 1.0)]
    pub contrast: f64,
    /// Standard deviation of additive Gaussian noise.
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    /// Width of the smooth tube wall, mm.
    #[arg(long, default_value_t = 0.4)]
    pub blur: f64,
    /// Severity of one stenosis on a random branch (0 disables).
    #[arg(long, default_value_t = 0.0)]
    pub stenosis: f64,
    /// Half-length of the stenosis, mm.
    #[arg(long, default_value_t = 3.0)]
    pub stenosis_extent: f64,
    /// Output stem; writes `<out>.avol` and `<out>.actl`.
    #[arg(long)]
    pub out: PathBuf,
}

fn phantom(a: &PhantomArgs, seed: u64) -> Result<()> {
    let spec = TreeSpec {
        depth: a.depth,
        branch_angle_range: (a.branch_angle_min, a.branch_angle_max),
        taper: a.taper,
        segment_length_range: (a.segment_min, a.segment_max),
        tortuosity: a.tortuosity,
        root_radius: a.root_radius,
        seed,
        ..TreeSpec::default()
    };
    let mut tree = generate_tree(&spec)?;
    if a.stenosis > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let segs = tree.segments();
        let seg = &segs[if segs.len() > 1 { rng.random_range(1..segs.len()) } else { 0 }];
        tree = apply_stenosis(&tree, seg[seg.len() / 2], a.stenosis, a.stenosis_extent)?;
    }
    let mut raster = RasterSpec::fitted(&tree, a.spacing, a.margin);
    raster.contrast = a.contrast;
    raster.noise_sigma = a.noise;
    raster.blur_sigma = a.blur;
    raster.seed = seed;
    let vol = rasterize(&tree, &raster)?;

    let avol = a.out.with_extension("avol");
    let actl = a.out.with_extension("actl");
    write_avol(&avol, &vol)?;
    write_actl(&actl, &tree)?;
    println!("segments: {}", tree.segments().len());
    println!("bifurcations: {}", tree.bifurcation_points().len());
    println!("length: {:.1} mm", tree.total_length());
    println!("points: {}", tree.len());
    println!("volume: {:?} voxels at {} mm", vol.dims(), a.spacing);
    println!("wrote {} and {}", avol.display(), actl.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct DatasetArgs {
    /// Case as `<volume.avol>:<tree.actl>`; repeat for several cases.
    #[arg(long = "case", value_name = "AVOL:ACTL")]
    pub cases: Vec<String>,
    /// Target share of bifurcation samples among direction samples.
    #[arg(long, default_value_t = 0.2)]
    pub bifurcation_fraction: f64,
    /// Stop samples drawn beyond each vessel end.
    #[arg(long, default_value_t = 8)]
    pub stop_per_endpoint: usize,
    /// Normal (continue) samples per stop sample.
    #[arg(long, default_value_t = 1.0)]
    pub normal_per_stop: f64,
    /// Largest patch-center shift, in vessel radii.
    #[arg(long, default_value_t = 1.0)]
    pub max_lambda: f64,
    /// Disable random patch rotations.
    #[arg(long)]
    pub no_rotate: bool,
    /// Number of sphere directions.
    #[arg(long, default_value_t = 1000)]
    pub directions: usize,
    /// Output prefix; writes `<out>.direction.{json,bin}` and `<out>.stop.{json,bin}`.
    #[arg(long)]
    pub out: PathBuf,
}

fn dataset(a: &DatasetArgs, seed: u64) -> Result<()> {
    if a.cases.is_empty() {
        bail!(UsageError("at least one --case is required".into()));
    }
    let mut cases = Vec::new();
    for c in &a.cases {
        let (v, t) = c
            .split_once(':')
            .ok_or_else(|| UsageError(format!("case `{c}` is not `<volume>:<tree>`")))?;
        cases.push((read_avol(v)?, read_actl(t)?));
    }
    let cfg = DatasetConfig {
        bifurcation_fraction: a.bifurcation_fraction,
        stop_per_endpoint: a.stop_per_endpoint,
        normal_per_stop: a.normal_per_stop,
        max_lambda: a.max_lambda,
        rotate: !a.no_rotate,
        n_directions: a.directions,
        seed,
    };
    let built = build_dataset(&cases, &cfg)?;
    for w in &built.warnings {
        log::warn!("{w}");
    }
    let (dir_path, stop_path) = write_datasets(&a.out, &built)?;
    let d = &built.direction;
    let s = &built.stop;
    println!("direction samples: {}", d.len());
    println!("bifurcation fraction: {:.3}", d.flagged_fraction());
    println!("stop samples: {}", s.len());
    println!("stop fraction: {:.3}", s.flagged_fraction());
    println!("wrote {} and {}", dir_path.display(), stop_path.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrackArgs {
    /// Input volume (AVOL); required with network weights.
    #[arg(long)]
    pub volume: Option<PathBuf>,
    /// Direction network weights (AWT).
    #[arg(long)]
    pub dbc: Option<PathBuf>,
    /// Stop network weights (AWT).
    #[arg(long)]
    pub stc: Option<PathBuf>,
    /// Ground-truth tree (ACTL) driving an oracle predictor instead of networks.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Seed point `x,y,z` in mm; give one or two.
    #[arg(long = "ostium", value_name = "X,Y,Z", value_parser = parse_point)]
    pub ostia: Vec<WorldPoint>,
    /// Step between consecutive centerline points, mm.
    #[arg(long, default_value_t = 1.0)]
    pub step_size: f64,
    /// Consecutive stop predictions tolerated before a branch ends.
    #[arg(long, default_value_t = 3)]
    pub stop_counter_max: u32,
    /// Normalized direction entropy above which a step counts as a stop.
    #[arg(long, default_value_t = 0.8)]
    pub entropy_max: f64,
    /// Stop probability above which a step counts as a stop.
    #[arg(long, default_value_t = 0.3)]
    pub stop_prob_max: f64,
    /// Bifurcation probability at which a third direction is followed.
    #[arg(long, default_value_t = 0.5)]
    pub bifurcation_threshold: f64,
    /// Width of the spherical smoothing kernel, degrees.
    #[arg(long, default_value_t = 7.0)]
    pub smoothing_sigma: f64,
    /// Largest angle between the previous direction and the forward peak, degrees.
    #[arg(long, default_value_t = 60.0)]
    pub forward_max: f64,
    /// Smallest angle between the two continuation peaks, degrees.
    #[arg(long, default_value_t = 110.0)]
    pub opposite_min: f64,
    /// Smallest angle between the branch peak and the other two, degrees.
    #[arg(long, default_value_t = 40.0)]
    pub branch_min: f64,
    /// Upper bound on accepted points.
    #[arg(long, default_value_t = 20000)]
    pub max_points: usize,
    /// Number of sphere directions used by the oracle.
    #[arg(long, default_value_t = 1000)]
    pub directions: usize,
    /// Oracle bump concentration.
    #[arg(long, default_value_t = 50.0)]
    pub kappa: f64,
    /// Share of uniform noise mixed into oracle responses.
    #[arg(long, default_value_t = 0.05)]
    pub oracle_noise: f64,
    /// Output tree (ACTL).
    #[arg(long)]
    pub out: PathBuf,
    /// Per-point diagnostics (JSON lines).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

impl TrackArgs {
    fn config(&self, concurrent: bool) -> TrackerConfig {
        TrackerConfig {
            step_size: self.step_size,
            stop_counter_max: self.stop_counter_max,
            dir_entropy_max: self.entropy_max,
            stop_prob_max: self.stop_prob_max,
            bifurcation_threshold: self.bifurcation_threshold,
            peaks: PeakConstraints {
                forward_max_deg: self.forward_max,
                opposite_min_deg: self.opposite_min,
                branch_min_deg: self.branch_min,
            },
            smoothing_sigma_deg: self.smoothing_sigma,
            max_points: self.max_points,
            concurrent,
        }
    }
}

fn track_cmd(a: &TrackArgs, concurrent: bool) -> Result<()> {
    if a.ostia.is_empty() || a.ostia.len() > 2 {
        bail!(UsageError(format!("give one or two --ostium points, got {}", a.ostia.len())));
    }
    let cfg = a.config(concurrent);
    let t0 = Instant::now();
    let result = match (&a.oracle, &a.dbc, &a.stc) {
        (Some(gt), None, None) => {
            let gt = read_actl(gt)?;
            let o = OraclePredictor::new(&gt, a.directions, a.kappa, a.oracle_noise)?;
            track(&o, &a.ostia, &cfg)?
        }
        (None, Some(dbc), Some(stc)) => {
            let vol = a
                .volume
                .as_ref()
                .ok_or_else(|| UsageError("--volume is required with network weights".into()))?;
            let vol = read_avol(vol)?;
            let dbc = load_weights(dbc)?;
            let stc = load_weights(stc)?;
            for w in [&dbc, &stc] {
                if w.arch().patch_size != PATCH_SIZE {
                    bail!(Error::Compatibility(format!(
                        "weights expect {}^3 patches, the tracker extracts {PATCH_SIZE}^3",
                        w.arch().patch_size
                    )));
                }
            }
            stc.check_directions(dbc.arch().n_directions)?;
            let p = NetworkPredictor::new(&vol, &dbc, &stc)?;
            track(&p, &a.ostia, &cfg)?
        }
        _ => bail!(UsageError("use either --oracle or both --dbc and --stc".into())),
    };
    let secs = t0.elapsed().as_secs_f64();
    write_actl(&a.out, &result.tree)?;
    if let Some(d) = &a.diagnostics {
        write_diagnostics(d, &result.diagnostics)?;
    }
    println!("points: {}", result.tree.len());
    println!("segments: {}", result.tree.segments().len());
    println!("predictor calls: {}", result.predictor_calls);
    if result.truncated {
        println!("truncated at {} points", cfg.max_points);
    }
    println!("time: {secs:.3} s");
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Reference tree (ACTL or `x y z radius`).
    #[arg(long)]
    pub reference: PathBuf,
    /// Tracked tree (ACTL or `x y z radius`).
    #[arg(long)]
    pub tracked: PathBuf,
    /// File with one `x y z` selection point per reference vessel; defaults to
    /// the vessel ends.
    #[arg(long)]
    pub selections: Option<PathBuf>,
    /// Resampling spacing for both centerlines, mm.
    #[arg(long, default_value_t = 0.5)]
    pub spacing: f64,
    /// Match radius for sensitivity and false positive rate, mm.
    #[arg(long, default_value_t = 1.0)]
    pub fixed_radius: f64,
    /// Tracking time in seconds to report in the T column.
    #[arg(long)]
    pub time: Option<f64>,
    /// Output stem; writes `<out>.json` and `<out>.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn read_selections(path: &Path) -> Result<Vec<WorldPoint>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .ok()
            .filter(|v: &Vec<f64>| v.len() >= 3)
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("line {}: expected `x y z`", n + 1),
            })?;
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

fn eval(a: &EvalArgs) -> Result<()> {
    let reference = load_tree(&a.reference)?;
    let tracked = load_tree(&a.tracked)?;
    let selections = match &a.selections {
        Some(p) => read_selections(p)?,
        None => default_selections(&reference),
    };
    let cfg = EvalConfig {
        spacing: a.spacing,
        fixed_radius: a.fixed_radius,
    };
    let mut report = evaluate_case(&reference, &tracked, &selections, &cfg)?;
    report.time_s = a.time;
    let table = report.table();
    print!("{table}");
    if let Some(out) = &a.out {
        let json = serde_json::to_string_pretty(&report)?;
        std::fs::write(out.with_extension("json"), json + "\n")?;
        std::fs::write(out.with_extension("txt"), &table)?;
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Input volume (AVOL).
    #[arg(long)]
    pub volume: PathBuf,
    /// Tracked tree drawn in red.
    #[arg(long)]
    pub tracked: Option<PathBuf>,
    /// Reference tree drawn in green.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Output stem; writes `<out>_x.png`, `<out>_y.png` and `<out>_z.png`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// Network weights (AWT), direction or stop variant.
    #[arg(long)]
    pub weights: PathBuf,
    /// Dataset (ADS) stem or manifest path holding the input patches.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Record index.
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    /// Number of strongest directions to list.
    #[arg(long, default_value_t = 5)]
    pub top: usize,
}

fn forward(a: &ForwardArgs) -> Result<()> {
    let w = load_weights(&a.weights)?;
    let ds = read_dataset(&a.dataset)?;
    let m = &ds.manifest;
    if m.patch_size != w.arch().patch_size {
        bail!(Error::Compatibility(format!(
            "dataset patches are {}^3, weights expect {}^3",
            m.patch_size,
            w.arch().patch_size
        )));
    }
    if a.index >= ds.len() {
        bail!(UsageError(format!("record {} out of range ({} records)", a.index, ds.len())));
    }
    let rec = ds.record(a.index);
    let patch = |values: &[f32], spacing: f64| Patch {
        size: m.patch_size,
        spacing,
        center: Vec3::ZERO,
        frame: Mat3::IDENTITY,
        values: values.to_vec(),
    };
    let pair = PatchPair {
        fine: patch(rec.fine, m.fine_spacing),
        coarse: patch(rec.coarse, m.coarse_spacing),
    };
    let out = match w.variant() {
        Variant::Dbc => {
            if m.kind == DatasetKind::Direction {
                w.check_directions(m.n_directions)?;
            }
            let o = forward_dbc(&w, &pair)?;
            let probs = o.direction.probs();
            let mut order: Vec<usize> = (0..probs.len()).collect();
            order.sort_by(|&i, &j| probs[j].total_cmp(&probs[i]).then(i.cmp(&j)));
            let top: Vec<_> = order
                .iter()
                .take(a.top)
                .map(|&i| json!({ "index": i, "prob": probs[i] }))
                .collect();
            json!({
                "variant": "dbc",
                "record": a.index,
                "bifurcation_prob": o.bifurcation_prob,
                "direction_entropy": normalized_entropy(&o.direction),
                "top_directions": top,
                "label_flag": rec.flag,
            })
        }
        Variant::Stc => json!({
            "variant": "stc",
            "record": a.index,
            "stop_prob": forward_stc(&w, &pair)?,
            "label_flag": rec.flag,
        }),
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Dbc,
    Stc,
}

#[derive(Debug, Args)]
pub struct InitWeightsArgs {
    #[arg(long, value_enum)]
    pub variant: VariantArg,
    /// Feature channels per convolution layer.
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    /// Hidden width of the patch head.
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    /// Number of sphere directions.
    #[arg(long, default_value_t = 1000)]
    pub directions: usize,
    /// Output weights (AWT).
    #[arg(long)]
    pub out: PathBuf,
}

fn init_weights(a: &InitWeightsArgs, seed: u64) -> Result<()> {
    let mut arch = ArchConfig::new(match a.variant {
        VariantArg::Dbc => Variant::Dbc,
        VariantArg::Stc => Variant::Stc,
    });
    arch.channels = a.channels;
    arch.hidden = a.hidden;
    arch.n_directions = a.directions;
    let w = Weights::random(arch, seed)?;
    save_weights(&a.out, &w)?;
    println!("wrote {} ({} tensors)", a.out.display(), w.tensors().len());
    Ok(())
}
