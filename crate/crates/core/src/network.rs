//! Inference for the dual-resolution direction/bifurcation classifier and the
//! stop classifier, the combined training loss, and the AWT v1 weight file.
//!
//! Each network runs two identical convolutional branches, one on the fine
//! patch and one on the coarse patch. A branch is seven `conv -> batch norm ->
//! ReLU` stages with kernel 3, same padding and dilations `[1, 1, 2, 4, 1, 1,
//! 1]`. The branch outputs are concatenated along channels, averaged over
//! space and mapped to `n_directions` logits. The softmax of those logits is
//! the direction response; two more dense layers (ReLU, then sigmoid) give the
//! patch probability, which is the bifurcation probability for the direction
//! network and the stop probability for the stop network.
//!
//! Feature maps are stored channel-major with x fastest, so a patch value at
//! `(i, j, k)` is element `[k][j][i]` of a `[depth, height, width]` block.
//!
//! # AWT v1
//!
//! ```text
//! bytes 0..4     b"AWT1"
//! bytes 4..12    manifest length L, u64 little endian
//! bytes 12..12+L JSON manifest (UTF-8)
//! rest           tensor blob, f32 little endian
//! ```
//!
//! The manifest lists `format`, `version`, `variant`, `arch`, `tensors`
//! (name, shape, byte offset into the blob, dtype `f32le`), `blob_bytes` and
//! `checksum`, the lowercase hex SHA-256 of the blob.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sphere::{DirectionLabel, DirectionResponse};
use crate::volume::{PatchPair, COARSE_SPACING, FINE_SPACING, PATCH_SIZE};

pub const DILATIONS: [usize; 7] = [1, 1, 2, 4, 1, 1, 1];
pub const KERNEL: usize = 3;
pub const BCE_CLAMP: f64 = 1e-7;
pub const DEFAULT_LAMBDA_B: f64 = 5.0;
const MAGIC: &[u8; 4] = b"AWT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Dbc,
    Stc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub patch_size: usize,
    pub fine_spacing: f64,
    pub coarse_spacing: f64,
    pub channels: usize,
    pub dilations: Vec<usize>,
    pub n_directions: usize,
    pub hidden: usize,
    pub bn_eps: f64,
    pub variant: Variant,
}

impl ArchConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            patch_size: PATCH_SIZE,
            fine_spacing: FINE_SPACING,
            coarse_spacing: COARSE_SPACING,
            channels: 32,
            dilations: DILATIONS.to_vec(),
            n_directions: crate::sphere::DEFAULT_DIRECTIONS,
            hidden: 64,
            bn_eps: 1e-5,
            variant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.dilations != DILATIONS {
            return bad(format!("dilations must be {DILATIONS:?}, got {:?}", self.dilations));
        }
        if self.patch_size == 0 || self.patch_size.is_multiple_of(2) {
            return bad(format!("patch size {} must be odd", self.patch_size));
        }
        if self.channels == 0 || self.hidden == 0 || self.n_directions < 2 {
            return bad("channels, hidden width and direction count must be positive".into());
        }
        if !(self.bn_eps > 0.0) {
            return bad(format!("bn_eps {} must be positive", self.bn_eps));
        }
        Ok(())
    }

    /// Names and shapes of every tensor, in file order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let mut out = Vec::new();
        for b in 1..=2 {
            for l in 1..=DILATIONS.len() {
                let cin = if l == 1 { 1 } else { c };
                out.push((format!("b{b}.conv{l}.weight"), vec![c, cin, KERNEL, KERNEL, KERNEL]));
                out.push((format!("b{b}.conv{l}.bias"), vec![c]));
                for p in ["weight", "bias", "running_mean", "running_var"] {
                    out.push((format!("b{b}.bn{l}.{p}"), vec![c]));
                }
            }
        }
        out.push(("direction.weight".into(), vec![self.n_directions, 2 * c]));
        out.push(("direction.bias".into(), vec![self.n_directions]));
        out.push(("patch.fc1.weight".into(), vec![self.hidden, self.n_directions]));
        out.push(("patch.fc1.bias".into(), vec![self.hidden]));
        out.push(("patch.fc2.weight".into(), vec![1, self.hidden]));
        out.push(("patch.fc2.bias".into(), vec![1]));
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Named tensors in file order plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    arch: ArchConfig,
    tensors: Vec<(String, Tensor)>,
}

impl Weights {
    pub fn from_tensors(arch: ArchConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        arch.validate()?;
        let want = arch.tensor_shapes();
        let mut ordered = Vec::with_capacity(want.len());
        for (name, shape) in &want {
            let Some((_, t)) = tensors.iter().find(|(n, _)| n == name) else {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: Vec::new(),
                });
            };
            if &t.shape != shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape.clone(),
                });
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidArgument(format!("tensor `{name}` holds non-finite values")));
            }
            ordered.push((name.clone(), t.clone()));
        }
        if let Some((extra, _)) = tensors.iter().find(|(n, _)| !want.iter().any(|(w, _)| w == n)) {
            return Err(Error::InvalidArgument(format!("unexpected tensor `{extra}`")));
        }
        Ok(Self { arch, tensors: ordered })
    }

    /// All weights and biases zero and running variances one, so every layer
    /// outputs zero: uniform direction response and probability 0.5.
    pub fn zeros(arch: ArchConfig) -> Result<Self> {
        let tensors = arch
            .tensor_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(shape);
                if name.ends_with("running_var") {
                    t.data.fill(1.0);
                }
                (name, t)
            })
            .collect();
        Self::from_tensors(arch, tensors)
    }

    /// Random weights with He-style scaling and plausible normalization
    /// statistics.
    pub fn random(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |sd: f64, n: usize| -> Vec<f32> {
            let d = Normal::new(0.0, sd).expect("positive sd");
            (0..n).map(|_| d.sample(&mut rng) as f32).collect()
        };
        let mut tensors = Vec::new();
        for (name, shape) in arch.tensor_shapes() {
            let n: usize = shape.iter().product();
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let data = if name.ends_with("running_var") {
                normal(0.2, n).into_iter().map(|x| 1.0 + x.abs()).collect()
            } else if name.contains(".bn") && name.ends_with(".weight") {
                normal(0.1, n).into_iter().map(|x| 1.0 + x).collect()
            } else if name.ends_with(".weight") {
                normal((2.0 / fan_in as f64).sqrt(), n)
            } else {
                normal(0.05, n)
            };
            tensors.push((name, Tensor { shape, data }));
        }
        Self::from_tensors(arch, tensors)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn variant(&self) -> Variant {
        self.arch.variant
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("tensor `{name}` is validated at construction"))
            .1
    }

    /// Fails unless the direction layer matches a sphere grid of `n` points.
    pub fn check_directions(&self, n: usize) -> Result<()> {
        if self.arch.n_directions != n {
            return Err(Error::Compatibility(format!(
                "weights predict {} directions but the sphere grid has {n}",
                self.arch.n_directions
            )));
        }
        Ok(())
    }
}

/// A channel-major 3D feature block, `[channels][depth][height][width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub dims: [usize; 3],
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * dims.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!(
                "feature map of {channels}x{dims:?} needs {} values, got {}",
                channels * dims.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self { channels, dims, data })
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }
}

/// Dilated 3x3x3 cross-correlation with zero padding equal to the dilation,
/// which preserves the spatial size. `kernel` is `[out][in][kz][ky][kx]`.
pub fn conv3d(input: &FeatureMap, kernel: &Tensor, bias: &[f32], dilation: usize) -> Result<FeatureMap> {
    let [cout, cin, kd, kh, kw] = kernel.shape[..] else {
        return Err(Error::InvalidArgument(format!("kernel must be 5D, got {:?}", kernel.shape)));
    };
    if (kd, kh, kw) != (KERNEL, KERNEL, KERNEL) || cin != input.channels || bias.len() != cout {
        return Err(Error::InvalidArgument(format!(
            "kernel {:?} and bias {} incompatible with a {}-channel input",
            kernel.shape,
            bias.len(),
            input.channels
        )));
    }
    if dilation == 0 {
        return Err(Error::InvalidArgument("dilation must be positive".into()));
    }
    let [d, h, w] = input.dims;
    let plane = h * w;
    let n = d * plane;
    let dil = dilation as isize;
    let mut out = vec![0.0f32; cout * n];
    out.par_chunks_mut(n).enumerate().for_each(|(co, acc)| {
        acc.fill(bias[co]);
        for ci in 0..cin {
            let src = input.channel(ci);
            let taps = &kernel.data[(co * cin + ci) * 27..(co * cin + ci + 1) * 27];
            for (t, &wt) in taps.iter().enumerate() {
                if wt == 0.0 {
                    continue;
                }
                let oz = (t / 9) as isize - 1;
                let oy = ((t / 3) % 3) as isize - 1;
                let ox = (t % 3) as isize - 1;
                let (dz, dy, dx) = (oz * dil, oy * dil, ox * dil);
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for z in 0..d {
                    let zz = z as isize + dz;
                    if zz < 0 || zz >= d as isize {
                        continue;
                    }
                    for y in 0..h {
                        let yy = y as isize + dy;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let o = z * plane + y * w;
                        let s = zz as usize * plane + yy as usize * w;
                        let dst = &mut acc[o + x0..o + x1];
                        let srow = &src[(s as isize + x0 as isize + dx) as usize..(s as isize + x1 as isize + dx) as usize];
                        for (a, &b) in dst.iter_mut().zip(srow) {
                            *a += wt * b;
                        }
                    }
                }
            }
        }
    });
    FeatureMap::new(cout, input.dims, out)
}

/// Inference-mode batch normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batch_norm(x: &mut FeatureMap, gamma: &[f32], beta: &[f32], mean: &[f32], var: &[f32], eps: f64) {
    let n = x.voxels();
    for c in 0..x.channels {
        let scale = gamma[c] as f64 / (var[c] as f64 + eps).sqrt();
        let shift = beta[c] as f64 - mean[c] as f64 * scale;
        let (scale, shift) = (scale as f32, shift as f32);
        for v in &mut x.data[c * n..(c + 1) * n] {
            *v = *v * scale + shift;
        }
    }
}

pub fn relu_in_place(x: &mut FeatureMap) {
    for v in &mut x.data {
        *v = v.max(0.0);
    }
}

fn branch(w: &Weights, b: usize, values: &[f32]) -> Result<Vec<f64>> {
    let s = w.arch.patch_size;
    let mut x = FeatureMap::new(1, [s, s, s], values.to_vec())?;
    for (l, &dil) in DILATIONS.iter().enumerate() {
        let l = l + 1;
        x = conv3d(
            &x,
            w.get(&format!("b{b}.conv{l}.weight")),
            &w.get(&format!("b{b}.conv{l}.bias")).data,
            dil,
        )?;
        batch_norm(
            &mut x,
            &w.get(&format!("b{b}.bn{l}.weight")).data,
            &w.get(&format!("b{b}.bn{l}.bias")).data,
            &w.get(&format!("b{b}.bn{l}.running_mean")).data,
            &w.get(&format!("b{b}.bn{l}.running_var")).data,
            w.arch.bn_eps,
        );
        relu_in_place(&mut x);
    }
    let n = x.voxels() as f64;
    Ok((0..x.channels)
        .map(|c| x.channel(c).iter().map(|&v| v as f64).sum::<f64>() / n)
        .collect())
}

fn dense(weight: &Tensor, bias: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = weight.shape[1];
    weight
        .data
        .chunks_exact(cols)
        .zip(&bias.data)
        .map(|(row, &b)| b as f64 + row.iter().zip(x).map(|(&w, &v)| w as f64 * v).sum::<f64>())
        .collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_patches(w: &Weights, p: &PatchPair) -> Result<()> {
    let a = &w.arch;
    for (patch, spacing) in [(&p.fine, a.fine_spacing), (&p.coarse, a.coarse_spacing)] {
        if patch.size != a.patch_size || (patch.spacing - spacing).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "patch {}^3 at {} mm does not match the network's {}^3 at {spacing} mm",
                patch.size, patch.spacing, a.patch_size
            )));
        }
    }
    Ok(())
}

/// Runs both branches and the heads; returns the direction distribution and
/// the patch probability.
fn forward(w: &Weights, p: &PatchPair) -> Result<(Vec<f64>, f64)> {
    check_patches(w, p)?;
    let (b1, b2) = rayon::join(|| branch(w, 1, &p.fine.values), || branch(w, 2, &p.coarse.values));
    let mut pooled = b1?;
    pooled.extend(b2?);
    let dir = softmax(&dense(w.get("direction.weight"), w.get("direction.bias"), &pooled));
    let hidden: Vec<f64> = dense(w.get("patch.fc1.weight"), w.get("patch.fc1.bias"), &dir)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let logit = dense(w.get("patch.fc2.weight"), w.get("patch.fc2.bias"), &hidden)[0];
    Ok((dir, sigmoid(logit)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DbcOutput {
    pub direction: DirectionResponse,
    pub bifurcation_prob: f64,
}

pub fn forward_dbc(w: &Weights, p: &PatchPair) -> Result<DbcOutput> {
    if w.variant() != Variant::Dbc {
        return Err(Error::InvalidArgument("direction network weights required".into()));
    }
    let (dir, prob) = forward(w, p)?;
    Ok(DbcOutput {
        direction: DirectionResponse::new(dir)?,
        bifurcation_prob: prob,
    })
}

pub fn forward_stc(w: &Weights, p: &PatchPair) -> Result<f64> {
    if w.variant() != Variant::Stc {
        return Err(Error::InvalidArgument("stop network weights required".into()));
    }
    Ok(forward(w, p)?.1)
}

/// Cross-entropy of the direction response against the label plus
/// `lambda_b` times the binary cross-entropy of the patch probability.
/// Probabilities are clamped to `[1e-7, 1 - 1e-7]` inside the logarithms.
pub fn combined_loss(pred: &DbcOutput, label: &DirectionLabel, bifurcation: bool, lambda_b: f64) -> Result<f64> {
    let probs = pred.direction.probs();
    let weights = label.weights();
    if probs.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "label has {} entries, prediction {}",
            weights.len(),
            probs.len()
        )));
    }
    let ce: f64 = weights
        .iter()
        .zip(probs)
        .filter(|(&l, _)| l > 0.0)
        .map(|(&l, &q)| -l * q.max(BCE_CLAMP).ln())
        .sum();
    let p = pred.bifurcation_prob.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    let bce = if bifurcation { -p.ln() } else { -(1.0 - p).ln() };
    Ok(ce + lambda_b * bce)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format: String,
    pub version: u32,
    pub variant: Variant,
    pub arch: ArchConfig,
    pub tensors: Vec<TensorRecord>,
    pub blob_bytes: usize,
    pub checksum: String,
}

pub fn encode_weights(w: &Weights) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut records = Vec::new();
    for (name, t) in &w.tensors {
        records.push(TensorRecord {
            name: name.clone(),
            shape: t.shape.clone(),
            offset: blob.len(),
            dtype: "f32le".into(),
        });
        for x in &t.data {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = WeightsManifest {
        format: "AWT".into(),
        version: 1,
        variant: w.arch.variant,
        arch: w.arch.clone(),
        tensors: records,
        blob_bytes: blob.len(),
        checksum: hex::encode(Sha256::digest(&blob)),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<Weights> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::corrupt(path, "missing AWT1 magic"));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let Some(json) = bytes.get(12..12usize.saturating_add(len)) else {
        return Err(Error::corrupt(path, "manifest extends past end of file"));
    };
    let value: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| Error::corrupt(path, format!("manifest: {e}")))?;
    if value.get("format").and_then(|f| f.as_str()) != Some("AWT") {
        return Err(Error::corrupt(path, "manifest lacks the AWT format tag"));
    }
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(1) {
        return Err(Error::VersionMismatch {
            expected: "1".into(),
            found: version.map_or_else(|| "none".into(), |v| v.to_string()),
        });
    }
    let m: WeightsManifest =
        serde_json::from_value(value).map_err(|e| Error::corrupt(path, format!("manifest: {e}")))?;
    if m.variant != m.arch.variant {
        return Err(Error::corrupt(path, "variant disagrees with arch"));
    }
    let blob = &bytes[12 + len..];
    if blob.len() != m.blob_bytes {
        return Err(Error::corrupt(
            path,
            format!("blob holds {} bytes, manifest declares {}", blob.len(), m.blob_bytes),
        ));
    }
    let found = hex::encode(Sha256::digest(blob));
    if found != m.checksum {
        return Err(Error::ChecksumMismatch {
            expected: m.checksum,
            found,
        });
    }
    let mut tensors = Vec::with_capacity(m.tensors.len());
    for r in &m.tensors {
        if r.dtype != "f32le" {
            return Err(Error::corrupt(path, format!("tensor `{}` has dtype {}", r.name, r.dtype)));
        }
        let n: usize = r.shape.iter().product();
        let Some(raw) = blob.get(r.offset..r.offset + 4 * n) else {
            return Err(Error::corrupt(path, format!("tensor `{}` extends past the blob", r.name)));
        };
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.push((r.name.clone(), Tensor { shape: r.shape.clone(), data }));
    }
    m.arch.validate()?;
    Weights::from_tensors(m.arch, tensors)
}

pub fn save_weights(path: impl AsRef<Path>, w: &Weights) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(w)).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Weights> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes, path)
}
