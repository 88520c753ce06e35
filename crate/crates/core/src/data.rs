//! Synthetic saliency scenes with structured label noise, and PNG ingestion.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::objective::luminance;
use crate::rng::{self, purpose, Rng};
use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("resolution {0} is not a positive multiple of 16")]
    Resolution(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("files without a counterpart: {0:?}")]
    Orphans(Vec<String>),
    #[error("cannot decode {path}: {source}")]
    Decode { path: PathBuf, source: image::ImageError },
    #[error("cannot encode {path}: {source}")]
    Encode { path: PathBuf, source: image::ImageError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
    #[error("invalid noise specification: {0}")]
    Noise(String),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub id: usize,
    /// `3×H×W` in `[0, 1]`.
    pub image: Tensor,
    /// `1×H×W` noisy label in `[0, 1]`.
    pub label: Tensor,
    /// `1×H×W` binary ground truth, for evaluation only.
    pub clean: Option<Tensor>,
}

impl SamplePair {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseKind {
    None,
    Dilate {
        radius: usize,
    },
    Erode {
        radius: usize,
    },
    /// Soft salient blobs centred on random points of the image border.
    BoundaryBlobs {
        count: usize,
        radius: f64,
    },
    /// Background pixels near the object whose luminance resembles the object's.
    AttachedBackground {
        radius: usize,
        tolerance: f64,
    },
    /// Per-example random composition of the kinds above.
    Mixture {
        max_radius: usize,
        max_blobs: usize,
        blob_radius: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    #[serde(flatten)]
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            seed: 0,
        }
    }

    pub fn mixture(seed: u64) -> Self {
        Self {
            kind: NoiseKind::Mixture {
                max_radius: 3,
                max_blobs: 3,
                blob_radius: 5.0,
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = match self.kind {
            NoiseKind::BoundaryBlobs { radius, .. } => !(radius >= 0.0),
            NoiseKind::AttachedBackground { tolerance, .. } => !(tolerance >= 0.0),
            NoiseKind::Mixture { blob_radius, .. } => !(blob_radius >= 0.0),
            _ => false,
        };
        if bad {
            return Err(DataError::Noise(format!("negative magnitude in {self:?}")));
        }
        Ok(())
    }

    /// Parses `none`, `dilate:R`, `erode:R`, `blobs:N:R`, `attached:R:TOL`, `mixture`.
    pub fn parse(text: &str, seed: u64) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        let num = |i: usize| -> Result<f64> {
            parts
                .get(i)
                .ok_or_else(|| DataError::Noise(format!("`{text}` is missing parameter {i}")))?
                .parse::<f64>()
                .map_err(|e| DataError::Noise(format!("`{text}`: {e}")))
        };
        let kind = match parts[0] {
            "none" => NoiseKind::None,
            "dilate" => NoiseKind::Dilate { radius: num(1)? as usize },
            "erode" => NoiseKind::Erode { radius: num(1)? as usize },
            "blobs" => NoiseKind::BoundaryBlobs {
                count: num(1)? as usize,
                radius: num(2)?,
            },
            "attached" => NoiseKind::AttachedBackground {
                radius: num(1)? as usize,
                tolerance: num(2)?,
            },
            "mixture" => return Ok(Self::mixture(seed)),
            other => {
                return Err(DataError::Noise(format!(
                    "unknown kind `{other}`; expected none, dilate, erode, blobs, attached or mixture"
                )))
            }
        };
        let spec = Self { kind, seed };
        spec.validate()?;
        Ok(spec)
    }
}

type Mask = Vec<bool>;

fn disk_offsets(r: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dy, dx));
            }
        }
    }
    out
}

/// Binary dilation by a disk of radius `r`.
pub fn dilate(mask: &[bool], h: usize, w: usize, r: usize) -> Mask {
    if r == 0 {
        return mask.to_vec();
    }
    let offsets = disk_offsets(r);
    let mut out = vec![false; h * w];
    for u in 0..h {
        for v in 0..w {
            if !mask[u * w + v] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (y, x) = (u as isize + dy, v as isize + dx);
                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                    out[y as usize * w + x as usize] = true;
                }
            }
        }
    }
    out
}

/// Binary erosion by a disk of radius `r`; pixels outside the frame count as background.
pub fn erode(mask: &[bool], h: usize, w: usize, r: usize) -> Mask {
    let offsets = disk_offsets(r);
    (0..h * w)
        .map(|i| {
            let (u, v) = ((i / w) as isize, (i % w) as isize);
            offsets.iter().all(|&(dy, dx)| {
                let (y, x) = (u + dy, v + dx);
                y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize]
            })
        })
        .collect()
}

fn to_mask(t: &[f64]) -> Mask {
    t.iter().map(|&v| v >= 0.5).collect()
}

fn from_mask(m: &[bool]) -> Vec<f64> {
    m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

fn add_blobs(y: &mut [f64], h: usize, w: usize, count: usize, radius: f64, rng: &mut Rng) {
    if radius <= 0.0 {
        return;
    }
    for _ in 0..count {
        let (cu, cv) = match rng.gen_range(0..4) {
            0 => (0.0, rng.gen_range(0..w) as f64),
            1 => ((h - 1) as f64, rng.gen_range(0..w) as f64),
            2 => (rng.gen_range(0..h) as f64, 0.0),
            _ => (rng.gen_range(0..h) as f64, (w - 1) as f64),
        };
        let rad = radius * rng.gen_range(0.6..1.4);
        let amp = rng.gen_range(0.6..1.0);
        for u in 0..h {
            for v in 0..w {
                let d2 = (u as f64 - cu).powi(2) + (v as f64 - cv).powi(2);
                let bump = (-d2 / (2.0 * rad * rad)).exp();
                if bump > 1e-3 {
                    let p = &mut y[u * w + v];
                    *p = (*p + amp * bump).min(1.0);
                }
            }
        }
    }
}

fn attach_background(y: &mut [f64], clean: &Mask, lum: &[f64], h: usize, w: usize, radius: usize, tol: f64) {
    let fg: Vec<f64> = clean.iter().zip(lum).filter(|(m, _)| **m).map(|(_, l)| *l).collect();
    if fg.is_empty() {
        return;
    }
    let mean = fg.iter().sum::<f64>() / fg.len() as f64;
    let near = dilate(clean, h, w, radius);
    for i in 0..h * w {
        if near[i] && !clean[i] && (lum[i] - mean).abs() < tol {
            y[i] = 1.0;
        }
    }
}

/// Corrupts a clean `1×H×W` mask given its `3×H×W` image.
pub fn inject_structured_noise(clean: &Tensor, image: &Tensor, spec: &NoiseSpec) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = match (clean.shape(), image.shape()) {
        (&[1, h, w], &[3, ih, iw]) if (h, w) == (ih, iw) => (h, w),
        (a, b) => return Err(DataError::Shape(format!("clean {a:?} vs image {b:?}"))),
    };
    let mask = to_mask(clean.data());
    let mut rng = rng::stream(spec.seed, &[purpose::NOISE]);
    let lum = || {
        luminance(&image.clone().reshape([1, 3, h, w]).expect("3×H×W"))
            .expect("three channels")
            .into_data()
    };
    let data = match spec.kind {
        NoiseKind::None => clean.data().to_vec(),
        NoiseKind::Dilate { radius } => from_mask(&dilate(&mask, h, w, radius)),
        NoiseKind::Erode { radius } => from_mask(&erode(&mask, h, w, radius)),
        NoiseKind::BoundaryBlobs { count, radius } => {
            let mut y = clean.data().to_vec();
            add_blobs(&mut y, h, w, count, radius, &mut rng);
            y
        }
        NoiseKind::AttachedBackground { radius, tolerance } => {
            let mut y = clean.data().to_vec();
            attach_background(&mut y, &mask, &lum(), h, w, radius, tolerance);
            y
        }
        NoiseKind::Mixture {
            max_radius,
            max_blobs,
            blob_radius,
        } => {
            let r = rng.gen_range(0..=max_radius);
            let base = match rng.gen_range(0..3) {
                0 => dilate(&mask, h, w, r),
                1 => erode(&mask, h, w, r),
                _ => mask.clone(),
            };
            let mut y = from_mask(&base);
            if rng.gen_bool(0.5) {
                attach_background(&mut y, &mask, &lum(), h, w, max_radius.max(1) * 2, 0.15);
            }
            let count = rng.gen_range(0..=max_blobs);
            add_blobs(&mut y, h, w, count, blob_radius, &mut rng);
            y
        }
    };
    Ok(Tensor::new([1, h, w], data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect()).expect("same size"))
}

#[derive(Clone, Debug)]
enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        angle: f64,
    },
    /// Convex polygon with counter-clockwise vertices `(y, x)`.
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let (a, b) = (c * dx + s * dy, -s * dx + c * dy);
                (a / rx).powi(2) + (b / ry).powi(2) <= 1.0
            }
            Shape::Polygon(v) => (0..v.len()).all(|i| {
                let (y0, x0) = v[i];
                let (y1, x1) = v[(i + 1) % v.len()];
                (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) >= 0.0
            }),
        }
    }

    fn random(rng: &mut Rng, size: f64) -> Self {
        let cy = rng.gen_range(0.2..0.8) * size;
        let cx = rng.gen_range(0.2..0.8) * size;
        let scale = rng.gen_range(0.1..0.3) * size;
        match rng.gen_range(0..3) {
            0 => Shape::Ellipse {
                cy,
                cx,
                ry: scale * rng.gen_range(0.6..1.4),
                rx: scale * rng.gen_range(0.6..1.4),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            },
            1 => {
                let (hy, hx) = (scale * rng.gen_range(0.6..1.3), scale * rng.gen_range(0.6..1.3));
                let a: f64 = rng.gen_range(0.0..std::f64::consts::PI);
                let (s, c) = a.sin_cos();
                let corners = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
                Shape::Polygon(
                    corners
                        .iter()
                        .map(|&(py, px): &(f64, f64)| {
                            let (dy, dx) = (py * hy, px * hx);
                            (cy + s * dx + c * dy, cx + c * dx - s * dy)
                        })
                        .collect(),
                )
            }
            _ => {
                let n = rng.gen_range(3..=6);
                let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
                angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
                Shape::Polygon(
                    angles
                        .iter()
                        .map(|a| {
                            let r = scale * rng.gen_range(0.8..1.4);
                            (cy + r * a.sin(), cx + r * a.cos())
                        })
                        .collect(),
                )
            }
        }
    }
}

const SUPERSAMPLE: usize = 4;

fn coverage(shapes: &[Shape], h: usize, w: usize) -> Vec<f64> {
    let k = SUPERSAMPLE;
    let mut out = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut hits = 0;
            for a in 0..k {
                for b in 0..k {
                    let y = u as f64 + (a as f64 + 0.5) / k as f64;
                    let x = v as f64 + (b as f64 + 0.5) / k as f64;
                    if shapes.iter().any(|s| s.contains(y, x)) {
                        hits += 1;
                    }
                }
            }
            out[u * w + v] = hits as f64 / (k * k) as f64;
        }
    }
    out
}

/// Smooth value noise: bilinear interpolation of a coarse random grid.
fn value_noise(rng: &mut Rng, h: usize, w: usize, cells: usize) -> Vec<f64> {
    let g: Vec<f64> = (0..(cells + 1) * (cells + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = Vec::with_capacity(h * w);
    for u in 0..h {
        let fy = u as f64 / h as f64 * cells as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for v in 0..w {
            let fx = v as f64 / w as f64 * cells as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |y: usize, x: usize| g[y * (cells + 1) + x];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Muted, low-saturation background tone.
fn background_color(rng: &mut Rng) -> [f64; 3] {
    let gray = rng.gen_range(0.2..0.6);
    [0, 1, 2].map(|_| gray + rng.gen_range(-0.08..0.08))
}

/// Saturated, bright foreground tone from a random hue.
fn foreground_color(rng: &mut Rng) -> [f64; 3] {
    let hue = rng.gen_range(0.0..6.0f64);
    let sat = rng.gen_range(0.7..1.0);
    let val = rng.gen_range(0.7..1.0);
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c| val * (1.0 - sat + sat * c))
}

fn color_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    let luma = |c: [f64; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
    (luma(a) - luma(b)).abs()
}

pub const MIN_FOREGROUND: f64 = 0.05;
pub const MAX_FOREGROUND: f64 = 0.6;

pub fn check_resolution(resolution: usize) -> Result<()> {
    if resolution == 0 || !resolution.is_multiple_of(16) {
        return Err(DataError::Resolution(resolution));
    }
    Ok(())
}

/// Renders a scene of 1–3 shapes on textured background and labels it.
pub fn synth_sample(seed: u64, resolution: usize, noise: &NoiseSpec) -> Result<SamplePair> {
    check_resolution(resolution)?;
    let (h, w) = (resolution, resolution);
    let mut rng = rng::stream(seed, &[purpose::SYNTH]);
    let (cov, clean) = loop {
        let n = rng.gen_range(1..=3);
        let shapes: Vec<Shape> = (0..n).map(|_| Shape::random(&mut rng, resolution as f64)).collect();
        let cov = coverage(&shapes, h, w);
        let clean: Vec<f64> = cov.iter().map(|&c| if c >= 0.5 { 1.0 } else { 0.0 }).collect();
        let frac = clean.iter().sum::<f64>() / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break (cov, clean);
        }
    };
    let bg = background_color(&mut rng);
    let fg = loop {
        let c = foreground_color(&mut rng);
        if color_distance(c, bg) > 0.15 {
            break c;
        }
    };
    let bg_tex = value_noise(&mut rng, h, w, 4);
    let fg_tex = value_noise(&mut rng, h, w, 8);
    let mut image = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let grain = rng.gen_range(-0.02..0.02);
        for ch in 0..3 {
            let b = bg[ch] + 0.12 * bg_tex[i];
            let f = fg[ch] + 0.08 * fg_tex[i];
            image[ch * h * w + i] = (cov[i] * f + (1.0 - cov[i]) * b + grain).clamp(0.0, 1.0);
        }
    }
    let image = Tensor::new([3, h, w], image).expect("3×H×W");
    let clean = Tensor::new([1, h, w], clean).expect("1×H×W");
    let label = inject_structured_noise(&clean, &image, noise)?;
    Ok(SamplePair {
        id: 0,
        image,
        label,
        clean: Some(clean),
    })
}

/// An immutable, ordered collection of equally sized examples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<SamplePair>,
    pub manifest: Option<Manifest>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.pairs.first().map(|p| (p.height(), p.width()))
    }

    pub fn has_clean(&self) -> bool {
        !self.pairs.is_empty() && self.pairs.iter().all(|p| p.clean.is_some())
    }

    /// Stacked `N×3×H×W` images and `N×1×H×W` labels for `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        let xs: Vec<&Tensor> = indices.iter().map(|&i| &self.pairs[i].image).collect();
        let ys: Vec<&Tensor> = indices.iter().map(|&i| &self.pairs[i].label).collect();
        (stack_nchw(&xs), stack_nchw(&ys))
    }

    /// Stacked clean labels, if every selected example has one.
    pub fn clean_batch(&self, indices: &[usize]) -> Option<Tensor> {
        let cs: Option<Vec<&Tensor>> = indices.iter().map(|&i| self.pairs[i].clean.as_ref()).collect();
        cs.map(|cs| stack_nchw(&cs))
    }

    /// Copy in which every label is replaced by the clean one.
    pub fn with_clean_labels(&self) -> Dataset {
        let mut out = self.clone();
        for p in &mut out.pairs {
            if let Some(c) = &p.clean {
                p.label = c.clone();
            }
        }
        out
    }

    /// Concatenation, renumbering ids.
    pub fn concat(&self, other: &Dataset) -> Dataset {
        let mut pairs = self.pairs.clone();
        pairs.extend(other.pairs.iter().cloned());
        for (i, p) in pairs.iter_mut().enumerate() {
            p.id = i;
        }
        Dataset { pairs, manifest: None }
    }
}

fn stack_nchw(items: &[&Tensor]) -> Tensor {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data).expect("examples share one shape")
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[purpose::SHUFFLE, epoch]));
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub seed: u64,
    pub noise: NoiseSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub resolution: usize,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

/// Resolves the per-example noise of a dataset-level spec.
fn example_noise(noise: &NoiseSpec, seed: u64, index: u64) -> NoiseSpec {
    NoiseSpec {
        seed: rng::derive(seed, &[purpose::NOISE, index, noise.seed]),
        ..*noise
    }
}

/// `count` synthetic pairs whose seeds derive from `(seed, split, i)`.
pub fn synth_dataset(name: &str, seed: u64, split: u64, count: usize, resolution: usize, noise: &NoiseSpec) -> Result<Dataset> {
    check_resolution(resolution)?;
    let mut pairs = Vec::with_capacity(count);
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        let example_seed = rng::derive(seed, &[purpose::SYNTH, split, i as u64]);
        let spec = example_noise(noise, seed, (split << 32) | i as u64);
        let mut p = synth_sample(example_seed, resolution, &spec)?;
        p.id = i;
        pairs.push(p);
        entries.push(ManifestEntry {
            file: format!("{i:04}.png"),
            seed: example_seed,
            noise: spec,
        });
    }
    Ok(Dataset {
        pairs,
        manifest: Some(Manifest {
            name: name.into(),
            resolution,
            seed,
            entries,
        }),
    })
}

/// `images` synthetic scenes with `labels_per_image` independently corrupted labels each,
/// stored as separate pairs (image-major). One label per image reproduces [`synth_dataset`].
pub fn synth_multi_label(name: &str, seed: u64, split: u64, images: usize, labels_per_image: usize, resolution: usize, noise: &NoiseSpec) -> Result<Dataset> {
    check_resolution(resolution)?;
    let mut pairs = Vec::with_capacity(images * labels_per_image);
    let mut entries = Vec::with_capacity(images * labels_per_image);
    for i in 0..images {
        let example_seed = rng::derive(seed, &[purpose::SYNTH, split, i as u64]);
        let base = example_noise(noise, seed, (split << 32) | i as u64);
        for j in 0..labels_per_image {
            let spec = match j {
                0 => base,
                _ => NoiseSpec {
                    seed: rng::derive(base.seed, &[j as u64]),
                    ..base
                },
            };
            let mut p = synth_sample(example_seed, resolution, &spec)?;
            p.id = pairs.len();
            entries.push(ManifestEntry {
                file: format!("{:04}.png", p.id),
                seed: example_seed,
                noise: spec,
            });
            pairs.push(p);
        }
    }
    Ok(Dataset {
        pairs,
        manifest: Some(Manifest {
            name: name.into(),
            resolution,
            seed,
            entries,
        }),
    })
}

/// Fixed desk-scale benchmark: 500 train / 100 eval pairs, 64×64, mixture noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub seed: u64,
    pub train: usize,
    pub eval: usize,
    pub resolution: usize,
    pub noise: NoiseSpec,
}

impl BenchSpec {
    pub fn synthbench_v1() -> Self {
        Self {
            seed: 20_240_601,
            train: 500,
            eval: 100,
            resolution: 64,
            noise: NoiseSpec::mixture(1),
        }
    }

    pub fn build(&self) -> Result<(Dataset, Dataset)> {
        Ok((
            synth_dataset("synthbench-v1/train", self.seed, 0, self.train, self.resolution, &self.noise)?,
            synth_dataset("synthbench-v1/eval", self.seed, 1, self.eval, self.resolution, &self.noise)?,
        ))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_gray(path: &Path, plane: &[f64], h: usize, w: usize) -> Result<()> {
    let buf: Vec<u8> = plane.iter().map(|&v| quantize(v)).collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size")
        .save(path)
        .map_err(|source| DataError::Encode {
            path: path.to_path_buf(),
            source,
        })
}

pub fn save_rgb(path: &Path, chw: &Tensor) -> Result<()> {
    let (h, w) = (chw.shape()[1], chw.shape()[2]);
    let d = chw.data();
    let buf: Vec<u8> = (0..h * w).flat_map(|i| (0..3).map(move |c| quantize(d[c * h * w + i]))).collect();
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer size")
        .save(path)
        .map_err(|source| DataError::Encode {
            path: path.to_path_buf(),
            source,
        })
}

/// Writes `images/`, `labels/`, `clean/` and `manifest.json` under `dir`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for sub in ["images", "labels", "clean"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for (i, p) in data.pairs.iter().enumerate() {
        let file = format!("{i:04}.png");
        let (h, w) = (p.height(), p.width());
        save_rgb(&dir.join("images").join(&file), &p.image)?;
        save_gray(&dir.join("labels").join(&file), p.label.data(), h, w)?;
        if let Some(c) = &p.clean {
            save_gray(&dir.join("clean").join(&file), c.data(), h, w)?;
        }
    }
    if let Some(m) = &data.manifest {
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(m)?).map_err(io_err(&path))?;
    }
    Ok(())
}

fn png_names(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.to_ascii_lowercase().ends_with(".png") {
            out.insert(name);
        }
    }
    Ok(out)
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| DataError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

fn load_gray(path: &Path, size: Option<(usize, usize)>, binarize: bool) -> Result<Tensor> {
    let mut img = open(path)?.to_luma8();
    if let Some((h, w)) = size {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Nearest);
        }
    }
    let (h, w) = (img.height() as usize, img.width() as usize);
    let data = img
        .into_raw()
        .into_iter()
        .map(|b| {
            let v = b as f64 / 255.0;
            if binarize {
                if v >= 0.5 {
                    1.0
                } else {
                    0.0
                }
            } else {
                v
            }
        })
        .collect();
    Ok(Tensor::new([1, h, w], data).expect("1×H×W"))
}

fn load_rgb(path: &Path, size: Option<(usize, usize)>) -> Result<Tensor> {
    let mut img = open(path)?.to_rgb8();
    if let Some((h, w)) = size {
        if (img.height() as usize, img.width() as usize) != (h, w) {
            img = image::imageops::resize(&img, w as u32, h as u32, FilterType::Triangle);
        }
    }
    let (h, w) = (img.height() as usize, img.width() as usize);
    let raw = img.into_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f64 / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data).expect("3×H×W"))
}

/// Loads matching PNG files from the image, label and optional clean directories,
/// ordered by file name. Images are resized bilinearly, labels by nearest neighbour.
pub fn load_pairs(images: &Path, labels: &Path, clean: Option<&Path>, size: Option<(usize, usize)>) -> Result<Dataset> {
    let xi = png_names(images)?;
    let yi = png_names(labels)?;
    let ci = clean.map(png_names).transpose()?;
    let mut orphans: Vec<String> = xi.symmetric_difference(&yi).cloned().collect();
    if let Some(ci) = &ci {
        orphans.extend(xi.symmetric_difference(ci).cloned());
    }
    if !orphans.is_empty() {
        orphans.sort();
        orphans.dedup();
        return Err(DataError::Orphans(orphans));
    }
    if xi.is_empty() {
        log::warn!("no PNG files found in {}", images.display());
    }
    let mut pairs = Vec::with_capacity(xi.len());
    let mut size = size;
    for (id, name) in xi.iter().enumerate() {
        let image = load_rgb(&images.join(name), size)?;
        let hw = (image.shape()[1], image.shape()[2]);
        size.get_or_insert(hw);
        let label = load_gray(&labels.join(name), Some(hw), false)?;
        let clean = match clean {
            Some(dir) => Some(load_gray(&dir.join(name), Some(hw), true)?),
            None => None,
        };
        pairs.push(SamplePair { id, image, label, clean });
    }
    Ok(Dataset { pairs, manifest: None })
}

/// Loads a dataset directory written by [`write_dataset`] (or laid out the same way).
pub fn load_dir(dir: &Path, size: Option<(usize, usize)>) -> Result<Dataset> {
    let clean = dir.join("clean");
    let clean = clean.is_dir().then_some(clean);
    let mut ds = load_pairs(&dir.join("images"), &dir.join("labels"), clean.as_deref(), size)?;
    let mpath = dir.join("manifest.json");
    if mpath.is_file() {
        let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
        ds.manifest = Some(serde_json::from_str(&text)?);
    }
    Ok(ds)
}
