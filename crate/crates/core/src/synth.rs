//! Synthetic labeled datasets with exact segmentation masks and optional
//! class-correlated background bias shapes.
//!
//! Each sample carries a randomly placed elliptical foreground whose
//! class signal is an oriented stripe texture (angle per class), over
//! class-neutral low-frequency clutter. The four image corners stay clear
//! so bias shapes never touch the foreground. Bias injection stamps a
//! class-coded polygon (triangle/square/circle) into a corner, leaving
//! masks untouched, which turns the dataset into a shortcut-learning
//! trap: the shape is a far easier signal than the texture.
//!
//! Generation is seed-indexed per sample, so datasets are byte-identical
//! for identical (config, seed) regardless of generation order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone)]
pub struct Sample<S> {
    /// `(C, Y, X)` image with values in `[0, 1]`.
    pub image: Tensor<S>,
    /// `(Y, X)` binary mask, 1 inside the region of interest.
    pub mask: Tensor<S>,
    /// Length-K 0/1 vector; exactly one 1 in single-label mode.
    pub label: Vec<u8>,
}

#[derive(Clone)]
pub struct Dataset<S> {
    pub classes: usize,
    pub multi_label: bool,
    pub samples: Vec<Sample<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset<S> {
        Dataset {
            classes: self.classes,
            multi_label: self.multi_label,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Class index per sample (position of the 1 in the label vector).
    pub fn class_of(&self, i: usize) -> usize {
        self.samples[i].label.iter().position(|&v| v == 1).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub classes: usize,
    pub size: usize,
    pub per_class: usize,
    pub channels: usize,
    pub multi_label: bool,
    pub seed: u64,
    /// Keep-out margin at the four corners; foregrounds never enter it.
    pub corner_clear: usize,
}

impl GenerateConfig {
    pub fn new(classes: usize, size: usize, per_class: usize, seed: u64) -> Self {
        GenerateConfig {
            classes,
            size,
            per_class,
            channels: 1,
            multi_label: false,
            seed,
            corner_clear: default_shape_size(size) + 3,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Config("image size must be >= 16".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        if self.per_class == 0 {
            return Err(Error::Config("need at least one sample per class".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config("channels must be 1 or 3".into()));
        }
        if self.size <= 2 * self.corner_clear + 4 {
            return Err(Error::Config("corner margin leaves no room for the foreground".into()));
        }
        Ok(())
    }
}

pub fn default_shape_size(image_size: usize) -> usize {
    (image_size / 6).max(5)
}

fn sample_rng(seed: u64, index: usize) -> ChaCha12Rng {
    // SplitMix-style stream derivation keeps samples independent of
    // generation order.
    let mixed = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha12Rng::seed_from_u64(mixed)
}

/// Generates `classes * per_class` labeled samples with exact masks.
pub fn generate<S: Scalar>(cfg: &GenerateConfig) -> Result<Dataset<S>> {
    cfg.validate()?;
    let total = cfg.classes * cfg.per_class;
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let mut rng = sample_rng(cfg.seed, i);
        let label: Vec<u8> = if cfg.multi_label {
            (0..cfg.classes).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect()
        } else {
            let class = i % cfg.classes;
            (0..cfg.classes).map(|c| u8::from(c == class)).collect()
        };
        samples.push(generate_sample(cfg, &label, &mut rng)?);
    }
    Ok(Dataset { classes: cfg.classes, multi_label: cfg.multi_label, samples })
}

fn generate_sample<S: Scalar>(
    cfg: &GenerateConfig,
    label: &[u8],
    rng: &mut ChaCha12Rng,
) -> Result<Sample<S>> {
    let n = cfg.size;
    let m = cfg.corner_clear as f64;
    let nf = n as f64;

    // Elliptical foreground with its bounding box inside the corner-free
    // band; area targets at least 10% of the image (less only when the
    // geometry cannot fit it). The floor is padded so the discretized
    // ellipse stays above 10% despite boundary pixels.
    let half = (nf - 2.0 * m) / 2.0;
    let rmax = (half - 0.5).max(2.0);
    let mut area_floor = 0.115 * nf * nf / PI; // lower bound on rx*ry
    if rmax * rmax < area_floor {
        area_floor = 0.8 * rmax * rmax;
    }
    let rmin = (area_floor.sqrt() * 0.9).min(rmax);
    let (mut rx, mut ry) = (rmax, rmax);
    for _ in 0..64 {
        let a = rng.gen_range(rmin..=rmax);
        let b = rng.gen_range(rmin..=rmax);
        if a * b >= area_floor {
            (rx, ry) = (a, b);
            break;
        }
    }
    let cx = rng.gen_range((m + rx)..=(nf - m - rx));
    let cy = rng.gen_range((m + ry)..=(nf - m - ry));

    let mut mask = vec![S::zero(); n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = (x as f64 - cx) / rx;
            let dy = (y as f64 - cy) / ry;
            if dx * dx + dy * dy <= 1.0 {
                mask[y * n + x] = S::one();
            }
        }
    }

    // Class-neutral clutter: a few low-frequency waves plus pixel noise.
    let mut bg = vec![0.5f64; n * n];
    for _ in 0..3 {
        let fx = rng.gen_range(0.5..2.5) / nf;
        let fy = rng.gen_range(0.5..2.5) / nf;
        let phase = rng.gen_range(0.0..2.0 * PI);
        let amp = rng.gen_range(0.04..0.09);
        for y in 0..n {
            for x in 0..n {
                bg[y * n + x] += amp * (2.0 * PI * (fx * x as f64 + fy * y as f64) + phase).cos();
            }
        }
    }

    // Foreground: oriented stripes, one orientation per positive class.
    // Per-sample phase, wavelength and a small angle jitter keep the task
    // learnable but non-trivial, so a shortcut (when injected) is the far
    // easier signal.
    let positives: Vec<usize> =
        label.iter().enumerate().filter(|(_, &v)| v == 1).map(|(c, _)| c).collect();
    let stripes: Vec<(f64, f64, f64, f64)> = positives
        .iter()
        .map(|&c| {
            let theta = PI * c as f64 / cfg.classes as f64 + rng.gen_range(-0.14..0.14);
            let phase = rng.gen_range(0.0..2.0 * PI);
            let wavelength = rng.gen_range(3.4..4.6);
            (theta.cos(), theta.sin(), phase, wavelength)
        })
        .collect();

    let mut plane = vec![0.0f64; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let noise = rng.gen_range(-0.06..0.06);
            let v = if mask[i] == S::one() && !stripes.is_empty() {
                let mut acc = 0.0;
                for &(ux, uy, phase, wavelength) in &stripes {
                    acc += (2.0 * PI * (ux * x as f64 + uy * y as f64) / wavelength + phase).sin();
                }
                0.5 + 0.22 * acc / stripes.len() as f64
            } else if mask[i] == S::one() {
                0.5
            } else {
                bg[i]
            };
            plane[i] = (v + noise).clamp(0.0, 1.0);
        }
    }

    let mut image = Vec::with_capacity(cfg.channels * n * n);
    let gains = [1.0, 0.95, 0.9];
    for c in 0..cfg.channels {
        for &v in &plane {
            image.push(S::from_f64((v * gains[c]).clamp(0.0, 1.0)));
        }
    }
    Ok(Sample {
        image: Tensor::new(&[cfg.channels, n, n], image)?,
        mask: Tensor::new(&[n, n], mask)?,
        label: label.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BiasShape {
    Triangle,
    Square,
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Corner {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShapePlacement {
    pub shape: BiasShape,
    pub corner: Corner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasSpec {
    /// One placement per class, indexed by class.
    pub per_class: Vec<ShapePlacement>,
    /// Side (or diameter) of the stamped shape, in pixels.
    pub size: usize,
    pub intensity: f64,
    pub max_retries: usize,
}

impl BiasSpec {
    /// Single-label default: one shape per class, all in the upper-left
    /// corner (triangle, square, circle).
    pub fn default_single(classes: usize, image_size: usize) -> Result<BiasSpec> {
        if classes > 3 {
            return Err(Error::Config("default bias spec supports up to 3 classes".into()));
        }
        let shapes = [BiasShape::Triangle, BiasShape::Square, BiasShape::Circle];
        Ok(BiasSpec {
            per_class: (0..classes)
                .map(|c| ShapePlacement { shape: shapes[c], corner: Corner::UpperLeft })
                .collect(),
            size: default_shape_size(image_size),
            intensity: 1.0,
            max_retries: 8,
        })
    }

    /// Multi-label default: square lower-right, circle lower-left,
    /// triangle upper-left — one shape per positive label.
    pub fn default_multi(classes: usize, image_size: usize) -> Result<BiasSpec> {
        if classes > 3 {
            return Err(Error::Config("default bias spec supports up to 3 classes".into()));
        }
        let placements = [
            ShapePlacement { shape: BiasShape::Square, corner: Corner::LowerRight },
            ShapePlacement { shape: BiasShape::Circle, corner: Corner::LowerLeft },
            ShapePlacement { shape: BiasShape::Triangle, corner: Corner::UpperLeft },
        ];
        Ok(BiasSpec {
            per_class: placements[..classes].to_vec(),
            size: default_shape_size(image_size),
            intensity: 1.0,
            max_retries: 8,
        })
    }

    pub fn default_for(classes: usize, image_size: usize, multi_label: bool) -> Result<BiasSpec> {
        if multi_label {
            Self::default_multi(classes, image_size)
        } else {
            Self::default_single(classes, image_size)
        }
    }
}

/// Pixels of a shape stamped with its bounding box at `(y0, x0)`, side `s`.
fn shape_pixels(shape: BiasShape, y0: usize, x0: usize, s: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    let r = s as f64 / 2.0;
    for dy in 0..s {
        for dx in 0..s {
            let inside = match shape {
                BiasShape::Square => true,
                BiasShape::Triangle => dx <= dy,
                BiasShape::Circle => {
                    let (fy, fx) = (dy as f64 + 0.5 - r, dx as f64 + 0.5 - r);
                    fy * fy + fx * fx <= r * r
                }
            };
            if inside {
                px.push((y0 + dy, x0 + dx));
            }
        }
    }
    px
}

fn corner_origin(corner: Corner, n: usize, s: usize, jy: usize, jx: usize) -> (usize, usize) {
    match corner {
        Corner::UpperLeft => (1 + jy, 1 + jx),
        Corner::UpperRight => (1 + jy, n - s - 1 - jx),
        Corner::LowerLeft => (n - s - 1 - jy, 1 + jx),
        Corner::LowerRight => (n - s - 1 - jy, n - s - 1 - jx),
    }
}

/// Stamps class-coded shapes into image corners: one shape per image in
/// single-label mode, one per positive label in multi-label mode. Masks
/// are untouched; a shape that would overlap the foreground is re-jittered
/// and eventually rejected.
pub fn inject_bias<S: Scalar>(dataset: &Dataset<S>, spec: &BiasSpec) -> Result<Dataset<S>> {
    if spec.per_class.len() != dataset.classes {
        return Err(Error::Config(format!(
            "bias spec covers {} classes, dataset has {}",
            spec.per_class.len(),
            dataset.classes
        )));
    }
    let mut out = dataset.clone();
    for (i, sample) in out.samples.iter_mut().enumerate() {
        let n = sample.mask.shape()[0];
        if spec.size + 2 > n / 2 {
            return Err(Error::Config("bias shape does not fit in an image corner".into()));
        }
        let mut rng = sample_rng(0xB1A5, i);
        let classes: Vec<usize> = if dataset.multi_label {
            sample.label.iter().enumerate().filter(|(_, &v)| v == 1).map(|(c, _)| c).collect()
        } else {
            vec![sample.label.iter().position(|&v| v == 1).unwrap_or(0)]
        };
        let mut image = sample.image.data().to_vec();
        let channels = sample.image.shape()[0];
        for class in classes {
            let placement = spec.per_class[class];
            let mut placed = false;
            for _ in 0..spec.max_retries {
                let (jy, jx) = (rng.gen_range(0..3), rng.gen_range(0..3));
                let (y0, x0) = corner_origin(placement.corner, n, spec.size, jy, jx);
                let px = shape_pixels(placement.shape, y0, x0, spec.size);
                let overlaps = px.iter().any(|&(y, x)| sample.mask.data()[y * n + x] != S::zero());
                if overlaps {
                    continue;
                }
                let v = S::from_f64(spec.intensity);
                for &(y, x) in &px {
                    for c in 0..channels {
                        image[(c * n + y) * n + x] = v;
                    }
                }
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::Config(format!(
                    "sample {}: bias shape overlaps the foreground after {} retries",
                    i, spec.max_retries
                )));
            }
        }
        sample.image = Tensor::new(sample.image.shape(), image)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub max_translation_fraction: f64,
    pub rotation_deg: f64,
    pub hflip_prob: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { max_translation_fraction: 0.125, rotation_deg: 40.0, hflip_prob: 0.5 }
    }
}

/// Applies one random affine transform (translation, rotation, horizontal
/// flip) identically to image and mask: bilinear for the image, nearest
/// for the mask so it stays binary, zero fill outside the frame. The
/// returned sample replaces the original.
pub fn augment<S: Scalar, R: Rng>(
    sample: &Sample<S>,
    spec: &AugmentSpec,
    rng: &mut R,
) -> Result<Sample<S>> {
    let n = sample.mask.shape()[0];
    let t = spec.max_translation_fraction * n as f64;
    let angle = if spec.rotation_deg > 0.0 {
        rng.gen_range(-spec.rotation_deg..=spec.rotation_deg).to_radians()
    } else {
        0.0
    };
    let (tx, ty) = if t > 0.0 { (rng.gen_range(-t..=t), rng.gen_range(-t..=t)) } else { (0.0, 0.0) };
    let flip = rng.gen::<f64>() < spec.hflip_prob;
    apply_affine(sample, angle, tx, ty, flip)
}

/// Deterministic core of [`augment`]: flip, then rotate by `angle` about
/// the image center, then translate by `(tx, ty)`.
pub fn apply_affine<S: Scalar>(
    sample: &Sample<S>,
    angle: f64,
    tx: f64,
    ty: f64,
    flip: bool,
) -> Result<Sample<S>> {
    let shape = sample.image.shape().to_vec();
    let (channels, n) = (shape[0], shape[1]);
    let c = (n as f64 - 1.0) / 2.0;
    let (cos, sin) = (angle.cos(), angle.sin());
    // Inverse map: undo translation, rotate backward, undo flip.
    let back = |yo: f64, xo: f64| -> (f64, f64) {
        let (dy, dx) = (yo - ty - c, xo - tx - c);
        let (ry, rx) = (-sin * dx + cos * dy, cos * dx + sin * dy);
        let (yi, mut xi) = (ry + c, rx + c);
        if flip {
            xi = n as f64 - 1.0 - xi;
        }
        (yi, xi)
    };

    let img = sample.image.data();
    let mut image = vec![S::zero(); channels * n * n];
    for yo in 0..n {
        for xo in 0..n {
            let (yi, xi) = back(yo as f64, xo as f64);
            if yi < -0.5 || xi < -0.5 || yi > n as f64 - 0.5 || xi > n as f64 - 0.5 {
                continue;
            }
            let y0 = yi.floor();
            let x0 = xi.floor();
            let (fy, fx) = (yi - y0, xi - x0);
            let sample_at = |ch: usize, y: f64, x: f64| -> f64 {
                if y < 0.0 || x < 0.0 || y >= n as f64 || x >= n as f64 {
                    0.0
                } else {
                    img[(ch * n + y as usize) * n + x as usize].as_f64()
                }
            };
            for ch in 0..channels {
                let v00 = sample_at(ch, y0, x0);
                let v01 = sample_at(ch, y0, x0 + 1.0);
                let v10 = sample_at(ch, y0 + 1.0, x0);
                let v11 = sample_at(ch, y0 + 1.0, x0 + 1.0);
                let v = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
                image[(ch * n + yo) * n + xo] = S::from_f64(v);
            }
        }
    }

    let msk = sample.mask.data();
    let mut mask = vec![S::zero(); n * n];
    for yo in 0..n {
        for xo in 0..n {
            let (yi, xi) = back(yo as f64, xo as f64);
            let (yr, xr) = (yi.round(), xi.round());
            if yr < 0.0 || xr < 0.0 || yr >= n as f64 || xr >= n as f64 {
                continue;
            }
            mask[yo * n + xo] = msk[(yr as usize) * n + xr as usize];
        }
    }

    Ok(Sample {
        image: Tensor::new(&shape, image)?,
        mask: Tensor::new(&[n, n], mask)?,
        label: sample.label.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic stratified split (by label vector). Fractions must sum
/// to 1; every split must end up non-empty.
pub fn split<S: Scalar>(
    dataset: &Dataset<S>,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Splits> {
    let total = fractions.0 + fractions.1 + fractions.2;
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must sum to 1, got {}", total)));
    }
    let mut groups: std::collections::BTreeMap<Vec<u8>, Vec<usize>> = std::collections::BTreeMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        groups.entry(s.label.clone()).or_default().push(i);
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (_, mut idx) in groups {
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n = idx.len() as f64;
        let b1 = ((fractions.0 * n).round() as usize).min(idx.len());
        let b2 = (((fractions.0 + fractions.1) * n).round() as usize).clamp(b1, idx.len());
        out.train.extend_from_slice(&idx[..b1]);
        out.val.extend_from_slice(&idx[b1..b2]);
        out.test.extend_from_slice(&idx[b2..]);
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    if out.train.is_empty() || out.val.is_empty() || out.test.is_empty() {
        return Err(Error::Config("a split ended up empty".into()));
    }
    Ok(out)
}

/// Dataset directory layout: `manifest.json` plus one ISTN tensor pair per
/// sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub classes: usize,
    pub multi_label: bool,
    pub config: GenerateConfig,
    pub bias: Option<BiasSpec>,
    pub label_map: Vec<String>,
    pub samples: Vec<SampleEntry>,
    pub splits: Splits,
    pub content_digest: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEntry {
    pub image: String,
    pub mask: String,
    pub label: Vec<u8>,
}

pub fn save_dataset<S: Scalar>(
    dir: &std::path::Path,
    dataset: &Dataset<S>,
    config: &GenerateConfig,
    bias: Option<&BiasSpec>,
    splits: &Splits,
) -> Result<DatasetManifest> {
    use sha2::{Digest, Sha256};
    std::fs::create_dir_all(dir)?;
    let mut hasher = Sha256::new();
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let image = format!("img_{:06}.istn", i);
        let mask = format!("mask_{:06}.istn", i);
        let mut buf = Vec::new();
        crate::io::write_tensor(&mut buf, &s.image)?;
        std::fs::write(dir.join(&image), &buf)?;
        hasher.update(&buf);
        buf.clear();
        crate::io::write_tensor(&mut buf, &s.mask)?;
        std::fs::write(dir.join(&mask), &buf)?;
        hasher.update(&buf);
        entries.push(SampleEntry { image, mask, label: s.label.clone() });
    }
    let manifest = DatasetManifest {
        format: "isnet-dataset".into(),
        version: 1,
        classes: dataset.classes,
        multi_label: dataset.multi_label,
        config: *config,
        bias: bias.cloned(),
        label_map: (0..dataset.classes).map(|c| format!("class_{}", c)).collect(),
        samples: entries,
        splits: splits.clone(),
        content_digest: format!("{:x}", hasher.finalize()),
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn load_dataset<S: Scalar>(dir: &std::path::Path) -> Result<(Dataset<S>, DatasetManifest)> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.format != "isnet-dataset" || manifest.version != 1 {
        return Err(Error::Corrupt("not an isnet dataset directory".into()));
    }
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let image = crate::io::load_tensor(&dir.join(&e.image))?;
        let mask = crate::io::load_tensor(&dir.join(&e.mask))?;
        samples.push(Sample { image, mask, label: e.label.clone() });
    }
    Ok((
        Dataset { classes: manifest.classes, multi_label: manifest.multi_label, samples },
        manifest,
    ))
}
