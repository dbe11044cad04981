//! Labeled patch-pair datasets for discriminator training.
//!
//! Positive pairs are cropped at a shared fixed-frame location, the moving
//! patch at the current alignment estimate plus an optional Gaussian dither
//! of its sampling location. Negative pairs use independently uniform
//! locations in each image.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::transform::{dither_offset, DitherConfig, Point, TransformParams};

/// A pair of same-shape square patches, intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub size: usize,
}

/// A training triple: patch pair plus its registered/unregistered label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatchPair {
    pub pair: PatchPair,
    pub z: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    Rot90Flips,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub patch_size: usize,
    pub n_total: usize,
    pub pos_fraction: f64,
    pub dither: DitherConfig,
    pub augment: Augment,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            patch_size: 17,
            n_total: 50_000,
            pos_fraction: 0.5,
            dither: DitherConfig::none(),
            augment: Augment::None,
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size % 2 == 0 || self.patch_size == 0 {
            return Err(Error::InvalidConfig {
                reason: format!("patch_size must be odd, got {}", self.patch_size),
            });
        }
        if !(self.pos_fraction > 0.0 && self.pos_fraction < 1.0) {
            return Err(Error::InvalidConfig {
                reason: "pos_fraction must lie in (0, 1)".into(),
            });
        }
        if self.n_total < 2 {
            return Err(Error::InvalidConfig {
                reason: "n_total must be >= 2".into(),
            });
        }
        if self.dither.sigma < 0.0 {
            return Err(Error::InvalidConfig {
                reason: "dither sigma must be nonnegative".into(),
            });
        }
        Ok(())
    }
}

/// One fixed/moving image pair with its current alignment estimate.
pub struct AlignedPair<'a> {
    pub fixed: &'a Image,
    pub moving: &'a Image,
    pub beta: TransformParams,
}

/// Extracts a `p x p` patch sampled bilinearly at unit pixel spacing around
/// a continuous center (pixel coordinates). The whole support must be in
/// bounds.
pub fn extract_patch(img: &Image, cx: f64, cy: f64, p: usize) -> Result<Vec<f32>> {
    let half = (p - 1) as f64 / 2.0;
    if cx - half < 0.0
        || cy - half < 0.0
        || cx + half > (img.width() - 1) as f64
        || cy + half > (img.height() - 1) as f64
    {
        return Err(Error::PatchOutOfBounds { x: cx, y: cy });
    }
    let mut out = Vec::with_capacity(p * p);
    for dy in 0..p {
        let y = cy - half + dy as f64;
        for dx in 0..p {
            let x = cx - half + dx as f64;
            // In bounds by the support check above.
            out.push(img.sample_bilinear(x, y).unwrap() as f32);
        }
    }
    Ok(out)
}

/// Integer patch centers covering the image with the given stride, keeping
/// the full patch support in bounds.
pub fn patch_grid(img: &Image, patch_size: usize, stride: usize) -> Vec<(f64, f64)> {
    let half = (patch_size - 1) / 2;
    let mut centers = Vec::new();
    if img.width() < patch_size || img.height() < patch_size {
        return centers;
    }
    let mut y = half;
    while y + half < img.height() {
        let mut x = half;
        while x + half < img.width() {
            centers.push((x as f64, y as f64));
            x += stride;
        }
        y += stride;
    }
    centers
}

/// Applies one of the 8 dihedral symmetries (rotations by multiples of 90
/// degrees, with optional flip) to a square patch.
pub fn apply_dihedral(patch: &[f32], p: usize, op: u8) -> Vec<f32> {
    debug_assert_eq!(patch.len(), p * p);
    let mut out = vec![0.0; p * p];
    let n = p - 1;
    for y in 0..p {
        for x in 0..p {
            // Flip (op bit 2) then rotate by 90 * (op & 3).
            let (fx, fy) = if op & 4 != 0 { (n - x, y) } else { (x, y) };
            let (sx, sy) = match op & 3 {
                0 => (fx, fy),
                1 => (fy, n - fx),
                2 => (n - fx, n - fy),
                _ => (n - fy, fx),
            };
            out[y * p + x] = patch[sy * p + sx];
        }
    }
    out
}

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

fn draw_center(img: &Image, half: f64, rng: &mut impl Rng) -> (f64, f64) {
    let x = rng.gen_range(half..(img.width() - 1) as f64 - half);
    let y = rng.gen_range(half..(img.height() - 1) as f64 - half);
    (x, y)
}

/// Builds a labeled dataset from image pairs at their current alignment.
///
/// Exactly `round(n_total * pos_fraction)` positives are emitted (first),
/// then negatives. Positives place the moving patch at the mapped center
/// plus a dither displacement; out-of-bounds placements are rejected and
/// redrawn.
pub fn make_dataset(
    pairs: &[AlignedPair],
    cfg: &SamplingConfig,
    rng: &mut impl Rng,
) -> Result<Vec<LabeledPatchPair>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "need at least one image pair".into(),
        });
    }
    let p = cfg.patch_size;
    let half = (p - 1) as f64 / 2.0;
    for (i, pr) in pairs.iter().enumerate() {
        for (name, img) in [("fixed", pr.fixed), ("moving", pr.moving)] {
            if img.width() < p || img.height() < p {
                return Err(Error::ImageTooSmall {
                    width: img.width(),
                    height: img.height(),
                    patch_size: p,
                }
                .annotate(format!("{name} image of pair {i}")));
            }
        }
    }

    let n_pos = (cfg.n_total as f64 * cfg.pos_fraction).round() as usize;
    let n_neg = cfg.n_total - n_pos;
    let mut out = Vec::with_capacity(cfg.n_total);

    for _ in 0..n_pos {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let pr = &pairs[rng.gen_range(0..pairs.len())];
            let (cx, cy) = draw_center(pr.fixed, half, rng);
            let phys = Point::new(
                pr.fixed.pixel_to_phys(cx),
                pr.fixed.pixel_to_phys(cy),
            );
            let mapped = pr.beta.map_point(phys);
            let d = dither_offset(&cfg.dither, rng);
            let target = Point::new(mapped.x + d.x, mapped.y + d.y);
            let mx = pr.moving.phys_to_pixel(target.x);
            let my = pr.moving.phys_to_pixel(target.y);
            let Ok(v) = extract_patch(pr.moving, mx, my, p) else {
                continue;
            };
            let u = extract_patch(pr.fixed, cx, cy, p)?;
            let (u, v) = maybe_augment(u, v, p, cfg.augment, rng);
            out.push(LabeledPatchPair {
                pair: PatchPair { u, v, size: p },
                z: 1,
            });
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::CaseGeneration {
                attempts: MAX_PLACEMENT_ATTEMPTS,
                reason: "could not place a positive patch pair in bounds".into(),
            });
        }
    }

    for _ in 0..n_neg {
        let pr = &pairs[rng.gen_range(0..pairs.len())];
        let (ux, uy) = draw_center(pr.fixed, half, rng);
        let (vx, vy) = draw_center(pr.moving, half, rng);
        let u = extract_patch(pr.fixed, ux, uy, p)?;
        let v = extract_patch(pr.moving, vx, vy, p)?;
        let (u, v) = maybe_augment(u, v, p, cfg.augment, rng);
        out.push(LabeledPatchPair {
            pair: PatchPair { u, v, size: p },
            z: 0,
        });
    }

    Ok(out)
}

fn maybe_augment(
    u: Vec<f32>,
    v: Vec<f32>,
    p: usize,
    augment: Augment,
    rng: &mut impl Rng,
) -> (Vec<f32>, Vec<f32>) {
    match augment {
        Augment::None => (u, v),
        Augment::Rot90Flips => {
            let op = rng.gen_range(0..8u8);
            (apply_dihedral(&u, p, op), apply_dihedral(&v, p, op))
        }
    }
}

const DATASET_MAGIC: &[u8; 8] = b"DITRDS1\0";

/// Persists a dataset as fixed-size records: label byte then the two
/// patches as little-endian f32s.
pub fn save_dataset(dataset: &[LabeledPatchPair], path: &Path) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "refusing to save an empty dataset".into(),
        });
    }
    let p = dataset[0].pair.size;
    let mut buf = Vec::with_capacity(16 + dataset.len() * (1 + 8 * p * p));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&(p as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    for item in dataset {
        buf.push(item.z);
        for &x in item.pair.u.iter().chain(item.pair.v.iter()) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<LabeledPatchPair>> {
    let bytes = std::fs::read(path)?;
    let bad = |reason: &str| Error::MalformedFile {
        path: path.display().to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < 16 || &bytes[..8] != DATASET_MAGIC {
        return Err(bad("missing dataset magic"));
    }
    let p = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let n = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let rec = 1 + 8 * p * p;
    if bytes.len() != 16 + n * rec {
        return Err(bad("truncated dataset"));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let base = 16 + i * rec;
        let z = bytes[base];
        let read_patch = |offset: usize| -> Vec<f32> {
            bytes[offset..offset + 4 * p * p]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect()
        };
        let u = read_patch(base + 1);
        let v = read_patch(base + 1 + 4 * p * p);
        out.push(LabeledPatchPair {
            pair: PatchPair { u, v, size: p },
            z,
        });
    }
    Ok(out)
}
