//! Seeded synthetic multimodal registration cases with exact ground truth.
//!
//! A base image of random anisotropic Gaussian blobs over a low-frequency
//! background is split into two modalities: either the base paired with a
//! nonmonotone tent remap of itself (plus noise), or the base's edge map
//! paired with that remapped intensity image. The moving image is the second
//! modality resampled through the inverse of a known perturbation, so the
//! stored transform re-aligns it exactly.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::transform::{
    random_perturbation, resample_moving, PerturbationRanges, Point, TransformKind,
    TransformParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityMode {
    /// Fixed = base intensities, moving = tent-remapped intensities.
    Remap,
    /// Fixed = edge map of the base, moving = tent-remapped intensities.
    Edge,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_blobs: usize,
    pub noise_sigma: f64,
    pub modality_mode: ModalityMode,
    pub kind: TransformKind,
    pub perturbation: PerturbationRanges,
    pub n_landmarks: usize,
    /// Extra translation composed into every ground-truth transform
    /// (systematic-shift experiments).
    pub systematic_shift: [f64; 2],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            n_blobs: 12,
            noise_sigma: 0.02,
            modality_mode: ModalityMode::Remap,
            kind: TransformKind::Rigid,
            perturbation: PerturbationRanges::rigid_default(),
            n_landmarks: 100,
            systematic_shift: [0.0, 0.0],
        }
    }
}

/// One registration problem with known ground truth.
#[derive(Debug, Clone)]
pub struct RegistrationCase {
    pub fixed: Image,
    pub moving: Image,
    /// Maps fixed-frame physical points to their true moving-frame
    /// locations.
    pub beta_true: TransformParams,
    /// Fixed-frame physical landmark locations.
    pub landmarks: Vec<Point>,
}

/// The nonmonotone intensity remap: defeats correlation metrics while
/// preserving mutual structure.
#[inline]
pub fn tent_remap(x: f64) -> f64 {
    1.0 - (2.0 * x - 1.0).abs()
}

/// Sum of random anisotropic Gaussian blobs over a low-frequency
/// background, normalized to [0, 1].
pub fn generate_base(cfg: &SynthConfig, rng: &mut impl Rng) -> Image {
    let w = cfg.width;
    let h = cfg.height;

    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: f64,
    }
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            fx: rng.gen_range(0.4..1.5) / w as f64,
            fy: rng.gen_range(0.4..1.5) / h as f64,
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: rng.gen_range(0.25..0.5),
        })
        .collect();

    struct Blob {
        cx: f64,
        cy: f64,
        cos: f64,
        sin: f64,
        inv_s1: f64,
        inv_s2: f64,
        amp: f64,
    }
    // Blob scales are log-uniform over [2, 40] px so coarse pyramid levels
    // still see strong structure while fine levels get sharp detail.
    let blobs: Vec<Blob> = (0..cfg.n_blobs)
        .map(|_| {
            let cx = rng.gen_range(0.08 * w as f64..0.92 * w as f64);
            let cy = rng.gen_range(0.08 * h as f64..0.92 * h as f64);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let log_range = (2.0f64).ln()..(40.0f64).ln();
            let s1: f64 = rng.gen_range(log_range.clone()).exp();
            let s2: f64 = (s1 * rng.gen_range(0.6..1.6)).clamp(2.0, 40.0);
            let amp = rng.gen_range(0.4..1.0) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
            Blob {
                cx,
                cy,
                cos: angle.cos(),
                sin: angle.sin(),
                inv_s1: 1.0 / (2.0 * s1 * s1),
                inv_s2: 1.0 / (2.0 * s2 * s2),
                amp,
            }
        })
        .collect();

    // A fixed affine window (not a min-max stretch) keeps the intensity
    // scale comparable across seeds and blob counts.
    Image::from_fn(w, h, 1.0, |x, y| {
        let xf = x as f64;
        let yf = y as f64;
        let mut v = 0.0;
        for wave in &waves {
            v += wave.amp
                * (std::f64::consts::TAU * (wave.fx * xf + wave.fy * yf) + wave.phase).cos();
        }
        for b in &blobs {
            let dx = xf - b.cx;
            let dy = yf - b.cy;
            let u = b.cos * dx + b.sin * dy;
            let t = -b.sin * dx + b.cos * dy;
            v += b.amp * (-(u * u * b.inv_s1 + t * t * b.inv_s2)).exp();
        }
        (0.5 + v / 3.0).clamp(0.0, 1.0)
    })
}

/// Splits a base image into an aligned multimodal pair.
pub fn make_modalities(
    base: &Image,
    mode: ModalityMode,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<(Image, Image)> {
    let mut remapped = Image::from_fn(base.width(), base.height(), base.spacing(), |x, y| {
        tent_remap(base.get(x, y))
    });
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("validated sigma");
        let data: Vec<f64> = remapped
            .data()
            .iter()
            .map(|&v| v + normal.sample(rng))
            .collect();
        remapped = Image::new(base.width(), base.height(), base.spacing(), data)?;
    }
    let b = remapped.normalize_intensity()?;
    let a = match mode {
        ModalityMode::Remap => base.clone(),
        ModalityMode::Edge => base.canny_edges(1.0, 0.1, 0.3),
    };
    Ok((a, b))
}

const MAX_CASE_ATTEMPTS: usize = 20;

/// Generates a full registration case: aligned modalities, a random
/// ground-truth perturbation (optionally composed with a systematic shift),
/// the moving image resampled through its inverse, and landmarks drawn over
/// the central 80% of the fixed frame.
///
/// At least 90% of landmarks must map in-bounds in the moving frame;
/// otherwise the perturbation and landmarks are redrawn (up to 20 times).
pub fn make_case(cfg: &SynthConfig, rng: &mut impl Rng) -> Result<RegistrationCase> {
    let base = generate_base(cfg, rng);
    let (fixed, modality_b) = make_modalities(&base, cfg.modality_mode, cfg.noise_sigma, rng)?;
    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let s = fixed.spacing();
    let center = Point::new(w / 2.0 * s, h / 2.0 * s);

    for _ in 0..MAX_CASE_ATTEMPTS {
        let drawn = random_perturbation(&cfg.perturbation, cfg.kind, center, rng);
        let beta_true = if cfg.systematic_shift == [0.0, 0.0] {
            drawn
        } else {
            TransformParams::compose(
                &TransformParams::translation(
                    cfg.systematic_shift[0],
                    cfg.systematic_shift[1],
                    center,
                ),
                &drawn,
            )
        };
        let landmarks: Vec<Point> = (0..cfg.n_landmarks)
            .map(|_| {
                Point::new(
                    rng.gen_range(0.1 * w * s..0.9 * w * s),
                    rng.gen_range(0.1 * h * s..0.9 * h * s),
                )
            })
            .collect();
        let in_bounds = landmarks
            .iter()
            .filter(|&&p| {
                let q = beta_true.map_point(p);
                let px = modality_b.phys_to_pixel(q.x);
                let py = modality_b.phys_to_pixel(q.y);
                px >= 0.0 && px <= w - 1.0 && py >= 0.0 && py <= h - 1.0
            })
            .count();
        if (in_bounds as f64) < 0.9 * cfg.n_landmarks as f64 {
            continue;
        }
        let (moving, _) = resample_moving(&modality_b, &beta_true.invert()?);
        return Ok(RegistrationCase {
            fixed,
            moving,
            beta_true,
            landmarks,
        });
    }
    Err(Error::CaseGeneration {
        attempts: MAX_CASE_ATTEMPTS,
        reason: "landmark in-bounds invariant kept failing".into(),
    })
}

impl RegistrationCase {
    /// Persists the case as a directory: `fixed.pgm`, `moving.pgm` (with
    /// JSON sidecars), `beta_true.json`, `landmarks.csv`, `config.json`.
    pub fn save_dir(&self, dir: &Path, cfg: &SynthConfig, seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.fixed
            .save_pgm(&dir.join("fixed.pgm"), Some(seed), "fixed image")?;
        self.moving
            .save_pgm(&dir.join("moving.pgm"), Some(seed), "moving image")?;
        std::fs::write(
            dir.join("beta_true.json"),
            serde_json::to_vec_pretty(&self.beta_true)?,
        )?;
        let mut csv = String::from("x,y\n");
        for p in &self.landmarks {
            csv.push_str(&format!("{},{}\n", p.x, p.y));
        }
        std::fs::write(dir.join("landmarks.csv"), csv)?;
        #[derive(Serialize)]
        struct CaseManifest<'a> {
            seed: u64,
            config: &'a SynthConfig,
        }
        std::fs::write(
            dir.join("config.json"),
            serde_json::to_vec_pretty(&CaseManifest { seed, config: cfg })?,
        )?;
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<RegistrationCase> {
        let (fixed, _) = Image::load_pgm(&dir.join("fixed.pgm"))?;
        let (moving, _) = Image::load_pgm(&dir.join("moving.pgm"))?;
        let beta_true: TransformParams =
            serde_json::from_slice(&std::fs::read(dir.join("beta_true.json"))?)?;
        let text = std::fs::read_to_string(dir.join("landmarks.csv"))?;
        let mut landmarks = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                continue;
            }
            let mut parts = line.split(',');
            let parse = |tok: Option<&str>| -> Result<f64> {
                tok.and_then(|t| t.trim().parse().ok())
                    .ok_or_else(|| Error::MalformedFile {
                        path: dir.join("landmarks.csv").display().to_string(),
                        reason: format!("bad landmark row {i}"),
                    })
            };
            let x = parse(parts.next())?;
            let y = parse(parts.next())?;
            landmarks.push(Point::new(x, y));
        }
        if landmarks.is_empty() {
            return Err(Error::MalformedFile {
                path: dir.join("landmarks.csv").display().to_string(),
                reason: "no landmarks".into(),
            });
        }
        Ok(RegistrationCase {
            fixed,
            moving,
            beta_true,
            landmarks,
        })
    }
}

/// Total variation (sum of absolute forward differences); used to compare
/// structural content of generated images.
pub fn total_variation(img: &Image) -> f64 {
    let mut tv = 0.0;
    for y in 0..img.height() {
        for x in 0..img.width() {
            if x + 1 < img.width() {
                tv += (img.get(x + 1, y) - img.get(x, y)).abs();
            }
            if y + 1 < img.height() {
                tv += (img.get(x, y + 1) - img.get(x, y)).abs();
            }
        }
    }
    tv
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::histogram::JointHistogram;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn base_is_deterministic_and_normalized() {
        let cfg = SynthConfig::default();
        let a = generate_base(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = generate_base(&cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a.data(), b.data());
        let (lo, hi) = a.min_max();
        assert!(lo >= 0.0 && hi <= 1.0 && hi > lo);
    }

    #[test]
    fn blobless_base_has_lower_total_variation() {
        let mut flat_cfg = SynthConfig::default();
        flat_cfg.n_blobs = 0;
        for seed in [1u64, 2, 3] {
            let flat = generate_base(&flat_cfg, &mut ChaCha8Rng::seed_from_u64(seed));
            for blobs in [3usize, 8, 12] {
                let mut cfg = SynthConfig::default();
                cfg.n_blobs = blobs;
                let structured = generate_base(&cfg, &mut ChaCha8Rng::seed_from_u64(seed));
                assert!(
                    total_variation(&flat) < total_variation(&structured),
                    "seed {seed}, {blobs} blobs"
                );
            }
        }
    }

    #[test]
    fn remap_noiseless_is_exact_tent_of_base() {
        let mut cfg = SynthConfig::default();
        cfg.noise_sigma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base = generate_base(&cfg, &mut rng);
        let (a, b) = make_modalities(&base, ModalityMode::Remap, 0.0, &mut rng).unwrap();
        let expected = Image::from_fn(a.width(), a.height(), 1.0, |x, y| tent_remap(a.get(x, y)))
            .normalize_intensity()
            .unwrap();
        assert_eq!(b.data(), expected.data());
    }

    #[test]
    fn remap_pair_keeps_mutual_information() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let base = generate_base(&cfg, &mut rng);
        let (a, b) = make_modalities(&base, ModalityMode::Remap, 0.02, &mut rng).unwrap();
        let id = TransformParams::identity_rigid(Point::new(64.0, 64.0));
        let aligned_mi = JointHistogram::from_images(&a, &b, &id, 32)
            .unwrap()
            .mutual_information();

        use rand::seq::SliceRandom;
        let mut shuffled = b.data().to_vec();
        shuffled.shuffle(&mut rng);
        let b_shuffled = Image::new(b.width(), b.height(), 1.0, shuffled).unwrap();
        let shuffled_mi = JointHistogram::from_images(&a, &b_shuffled, &id, 32)
            .unwrap()
            .mutual_information();
        assert!(
            aligned_mi - shuffled_mi >= 0.2,
            "aligned {aligned_mi}, shuffled {shuffled_mi}"
        );
    }

    #[test]
    fn edge_mode_fixed_is_binary() {
        let mut cfg = SynthConfig::default();
        cfg.modality_mode = ModalityMode::Edge;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let case = make_case(&cfg, &mut rng).unwrap();
        assert!(case.fixed.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(case.fixed.data().iter().any(|&v| v == 1.0));
    }

    #[test]
    fn case_is_deterministic() {
        let cfg = SynthConfig::default();
        let a = make_case(&cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        let b = make_case(&cfg, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
        assert_eq!(a.fixed.data(), b.fixed.data());
        assert_eq!(a.moving.data(), b.moving.data());
        assert_eq!(a.beta_true, b.beta_true);
        assert_eq!(a.landmarks, b.landmarks);
    }

    #[test]
    fn case_initial_misregistration_in_expected_range() {
        let cfg = SynthConfig::default();
        for seed in 0..5u64 {
            let case = make_case(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mean: f64 = case
                .landmarks
                .iter()
                .map(|&p| case.beta_true.map_point(p).dist(p))
                .sum::<f64>()
                / case.landmarks.len() as f64;
            // Translation is at least 1 px per axis and at most 25 px plus
            // the rotation contribution over the central region.
            assert!(mean >= 0.9, "seed {seed}: mean {mean}");
            assert!(mean <= 50.0, "seed {seed}: mean {mean}");
        }
    }

    #[test]
    fn systematic_shift_composes_into_truth() {
        let mut cfg = SynthConfig::default();
        cfg.perturbation = PerturbationRanges::zero();
        cfg.systematic_shift = [10.0, 0.0];
        let case = make_case(&cfg, &mut ChaCha8Rng::seed_from_u64(31)).unwrap();
        for &p in case.landmarks.iter().take(10) {
            let q = case.beta_true.map_point(p);
            assert!((q.x - p.x - 10.0).abs() < 1e-12);
            assert!((q.y - p.y).abs() < 1e-12);
        }
    }

    #[test]
    fn case_dir_round_trip() {
        let cfg = SynthConfig::default();
        let case = make_case(&cfg, &mut ChaCha8Rng::seed_from_u64(41)).unwrap();
        let dir = std::env::temp_dir().join(format!("ditr_case_{}", std::process::id()));
        case.save_dir(&dir, &cfg, 41).unwrap();
        let loaded = RegistrationCase::load_dir(&dir).unwrap();
        assert_eq!(loaded.beta_true, case.beta_true);
        assert_eq!(loaded.landmarks, case.landmarks);
        // Images round-trip through 16-bit quantization.
        let mae: f64 = loaded
            .fixed
            .data()
            .iter()
            .zip(case.fixed.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / loaded.fixed.data().len() as f64;
        assert!(mae < 1e-4);
        std::fs::remove_dir_all(&dir).ok();
    }
}
