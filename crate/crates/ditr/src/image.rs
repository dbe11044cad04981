//! Scalar 2D images: bilinear sampling, normalization, smoothing,
//! downsampling, edge detection and PGM I/O.
//!
//! Pixel centers sit at physical coordinate `(index + 0.5) * spacing`, so a
//! block-averaged downsample keeps pixel centers physically aligned across
//! pyramid levels and transforms expressed in physical units carry over
//! between levels unchanged.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A 2D scalar image with isotropic spacing (physical units per pixel).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    spacing: f64,
    data: Vec<f64>,
}

/// Sidecar metadata stored next to a PGM file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgmMeta {
    pub spacing: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub description: String,
}

impl Image {
    pub fn new(width: usize, height: usize, spacing: f64, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "data length {} does not match {}x{}",
                    data.len(),
                    width,
                    height
                ),
            });
        }
        if !(spacing > 0.0) {
            return Err(Error::InvalidConfig {
                reason: format!("spacing must be positive, got {spacing}"),
            });
        }
        Ok(Self {
            width,
            height,
            spacing,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, spacing: f64, value: f64) -> Self {
        Self {
            width,
            height,
            spacing,
            data: vec![value; width * height],
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel index.
    pub fn from_fn(width: usize, height: usize, spacing: f64, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            spacing,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Physical coordinate of a (possibly fractional) pixel coordinate.
    #[inline]
    pub fn pixel_to_phys(&self, px: f64) -> f64 {
        (px + 0.5) * self.spacing
    }

    /// Pixel coordinate of a physical coordinate.
    #[inline]
    pub fn phys_to_pixel(&self, phys: f64) -> f64 {
        phys / self.spacing - 0.5
    }

    /// Bilinear interpolation at continuous pixel coordinates.
    ///
    /// Returns `None` outside `[0, w-1] x [0, h-1]`; exact at grid nodes.
    #[inline]
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let wm1 = (self.width - 1) as f64;
        let hm1 = (self.height - 1) as f64;
        if !(x >= 0.0 && x <= wm1 && y >= 0.0 && y <= hm1) {
            return None;
        }
        let x0 = (x.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (y.floor() as usize).min(self.height.saturating_sub(2));
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let v00 = self.get(x0, y0);
        let v10 = self.get(x1, y0);
        let v01 = self.get(x0, y1);
        let v11 = self.get(x1, y1);
        Some(
            (1.0 - fx) * (1.0 - fy) * v00
                + fx * (1.0 - fy) * v10
                + (1.0 - fx) * fy * v01
                + fx * fy * v11,
        )
    }

    /// Affine rescale so the minimum maps to 0 and the maximum to 1.
    pub fn normalize_intensity(&self) -> Result<Image> {
        let (lo, hi) = self.min_max();
        if !(hi > lo) {
            return Err(Error::DegenerateIntensityRange);
        }
        let range = hi - lo;
        let data = self.data.iter().map(|v| (v - lo) / range).collect();
        Ok(Image {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data,
        })
    }

    /// Separable Gaussian convolution with replicate padding.
    ///
    /// Kernel radius is `ceil(3*sigma)` and the kernel is renormalized to sum
    /// to one. `sigma = 0` returns the image unchanged.
    pub fn gaussian_smooth(&self, sigma: f64) -> Image {
        assert!(sigma >= 0.0, "sigma must be nonnegative");
        if sigma == 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma).ceil() as isize;
        let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
        for k in -radius..=radius {
            kernel.push((-((k * k) as f64) / (2.0 * sigma * sigma)).exp());
        }
        let sum: f64 = kernel.iter().sum();
        for w in &mut kernel {
            *w /= sum;
        }

        let w = self.width as isize;
        let h = self.height as isize;
        // Horizontal pass.
        let mut tmp = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kw) in kernel.iter().enumerate() {
                    let xi = (x + i as isize - radius).clamp(0, w - 1);
                    acc += kw * self.get(xi as usize, y as usize);
                }
                tmp[(y * w + x) as usize] = acc;
            }
        }
        // Vertical pass.
        let mut out = vec![0.0; self.data.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, &kw) in kernel.iter().enumerate() {
                    let yi = (y + i as isize - radius).clamp(0, h - 1);
                    acc += kw * tmp[(yi * w + x) as usize];
                }
                out[(y * w + x) as usize] = acc;
            }
        }
        Image {
            width: self.width,
            height: self.height,
            spacing: self.spacing,
            data: out,
        }
    }

    /// Average-pools non-overlapping `factor x factor` blocks, truncating
    /// ragged edges. Spacing is multiplied by the factor.
    pub fn downsample(&self, factor: usize) -> Result<Image> {
        assert!(factor >= 1, "factor must be >= 1");
        if factor == 1 {
            return Ok(self.clone());
        }
        let nw = self.width / factor;
        let nh = self.height / factor;
        if nw == 0 || nh == 0 {
            return Err(Error::ImageTooSmall {
                width: nw,
                height: nh,
                patch_size: 1,
            });
        }
        let inv = 1.0 / (factor * factor) as f64;
        let mut data = Vec::with_capacity(nw * nh);
        for by in 0..nh {
            for bx in 0..nw {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += self.get(bx * factor + dx, by * factor + dy);
                    }
                }
                data.push(acc * inv);
            }
        }
        Ok(Image {
            width: nw,
            height: nh,
            spacing: self.spacing * factor as f64,
            data,
        })
    }

    /// Downsamples and checks the result still holds a `patch_size` patch.
    pub fn downsample_for_patch(&self, factor: usize, patch_size: usize) -> Result<Image> {
        let out = self.downsample(factor)?;
        if out.width < patch_size || out.height < patch_size {
            return Err(Error::ImageTooSmall {
                width: out.width,
                height: out.height,
                patch_size,
            });
        }
        Ok(out)
    }

    /// Canny edge detection: smooth, Sobel gradients, non-maximum
    /// suppression over 4 quantized directions, hysteresis thresholding.
    ///
    /// `low` and `high` are fractions of the maximum gradient magnitude.
    /// Output values are exactly 0.0 or 1.0.
    pub fn canny_edges(&self, smooth_sigma: f64, low: f64, high: f64) -> Image {
        assert!(
            (0.0..=1.0).contains(&low) && low < high && high <= 1.0,
            "thresholds must satisfy 0 <= low < high <= 1"
        );
        let smoothed = self.gaussian_smooth(smooth_sigma);
        let w = self.width;
        let h = self.height;

        let clamp_get = |x: isize, y: isize| -> f64 {
            let xi = x.clamp(0, w as isize - 1) as usize;
            let yi = y.clamp(0, h as isize - 1) as usize;
            smoothed.get(xi, yi)
        };

        let mut gx = vec![0.0; w * h];
        let mut gy = vec![0.0; w * h];
        let mut mag = vec![0.0; w * h];
        let mut max_mag = 0.0f64;
        for y in 0..h as isize {
            for x in 0..w as isize {
                let tl = clamp_get(x - 1, y - 1);
                let tc = clamp_get(x, y - 1);
                let tr = clamp_get(x + 1, y - 1);
                let ml = clamp_get(x - 1, y);
                let mr = clamp_get(x + 1, y);
                let bl = clamp_get(x - 1, y + 1);
                let bc = clamp_get(x, y + 1);
                let br = clamp_get(x + 1, y + 1);
                let sx = (tr + 2.0 * mr + br) - (tl + 2.0 * ml + bl);
                let sy = (bl + 2.0 * bc + br) - (tl + 2.0 * tc + tr);
                let idx = y as usize * w + x as usize;
                gx[idx] = sx;
                gy[idx] = sy;
                mag[idx] = sx.hypot(sy);
                max_mag = max_mag.max(mag[idx]);
            }
        }
        if max_mag == 0.0 {
            return Image::filled(w, h, self.spacing, 0.0);
        }

        // Non-maximum suppression. Ties keep the later pixel along the scan
        // direction so a perfectly symmetric ridge thins to a single pixel.
        let mut thinned = vec![0.0; w * h];
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let idx = y * w + x;
                let m = mag[idx];
                if m == 0.0 {
                    continue;
                }
                let mut angle = gy[idx].atan2(gx[idx]).to_degrees();
                if angle < 0.0 {
                    angle += 180.0;
                }
                // (back, fwd) neighbors along the gradient direction; back is
                // the earlier pixel in scan order.
                let (back, fwd) = if !(22.5..157.5).contains(&angle) {
                    (mag[idx - 1], mag[idx + 1])
                } else if angle < 67.5 {
                    (mag[idx - w - 1], mag[idx + w + 1])
                } else if angle < 112.5 {
                    (mag[idx - w], mag[idx + w])
                } else {
                    (mag[idx - w + 1], mag[idx + w - 1])
                };
                if m >= back && m > fwd {
                    thinned[idx] = m;
                }
            }
        }

        // Hysteresis: BFS from strong pixels through weak ones, 8-connected.
        let low_t = low * max_mag;
        let high_t = high * max_mag;
        let mut out = vec![0.0; w * h];
        let mut stack = Vec::new();
        for idx in 0..w * h {
            if thinned[idx] >= high_t && out[idx] == 0.0 {
                out[idx] = 1.0;
                stack.push(idx);
                while let Some(cur) = stack.pop() {
                    let cx = (cur % w) as isize;
                    let cy = (cur / w) as isize;
                    for dy in -1..=1isize {
                        for dx in -1..=1isize {
                            if dx == 0 && dy == 0 {
                                continue;
                            }
                            let nx = cx + dx;
                            let ny = cy + dy;
                            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                                continue;
                            }
                            let nidx = ny as usize * w + nx as usize;
                            if out[nidx] == 0.0 && thinned[nidx] >= low_t {
                                out[nidx] = 1.0;
                                stack.push(nidx);
                            }
                        }
                    }
                }
            }
        }
        Image {
            width: w,
            height: h,
            spacing: self.spacing,
            data: out,
        }
    }

    /// Writes a 16-bit big-endian binary PGM (intensities scaled by 65535)
    /// plus a JSON sidecar `<stem>.json` with spacing and provenance.
    pub fn save_pgm(&self, path: &Path, seed: Option<u64>, description: &str) -> Result<()> {
        let mut buf = Vec::with_capacity(32 + 2 * self.data.len());
        write!(buf, "P5\n{} {}\n65535\n", self.width, self.height)?;
        for &v in &self.data {
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
        std::fs::write(path, buf)?;
        let meta = PgmMeta {
            spacing: self.spacing,
            seed,
            description: description.to_string(),
        };
        let sidecar = path.with_extension("json");
        std::fs::write(sidecar, serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a 16-bit PGM written by [`Image::save_pgm`]. A missing sidecar
    /// defaults to spacing 1.
    pub fn load_pgm(path: &Path) -> Result<(Image, PgmMeta)> {
        let bytes = std::fs::read(path)?;
        let mut cursor = std::io::Cursor::new(&bytes);
        let mut header = Vec::new();
        // Header is three whitespace-terminated tokens after the magic.
        let mut fields = Vec::new();
        let mut cur = String::new();
        let mut byte = [0u8; 1];
        while fields.len() < 4 {
            cursor.read_exact(&mut byte).map_err(|_| Error::MalformedFile {
                path: path.display().to_string(),
                reason: "truncated header".into(),
            })?;
            header.push(byte[0]);
            if byte[0].is_ascii_whitespace() {
                if !cur.is_empty() {
                    fields.push(std::mem::take(&mut cur));
                }
            } else {
                cur.push(byte[0] as char);
            }
        }
        if fields[0] != "P5" {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!("expected P5 magic, got {}", fields[0]),
            });
        }
        let parse = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!("bad header field {s}"),
            })
        };
        let width = parse(&fields[1])?;
        let height = parse(&fields[2])?;
        let maxval = parse(&fields[3])?;
        if maxval != 65535 {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!("expected maxval 65535, got {maxval}"),
            });
        }
        let offset = cursor.position() as usize;
        let expected = 2 * width * height;
        if bytes.len() - offset != expected {
            return Err(Error::MalformedFile {
                path: path.display().to_string(),
                reason: format!(
                    "expected {expected} data bytes, got {}",
                    bytes.len() - offset
                ),
            });
        }
        let mut data = Vec::with_capacity(width * height);
        for chunk in bytes[offset..].chunks_exact(2) {
            let q = u16::from_be_bytes([chunk[0], chunk[1]]);
            data.push(q as f64 / 65535.0);
        }
        let sidecar = path.with_extension("json");
        let meta = if sidecar.exists() {
            serde_json::from_slice(&std::fs::read(&sidecar)?)?
        } else {
            PgmMeta {
                spacing: 1.0,
                seed: None,
                description: String::new(),
            }
        };
        let img = Image::new(width, height, meta.spacing, data)?;
        Ok((img, meta))
    }
}
