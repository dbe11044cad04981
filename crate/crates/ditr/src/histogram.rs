//! Joint intensity histograms and the classical registration objectives:
//! joint entropy, mutual information, categorical log-likelihood with fixed
//! bin probabilities, and the profile log-likelihood (the likelihood
//! maximized over the categorical parameters, which equals the negative
//! joint entropy).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::transform::{Point, TransformParams};

pub const DEFAULT_BINS: usize = 75;

/// Floor applied to fixed categorical probabilities so unseen bins do not
/// produce -inf log-likelihoods.
const THETA_FLOOR: f64 = 1e-8;

/// Joint bin index for a pair of intensities in [0, 1].
#[inline]
pub fn bin_index(u: f64, v: f64, bins: usize) -> Result<usize> {
    debug_assert!(bins >= 2);
    for &val in &[u, v] {
        if !(0.0..=1.0).contains(&val) {
            return Err(Error::IntensityOutOfRange { value: val });
        }
    }
    let bu = ((u * bins as f64) as usize).min(bins - 1);
    let bv = ((v * bins as f64) as usize).min(bins - 1);
    Ok(bu * bins + bv)
}

/// Binned counts over paired intensities from the overlap region of a fixed
/// image and a transformed moving image.
#[derive(Debug, Clone, PartialEq)]
pub struct JointHistogram {
    bins: usize,
    counts: Vec<u64>,
    total: u64,
}

/// Categorical probabilities over joint bins (the histogram model
/// parameters).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CategoricalJointModel {
    pub bins: usize,
    pub theta: Vec<f64>,
}

impl JointHistogram {
    pub fn from_counts(bins: usize, counts: Vec<u64>) -> Result<Self> {
        if bins < 2 || counts.len() != bins * bins {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "need bins >= 2 and {} counts, got {}",
                    bins * bins,
                    counts.len()
                ),
            });
        }
        let total = counts.iter().sum();
        if total == 0 {
            return Err(Error::EmptyHistogram);
        }
        Ok(Self {
            bins,
            counts,
            total,
        })
    }

    /// Accumulates the joint histogram of `(fixed, moving ∘ beta)` over
    /// in-bounds pixel pairs. Both images must be normalized to [0, 1].
    pub fn from_images(
        fixed: &Image,
        moving: &Image,
        beta: &TransformParams,
        bins: usize,
    ) -> Result<Self> {
        let mut counts = vec![0u64; bins * bins];
        let mut total = 0u64;
        let ms = moving.spacing();
        for y in 0..fixed.height() {
            let py = fixed.pixel_to_phys(y as f64);
            for x in 0..fixed.width() {
                let p = Point::new(fixed.pixel_to_phys(x as f64), py);
                let q = beta.map_point(p);
                if let Some(v) = moving.sample_bilinear(q.x / ms - 0.5, q.y / ms - 0.5) {
                    let u = fixed.get(x, y);
                    counts[bin_index(u, v, bins)?] += 1;
                    total += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::NoOverlap {
                params: beta.to_params(),
            });
        }
        Ok(Self {
            bins,
            counts,
            total,
        })
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Joint entropy in nats: `H = -sum_j (N_j/N) ln(N_j/N)`, with 0 ln 0 = 0.
    pub fn joint_entropy(&self) -> f64 {
        let n = self.total as f64;
        let mut h = 0.0;
        for &c in &self.counts {
            if c > 0 {
                let p = c as f64 / n;
                h -= p * p.ln();
            }
        }
        h
    }

    /// Plug-in mutual information in nats: `H(U) + H(V) - H(U, V)` from the
    /// histogram marginals.
    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mut row = vec![0u64; self.bins];
        let mut col = vec![0u64; self.bins];
        for ju in 0..self.bins {
            for jv in 0..self.bins {
                let c = self.counts[ju * self.bins + jv];
                row[ju] += c;
                col[jv] += c;
            }
        }
        let ent = |counts: &[u64]| -> f64 {
            let mut h = 0.0;
            for &c in counts {
                if c > 0 {
                    let p = c as f64 / n;
                    h -= p * p.ln();
                }
            }
            h
        };
        ent(&row) + ent(&col) - self.joint_entropy()
    }

    /// Maximum-likelihood categorical fit: `theta_j = N_j / N`.
    pub fn fit_categorical(&self) -> CategoricalJointModel {
        let n = self.total as f64;
        CategoricalJointModel {
            bins: self.bins,
            theta: self.counts.iter().map(|&c| c as f64 / n).collect(),
        }
    }

    /// Writes `(j, N_j)` rows for debugging.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "bin,count")?;
        for (j, &c) in self.counts.iter().enumerate() {
            if c > 0 {
                writeln!(out, "{j},{c}")?;
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Total log-likelihood `sum_j N_j(beta) ln theta_j` of the overlap data
/// under fixed categorical parameters, the registration objective for a
/// model trained beforehand on registered images.
///
/// Probabilities are floored at 1e-8 and renormalized so unseen bins stay
/// finite.
pub fn categorical_loglik(
    fixed: &Image,
    moving: &Image,
    beta: &TransformParams,
    model: &CategoricalJointModel,
) -> Result<f64> {
    let hist = JointHistogram::from_images(fixed, moving, beta, model.bins)?;
    let floored: Vec<f64> = model.theta.iter().map(|&t| t.max(THETA_FLOOR)).collect();
    let norm: f64 = floored.iter().sum();
    let mut ll = 0.0;
    for (j, &c) in hist.counts.iter().enumerate() {
        if c > 0 {
            ll += c as f64 * (floored[j] / norm).ln();
        }
    }
    Ok(ll)
}

/// Per-sample profile log-likelihood: the categorical likelihood maximized
/// over its parameters, `max_theta (1/N) sum_i ln theta_{I(u_i, v_i)}`.
///
/// Evaluated through the closed-form maximizer `theta_j = N_j / N`; equals
/// the negative joint entropy of the same histogram.
pub fn profile_loglik(
    fixed: &Image,
    moving: &Image,
    beta: &TransformParams,
    bins: usize,
) -> Result<f64> {
    let hist = JointHistogram::from_images(fixed, moving, beta, bins)?;
    let model = hist.fit_categorical();
    let mut ll = 0.0;
    for (j, &c) in hist.counts.iter().enumerate() {
        if c > 0 {
            ll += c as f64 * model.theta[j].ln();
        }
    }
    Ok(ll / hist.total as f64)
}
