//! Registration evaluation: fiducial registration error against ground
//! truth, response-function sweeps along transform axes, and peak analysis
//! (argmax, full width at half max, mode count).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::optimizer::MetricBinding;
use crate::transform::{Point, TransformKind, TransformParams};

/// Mean distance between landmark positions mapped by the estimated and the
/// true transform.
pub fn fre(beta_hat: &TransformParams, beta_true: &TransformParams, landmarks: &[Point]) -> f64 {
    assert!(!landmarks.is_empty(), "need at least one landmark");
    landmarks
        .iter()
        .map(|&p| beta_hat.map_point(p).dist(beta_true.map_point(p)))
        .sum::<f64>()
        / landmarks.len() as f64
}

/// Per-landmark distances (same order as the input landmarks).
pub fn fre_per_landmark(
    beta_hat: &TransformParams,
    beta_true: &TransformParams,
    landmarks: &[Point],
) -> Vec<f64> {
    landmarks
        .iter()
        .map(|&p| beta_hat.map_point(p).dist(beta_true.map_point(p)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Tx,
    Ty,
    Theta,
}

impl SweepAxis {
    fn param_index(&self, kind: TransformKind) -> usize {
        match (kind, self) {
            (TransformKind::Rigid, SweepAxis::Tx) => 0,
            (TransformKind::Rigid, SweepAxis::Ty) => 1,
            (TransformKind::Rigid, SweepAxis::Theta) => 2,
            (TransformKind::Affine, SweepAxis::Tx) => 4,
            (TransformKind::Affine, SweepAxis::Ty) => 5,
            (TransformKind::Affine, SweepAxis::Theta) => {
                panic!("theta sweeps apply to rigid transforms only")
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Tx => "tx",
            SweepAxis::Ty => "ty",
            SweepAxis::Theta => "theta",
        }
    }
}

/// A response function: metric values at offsets along one transform axis.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: String,
    pub offsets: Vec<f64>,
    pub scores: Vec<f64>,
    pub metadata: String,
}

impl SweepResult {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "# axis={} {}", self.axis, self.metadata)?;
        writeln!(out, "offset,score")?;
        for (o, s) in self.offsets.iter().zip(&self.scores) {
            writeln!(out, "{o},{s}")?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Builds an inclusive offset grid `[-range, range]` with the given step.
pub fn offset_grid(range: f64, step: f64) -> Vec<f64> {
    assert!(range > 0.0 && step > 0.0);
    let n = (range / step).round() as i64;
    (-n..=n).map(|i| i as f64 * step).collect()
}

/// Evaluates the metric at `beta_center` perturbed along one axis by each
/// offset.
pub fn response_sweep(
    metric: &MetricBinding,
    fixed: &Image,
    moving: &Image,
    beta_center: &TransformParams,
    axis: SweepAxis,
    offsets: &[f64],
    metadata: &str,
) -> Result<SweepResult> {
    assert!(
        offsets.windows(2).all(|w| w[1] > w[0]),
        "offsets must be strictly increasing"
    );
    let idx = axis.param_index(beta_center.kind());
    let base = beta_center.to_params();
    let mut scores = Vec::with_capacity(offsets.len());
    for &o in offsets {
        let mut p = base.clone();
        p[idx] += o;
        let beta = beta_center.with_params(&p);
        scores.push(metric.evaluate(fixed, moving, &beta)?);
    }
    Ok(SweepResult {
        axis: axis.name().to_string(),
        offsets: offsets.to_vec(),
        scores,
        metadata: metadata.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeakAnalysis {
    pub argmax_offset: f64,
    /// Full width at half of (max - baseline); `None` for a flat curve.
    pub fwhm: Option<f64>,
    pub mode_count: usize,
}

/// Relative prominence a local maximum needs (above baseline) to count as a
/// mode.
pub const MODE_PROMINENCE: f64 = 0.25;

/// Peak characteristics of a response function.
///
/// The argmax and FWHM are computed on the raw curve (baseline = minimum
/// score, crossings by linear interpolation, clamped at the sweep ends);
/// the mode count uses a 3-sample moving average and counts local-maximum
/// plateaus exceeding `baseline + 0.25 * (max - baseline)`.
pub fn peak_analysis(sweep: &SweepResult) -> PeakAnalysis {
    let s = &sweep.scores;
    let t = &sweep.offsets;
    assert!(s.len() >= 5, "need at least 5 samples");
    let n = s.len();

    let max = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let baseline = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(max > baseline) {
        return PeakAnalysis {
            argmax_offset: t[0],
            fwhm: None,
            mode_count: 0,
        };
    }
    let peak_idx = s.iter().position(|&v| v == max).unwrap();
    let half = baseline + 0.5 * (max - baseline);

    // Crossing points nearest the peak on each side, linearly interpolated;
    // clamped to the sweep ends if the curve never drops below half.
    let mut left = t[0];
    for i in (0..peak_idx).rev() {
        if s[i] < half {
            let frac = (half - s[i]) / (s[i + 1] - s[i]);
            left = t[i] + frac * (t[i + 1] - t[i]);
            break;
        }
    }
    let mut right = t[n - 1];
    for i in peak_idx + 1..n {
        if s[i] < half {
            let frac = (half - s[i - 1]) / (s[i] - s[i - 1]);
            right = t[i - 1] + frac * (t[i] - t[i - 1]);
            break;
        }
    }

    // Mode count on the smoothed curve.
    let smoothed: Vec<f64> = (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            s[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let smax = smoothed.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let smin = smoothed.iter().cloned().fold(f64::INFINITY, f64::min);
    let threshold = smin + MODE_PROMINENCE * (smax - smin);
    let mut mode_count = 0;
    let mut i = 0;
    while i < n {
        // Maximal plateau of equal smoothed value.
        let mut j = i;
        while j + 1 < n && smoothed[j + 1] == smoothed[i] {
            j += 1;
        }
        let left_lower = i == 0 || smoothed[i - 1] < smoothed[i];
        let right_lower = j == n - 1 || smoothed[j + 1] < smoothed[j];
        if left_lower && right_lower && smoothed[i] >= threshold {
            mode_count += 1;
        }
        i = j + 1;
    }

    PeakAnalysis {
        argmax_offset: t[peak_idx],
        fwhm: Some(right - left),
        mode_count,
    }
}

/// Per-case registration errors for one method, with summary statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FREReport {
    pub method: String,
    pub per_case: Vec<f64>,
    pub median: f64,
    pub lower_quartile: f64,
    pub upper_quartile: f64,
}

/// Interpolated quantile of unsorted data.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        v[lo]
    } else {
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    }
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

impl FREReport {
    pub fn new(method: impl Into<String>, per_case: Vec<f64>) -> Self {
        let median = median(&per_case);
        let lower_quartile = quantile(&per_case, 0.25);
        let upper_quartile = quantile(&per_case, 0.75);
        Self {
            method: method.into(),
            per_case,
            median,
            lower_quartile,
            upper_quartile,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::MetricBinding;
    use crate::transform::{random_perturbation, PerturbationRanges, TransformKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn landmarks(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n)
            .map(|_| Point::new(rng.gen_range(10.0..110.0), rng.gen_range(10.0..110.0)))
            .collect()
    }

    #[test]
    fn fre_zero_at_equal_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let beta = random_perturbation(
            &PerturbationRanges::rigid_default(),
            TransformKind::Rigid,
            Point::new(64.0, 64.0),
            &mut rng,
        );
        let lm = landmarks(&mut rng, 50);
        assert_eq!(fre(&beta, &beta, &lm), 0.0);
    }

    #[test]
    fn fre_extra_translation_is_its_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let beta_true = random_perturbation(
            &PerturbationRanges::rigid_default(),
            TransformKind::Rigid,
            Point::new(64.0, 64.0),
            &mut rng,
        );
        let extra = TransformParams::translation(3.0, 4.0, Point::new(64.0, 64.0));
        let beta_hat = TransformParams::compose(&extra, &beta_true);
        let lm = landmarks(&mut rng, 100);
        assert!((fre(&beta_hat, &beta_true, &lm) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn fre_matches_per_landmark_oracle_and_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ranges = PerturbationRanges::rigid_default();
        let a = random_perturbation(&ranges, TransformKind::Rigid, Point::new(64.0, 64.0), &mut rng);
        let b = random_perturbation(&ranges, TransformKind::Rigid, Point::new(64.0, 64.0), &mut rng);
        let lm = landmarks(&mut rng, 77);

        let mut oracle = 0.0;
        for &p in &lm {
            let pa = a.map_point(p);
            let pb = b.map_point(p);
            oracle += ((pa.x - pb.x).powi(2) + (pa.y - pb.y).powi(2)).sqrt();
        }
        oracle /= lm.len() as f64;
        assert!((fre(&a, &b, &lm) - oracle).abs() < 1e-12);

        let mut shuffled = lm.clone();
        shuffled.reverse();
        assert!((fre(&a, &b, &lm) - fre(&a, &b, &shuffled)).abs() < 1e-12);

        let per = fre_per_landmark(&a, &b, &lm);
        let mean = per.iter().sum::<f64>() / per.len() as f64;
        assert!((mean - oracle).abs() < 1e-12);
    }

    fn triangle(center: f64, half_width: f64, t: f64) -> f64 {
        (1.0 - (t - center).abs() / half_width).max(0.0)
    }

    #[test]
    fn peak_analysis_single_triangle() {
        let offsets = offset_grid(10.0, 1.0);
        let scores: Vec<f64> = offsets.iter().map(|&t| triangle(0.0, 4.0, t)).collect();
        let sweep = SweepResult {
            axis: "tx".into(),
            offsets,
            scores,
            metadata: String::new(),
        };
        let pa = peak_analysis(&sweep);
        assert_eq!(pa.argmax_offset, 0.0);
        assert!((pa.fwhm.unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(pa.mode_count, 1);
    }

    #[test]
    fn peak_analysis_two_triangles() {
        let offsets = offset_grid(12.0, 1.0);
        let scores: Vec<f64> = offsets
            .iter()
            .map(|&t| triangle(-6.0, 3.0, t) + triangle(6.0, 3.0, t))
            .collect();
        let sweep = SweepResult {
            axis: "tx".into(),
            offsets,
            scores,
            metadata: String::new(),
        };
        assert_eq!(peak_analysis(&sweep).mode_count, 2);
    }

    #[test]
    fn peak_analysis_gaussian_fwhm() {
        let sigma = 3.0;
        let offsets = offset_grid(12.0, 0.5);
        let scores: Vec<f64> = offsets
            .iter()
            .map(|&t| (-t * t / (2.0 * sigma * sigma)).exp())
            .collect();
        let sweep = SweepResult {
            axis: "tx".into(),
            offsets,
            scores,
            metadata: String::new(),
        };
        let pa = peak_analysis(&sweep);
        let expected = 2.0 * sigma * (2.0 * std::f64::consts::LN_2).sqrt();
        assert!(
            (pa.fwhm.unwrap() - expected).abs() <= 0.5,
            "fwhm {:?} expected {expected}",
            pa.fwhm
        );
        assert_eq!(pa.mode_count, 1);
    }

    #[test]
    fn peak_analysis_flat_curve() {
        let sweep = SweepResult {
            axis: "tx".into(),
            offsets: offset_grid(3.0, 1.0),
            scores: vec![2.5; 7],
            metadata: String::new(),
        };
        let pa = peak_analysis(&sweep);
        assert_eq!(pa.mode_count, 0);
        assert!(pa.fwhm.is_none());
    }

    fn smooth_image(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, 1.0, |_, _| rng.gen::<f64>())
            .gaussian_smooth(1.5)
            .normalize_intensity()
            .unwrap()
    }

    #[test]
    fn sweep_subsequence_consistency() {
        let img = smooth_image(7, 32);
        let beta = TransformParams::identity_rigid(Point::new(16.0, 16.0));
        let metric = MetricBinding::MutualInformation { bins: 8 };
        let coarse = response_sweep(
            &metric,
            &img,
            &img,
            &beta,
            SweepAxis::Tx,
            &offset_grid(2.0, 1.0),
            "",
        )
        .unwrap();
        let fine = response_sweep(
            &metric,
            &img,
            &img,
            &beta,
            SweepAxis::Tx,
            &offset_grid(2.0, 0.5),
            "",
        )
        .unwrap();
        for (i, &o) in coarse.offsets.iter().enumerate() {
            let j = fine.offsets.iter().position(|&f| f == o).unwrap();
            assert_eq!(coarse.scores[i], fine.scores[j]);
        }
    }

    #[test]
    fn mi_self_pair_peaks_at_alignment() {
        let img = smooth_image(9, 48);
        let beta = TransformParams::identity_rigid(Point::new(24.0, 24.0));
        let metric = MetricBinding::MutualInformation { bins: 16 };
        let coarse = response_sweep(
            &metric,
            &img,
            &img,
            &beta,
            SweepAxis::Tx,
            &offset_grid(5.0, 0.5),
            "",
        )
        .unwrap();
        assert!(peak_analysis(&coarse).argmax_offset.abs() <= 0.5);
        let dense = response_sweep(
            &metric,
            &img,
            &img,
            &beta,
            SweepAxis::Tx,
            &offset_grid(1.0, 0.1),
            "",
        )
        .unwrap();
        assert!(peak_analysis(&dense).argmax_offset.abs() <= 0.10001);
    }

    #[test]
    fn zero_weight_classifier_sweep_is_flat() {
        use crate::classifier::{ArchDescriptor, Classifier};
        let img = smooth_image(11, 48);
        let arch = ArchDescriptor::two_channel_default(9);
        let mut c = Classifier::init(arch, 0).unwrap();
        c.set_params(&vec![0.0; c.param_count()]).unwrap();
        let metric = MetricBinding::Dmr {
            classifier: &c,
            stride: 4,
        };
        let beta = TransformParams::identity_rigid(Point::new(24.0, 24.0));
        let sweep = response_sweep(
            &metric,
            &img,
            &img,
            &beta,
            SweepAxis::Tx,
            &offset_grid(3.0, 1.0),
            "",
        )
        .unwrap();
        assert!(sweep.scores.iter().all(|&s| s == 0.0));
        assert_eq!(peak_analysis(&sweep).mode_count, 0);
    }

    #[test]
    fn quantiles() {
        let v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(median(&v), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        let report = FREReport::new("mi", v);
        assert_eq!(report.median, 2.5);
        assert!(report.lower_quartile <= report.median);
        assert!(report.median <= report.upper_quartile);
    }
}
