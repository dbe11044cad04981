//! End-to-end experiment pipelines: staged-training registration studies on
//! synthetic multimodal cases, the systematic-shift bias/dithering study,
//! the edge-to-intensity study, and multi-method comparisons. Shared by the
//! CLI and the acceptance suite; all outputs are deterministic given seeds.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::classifier::{ArchDescriptor, Classifier, TrainConfig};
use crate::error::{Error, Result};
use crate::eval::{
    fre, offset_grid, peak_analysis, response_sweep, FREReport, PeakAnalysis, SweepAxis,
    SweepResult,
};
use crate::histogram::{CategoricalJointModel, JointHistogram, DEFAULT_BINS};
use crate::image::Image;
use crate::iml::{run_iml, IMLConfig, IMLStageConfig, IMLState, TrainingPair};
use crate::optimizer::{
    default_stride, register, register_single_level, MetricBinding, MultiscaleSchedule,
    PowellConfig, ScheduleLevel,
};
use crate::sampling::{make_dataset, AlignedPair, Augment, SamplingConfig};
use crate::synth::{make_case, ModalityMode, RegistrationCase, SynthConfig};
use crate::transform::{Point, TransformKind, TransformParams};

/// Sampling settings that train well at desk scale.
pub fn desk_sampling() -> SamplingConfig {
    SamplingConfig {
        patch_size: 17,
        n_total: 20_000,
        ..Default::default()
    }
}

/// Training settings that converge in a few epochs at desk scale.
pub fn desk_training() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.1,
        batch_size: 128,
        weight_decay: 0.005,
        epochs: 8,
        momentum: 0.9,
        seed: 0,
    }
}

/// Builds stage configs from `(downsample, dither_variance)` pairs.
pub fn stage_schedule(
    levels: &[(usize, f64)],
    sampling: SamplingConfig,
    training: TrainConfig,
) -> Vec<IMLStageConfig> {
    levels
        .iter()
        .map(|&(l, var)| IMLStageConfig {
            downsample: l,
            dither_var: var,
            sampling,
            training,
        })
        .collect()
}

/// Generates `n` cases with per-case seeds `seed + index`.
pub fn make_cases(cfg: &SynthConfig, n: usize, seed: u64) -> Result<Vec<RegistrationCase>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            make_case(cfg, &mut rng)
        })
        .collect()
}

/// Registers a case with the learned metric over a coarse-to-fine factor
/// chain (the final factor is always full resolution).
pub fn register_ditr(
    classifier: &Classifier,
    fixed: &Image,
    moving: &Image,
    beta0: &TransformParams,
    factors: &[usize],
    stride: usize,
    powell: &PowellConfig,
) -> Result<TransformParams> {
    let schedule = MultiscaleSchedule {
        levels: factors
            .iter()
            .map(|&factor| ScheduleLevel {
                factor,
                metric: MetricBinding::Dmr {
                    classifier,
                    // Denser grid on coarser levels keeps the patch count up.
                    stride: (stride / factor.max(1)).max(2),
                },
            })
            .collect(),
    };
    register(fixed, moving, beta0, &schedule, powell)
}

fn identity_like(case: &RegistrationCase, kind: TransformKind) -> TransformParams {
    let c = Point::new(
        case.fixed.width() as f64 / 2.0 * case.fixed.spacing(),
        case.fixed.height() as f64 / 2.0 * case.fixed.spacing(),
    );
    match kind {
        TransformKind::Rigid => TransformParams::identity_rigid(c),
        TransformKind::Affine => TransformParams::identity_affine(c),
    }
}

fn initial_fre(case: &RegistrationCase, kind: TransformKind) -> f64 {
    fre(
        &identity_like(case, kind),
        &case.beta_true,
        &case.landmarks,
    )
}

fn write_deterministic(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Staged-training registration study (rigid / affine).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct StagedStudyConfig {
    pub kind: TransformKind,
    pub synth: SynthConfig,
    pub n_train: usize,
    pub n_heldout: usize,
    /// `(downsample, dither variance)` per stage.
    pub schedule: Vec<(usize, f64)>,
    pub sampling: SamplingConfig,
    pub training: TrainConfig,
    pub iml: IMLConfig,
    pub seed: u64,
}

impl StagedStudyConfig {
    pub fn rigid_default(seed: u64) -> Self {
        // 160 px keeps the coarsest level (factor 4 -> 40 px) large enough
        // relative to the 17 px patches that unregistered pairs stay
        // geometrically distinguishable from dithered registered ones.
        let mut synth = SynthConfig::default();
        synth.width = 160;
        synth.height = 160;
        Self {
            kind: TransformKind::Rigid,
            synth,
            n_train: 20,
            n_heldout: 10,
            schedule: vec![(4, 100.0), (2, 15.0), (0, 0.0)],
            sampling: desk_sampling(),
            training: desk_training(),
            iml: IMLConfig::default(),
            seed,
        }
    }

    pub fn affine_default(seed: u64) -> Self {
        let mut cfg = Self::rigid_default(seed);
        cfg.kind = TransformKind::Affine;
        cfg.synth.kind = TransformKind::Affine;
        cfg.synth.perturbation = crate::transform::PerturbationRanges::affine_default();
        cfg
    }

    /// Distinct downsample factors of the schedule, ending at full
    /// resolution; used for held-out coarse-to-fine registration.
    pub fn heldout_factors(&self) -> Vec<usize> {
        let mut factors: Vec<usize> = self.schedule.iter().map(|&(l, _)| l.max(1)).collect();
        factors.dedup();
        if *factors.last().unwrap() != 1 {
            factors.push(1);
        }
        factors
    }
}

#[derive(Debug, Clone)]
pub struct StagedStudyResult {
    pub state: IMLState,
    /// Training-set FRE per stage (one vector per stage, one entry per case).
    pub train_fre_by_stage: Vec<Vec<f64>>,
    pub heldout_initial_fre: Vec<f64>,
    pub heldout_fre: Vec<f64>,
}

impl StagedStudyResult {
    pub fn train_median_by_stage(&self) -> Vec<f64> {
        self.train_fre_by_stage
            .iter()
            .map(|v| crate::eval::median(v))
            .collect()
    }

    pub fn heldout_report(&self) -> FREReport {
        FREReport::new("ditr", self.heldout_fre.clone())
    }

    /// Writes `stage_fre.csv`, `heldout_fre.csv` and the stage checkpoints.
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv = Vec::new();
        writeln!(csv, "stage,case,fre")?;
        for (si, stage) in self.train_fre_by_stage.iter().enumerate() {
            for (ci, v) in stage.iter().enumerate() {
                writeln!(csv, "{},{},{}", si + 1, ci, v)?;
            }
        }
        write_deterministic(&dir.join("stage_fre.csv"), &csv)?;

        let mut csv = Vec::new();
        writeln!(csv, "case,initial_fre,ditr_fre")?;
        for (i, (a, b)) in self
            .heldout_initial_fre
            .iter()
            .zip(&self.heldout_fre)
            .enumerate()
        {
            writeln!(csv, "{i},{a},{b}")?;
        }
        write_deterministic(&dir.join("heldout_fre.csv"), &csv)?;
        self.state.save_checkpoints(&dir.join("checkpoints"))?;
        Ok(())
    }
}

/// Runs the staged-training study: generate cases, iterate training and
/// re-registration over the schedule, then register held-out cases from
/// identity with the final classifier.
pub fn run_staged_study(cfg: &StagedStudyConfig) -> Result<StagedStudyResult> {
    let train_cases = make_cases(&cfg.synth, cfg.n_train, cfg.seed)?;
    let heldout_cases = make_cases(&cfg.synth, cfg.n_heldout, cfg.seed.wrapping_add(10_000))?;
    let data: Vec<TrainingPair> = train_cases.into_iter().map(TrainingPair::from).collect();

    let schedule = stage_schedule(&cfg.schedule, cfg.sampling, cfg.training);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let state = run_iml(&schedule, &data, cfg.kind, &cfg.iml, &mut rng)?;

    let train_fre_by_stage: Vec<Vec<f64>> = state
        .history
        .iter()
        .map(|rec| {
            rec.fre_per_pair
                .clone()
                .ok_or_else(|| Error::InvalidConfig {
                    reason: "synthetic cases always carry ground truth".into(),
                })
        })
        .collect::<Result<_>>()?;

    let classifier = state.classifier.as_ref().expect("at least one stage ran");
    let factors = cfg.heldout_factors();
    let heldout: Vec<Result<(f64, f64)>> = heldout_cases
        .par_iter()
        .enumerate()
        .map(|(i, case)| {
            let beta0 = identity_like(case, cfg.kind);
            let beta = register_ditr(
                classifier,
                &case.fixed,
                &case.moving,
                &beta0,
                &factors,
                cfg.iml.grid_stride,
                &cfg.iml.powell,
            )
            .map_err(|e| e.annotate(format!("held-out case {i}")))?;
            Ok((
                initial_fre(case, cfg.kind),
                fre(&beta, &case.beta_true, &case.landmarks),
            ))
        })
        .collect();
    let mut heldout_initial_fre = Vec::new();
    let mut heldout_fre = Vec::new();
    for r in heldout {
        let (a, b) = r?;
        heldout_initial_fre.push(a);
        heldout_fre.push(b);
    }

    Ok(StagedStudyResult {
        state,
        train_fre_by_stage,
        heldout_initial_fre,
        heldout_fre,
    })
}

// ---------------------------------------------------------------------------
// Systematic-shift study (bias, augmentation, dithering, smoothing).
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ShiftStudyConfig {
    pub n_train: usize,
    pub shift: [f64; 2],
    pub synth: SynthConfig,
    pub sampling: SamplingConfig,
    pub training: TrainConfig,
    /// Dither standard deviation for the dithered variant (pixels).
    pub dither_sigma: f64,
    /// Gaussian smoothing for the smoothed variant (pixels).
    pub smooth_sigma: f64,
    pub sweep_range: f64,
    pub sweep_step: f64,
    pub stride: usize,
    pub arch: ArchDescriptor,
    pub seed: u64,
}

impl ShiftStudyConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        let mut synth = SynthConfig::default();
        synth.perturbation = crate::transform::PerturbationRanges::zero();
        synth.systematic_shift = [10.0, 0.0];
        Self {
            n_train: 8,
            shift: [10.0, 0.0],
            synth,
            sampling: desk_sampling(),
            training: desk_training(),
            dither_sigma: 5.0,
            smooth_sigma: 2.0,
            sweep_range: 20.0,
            sweep_step: 0.5,
            stride: default_stride(17),
            arch: ArchDescriptor::two_channel_default(17),
            seed,
        }
    }
}

pub const SHIFT_VARIANTS: [&str; 4] = ["plain", "augmented", "augmented_dithered", "smoothed"];

#[derive(Debug, Clone)]
pub struct ShiftStudyResult {
    /// (variant name, sweep, peak analysis), in `SHIFT_VARIANTS` order.
    pub variants: Vec<(String, SweepResult, PeakAnalysis)>,
}

impl ShiftStudyResult {
    pub fn get(&self, name: &str) -> &(String, SweepResult, PeakAnalysis) {
        self.variants
            .iter()
            .find(|(n, _, _)| n == name)
            .expect("known variant name")
    }

    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, sweep, _) in &self.variants {
            sweep.write_csv(&dir.join(format!("sweep_{name}.csv")))?;
        }
        let mut csv = Vec::new();
        writeln!(csv, "variant,argmax,fwhm,modes")?;
        for (name, _, peak) in &self.variants {
            writeln!(
                csv,
                "{name},{},{},{}",
                peak.argmax_offset,
                peak.fwhm.map_or("nan".into(), |v| v.to_string()),
                peak.mode_count
            )?;
        }
        write_deterministic(&dir.join("peaks.csv"), &csv)?;
        Ok(())
    }
}

/// Trains the four variants on systematically shifted data (all true
/// alignments offset by `shift`, datasets built as if identity were
/// correct) and sweeps each learned metric over translation on an aligned
/// held-out pair.
pub fn run_shift_study(cfg: &ShiftStudyConfig) -> Result<ShiftStudyResult> {
    let mut synth = cfg.synth;
    synth.systematic_shift = cfg.shift;
    let train_cases = make_cases(&synth, cfg.n_train, cfg.seed)?;

    let mut test_synth = cfg.synth;
    test_synth.systematic_shift = [0.0, 0.0];
    test_synth.perturbation = crate::transform::PerturbationRanges::zero();
    let test_case = {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(20_000));
        make_case(&test_synth, &mut rng)?
    };

    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let offsets = offset_grid(cfg.sweep_range, cfg.sweep_step);
    let mut variants = Vec::new();

    for &name in SHIFT_VARIANTS.iter() {
        let (augment, dither_sigma, smooth) = match name {
            "plain" => (Augment::None, 0.0, 0.0),
            "augmented" => (Augment::Rot90Flips, 0.0, 0.0),
            "augmented_dithered" => (Augment::Rot90Flips, cfg.dither_sigma, 0.0),
            "smoothed" => (Augment::Rot90Flips, 0.0, cfg.smooth_sigma),
            _ => unreachable!(),
        };

        // Optionally smoothed copies of the training images.
        let prepared: Vec<(Image, Image)> = train_cases
            .iter()
            .map(|c| {
                if smooth > 0.0 {
                    (
                        c.fixed.gaussian_smooth(smooth),
                        c.moving.gaussian_smooth(smooth),
                    )
                } else {
                    (c.fixed.clone(), c.moving.clone())
                }
            })
            .collect();
        let pairs: Vec<AlignedPair> = prepared
            .iter()
            .map(|(f, m)| AlignedPair {
                fixed: f,
                moving: m,
                beta: TransformParams::identity_rigid(Point::new(
                    f.width() as f64 / 2.0 * f.spacing(),
                    f.height() as f64 / 2.0 * f.spacing(),
                )),
            })
            .collect();

        let mut sampling = cfg.sampling;
        sampling.augment = augment;
        sampling.dither = crate::transform::DitherConfig {
            sigma: dither_sigma,
        };
        let dataset = make_dataset(&pairs, &sampling, &mut master)
            .map_err(|e| e.annotate(format!("variant {name} sampling")))?;

        let mut classifier = Classifier::init(cfg.arch.clone(), master.gen::<u64>())?;
        let mut training = cfg.training;
        training.seed = master.gen::<u64>();
        classifier
            .train(&dataset, &training)
            .map_err(|e| e.annotate(format!("variant {name} training")))?;
        drop(dataset);

        let (sweep_fixed, sweep_moving) = if smooth > 0.0 {
            (
                test_case.fixed.gaussian_smooth(smooth),
                test_case.moving.gaussian_smooth(smooth),
            )
        } else {
            (test_case.fixed.clone(), test_case.moving.clone())
        };
        let metric = MetricBinding::Dmr {
            classifier: &classifier,
            stride: cfg.stride,
        };
        let sweep = response_sweep(
            &metric,
            &sweep_fixed,
            &sweep_moving,
            &test_case.beta_true,
            SweepAxis::Tx,
            &offsets,
            &format!("variant={name}"),
        )?;
        let peak = peak_analysis(&sweep);
        variants.push((name.to_string(), sweep, peak));
    }

    Ok(ShiftStudyResult { variants })
}

// ---------------------------------------------------------------------------
// Edge-to-intensity study.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EdgeStudyConfig {
    pub n_cases: usize,
    pub synth: SynthConfig,
    pub schedule: Vec<(usize, f64)>,
    pub sampling: SamplingConfig,
    pub training: TrainConfig,
    pub iml: IMLConfig,
    pub mi_bins: usize,
    pub seed: u64,
}

impl EdgeStudyConfig {
    pub fn default_with_seed(seed: u64) -> Self {
        let mut synth = SynthConfig::default();
        synth.modality_mode = ModalityMode::Edge;
        Self {
            n_cases: 20,
            synth,
            schedule: vec![(2, 20.0), (2, 10.0), (0, 0.0)],
            sampling: desk_sampling(),
            training: desk_training(),
            iml: IMLConfig::default(),
            mi_bins: DEFAULT_BINS,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EdgeStudyResult {
    pub initial_fre: Vec<f64>,
    pub mi_fre: Vec<f64>,
    pub ditr_fre: Vec<f64>,
    pub state: IMLState,
}

impl EdgeStudyResult {
    pub fn write_outputs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut csv = Vec::new();
        writeln!(csv, "case,initial_fre,mi_fre,ditr_fre")?;
        for i in 0..self.initial_fre.len() {
            writeln!(
                csv,
                "{i},{},{},{}",
                self.initial_fre[i], self.mi_fre[i], self.ditr_fre[i]
            )?;
        }
        write_deterministic(&dir.join("edge_fre.csv"), &csv)?;
        self.state.save_checkpoints(&dir.join("checkpoints"))?;
        Ok(())
    }
}

/// Edge-map-to-intensity registration: single-level MI baseline versus the
/// staged learned metric on the same cases.
pub fn run_edge_study(cfg: &EdgeStudyConfig) -> Result<EdgeStudyResult> {
    let cases = make_cases(&cfg.synth, cfg.n_cases, cfg.seed)?;
    let initial: Vec<f64> = cases
        .iter()
        .map(|c| initial_fre(c, TransformKind::Rigid))
        .collect();

    let mi_metric = MetricBinding::MutualInformation { bins: cfg.mi_bins };
    let mi_fre: Vec<f64> = cases
        .par_iter()
        .map(|case| {
            let beta0 = identity_like(case, TransformKind::Rigid);
            match register_single_level(
                &case.fixed,
                &case.moving,
                &beta0,
                &mi_metric,
                1,
                &cfg.iml.powell,
            ) {
                Ok((beta, _)) => fre(&beta, &case.beta_true, &case.landmarks),
                // MI failing to evaluate at all counts as no improvement.
                Err(_) => initial_fre(case, TransformKind::Rigid),
            }
        })
        .collect();

    let data: Vec<TrainingPair> = cases.into_iter().map(TrainingPair::from).collect();
    let schedule = stage_schedule(&cfg.schedule, cfg.sampling, cfg.training);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
    let state = run_iml(&schedule, &data, TransformKind::Rigid, &cfg.iml, &mut rng)?;
    let ditr_fre = state
        .history
        .last()
        .and_then(|rec| rec.fre_per_pair.clone())
        .expect("synthetic cases carry ground truth");

    Ok(EdgeStudyResult {
        initial_fre: initial,
        mi_fre,
        ditr_fre,
        state,
    })
}

// ---------------------------------------------------------------------------
// Multi-method comparison.
// ---------------------------------------------------------------------------

/// Fits a categorical joint model from registered image pairs (cases taken
/// at their true alignment).
pub fn fit_catml_from_cases(
    cases: &[RegistrationCase],
    bins: usize,
) -> Result<CategoricalJointModel> {
    let mut counts = vec![0u64; bins * bins];
    for case in cases {
        let h = JointHistogram::from_images(&case.fixed, &case.moving, &case.beta_true, bins)?;
        for (acc, c) in counts.iter_mut().zip(h.counts()) {
            *acc += c;
        }
    }
    Ok(JointHistogram::from_counts(bins, counts)?.fit_categorical())
}

/// Runs MI, multiscale MI, categorical ML, and the learned metric over a
/// case set, reporting per-case FRE for each method.
pub fn compare_methods(
    cases: &[RegistrationCase],
    classifier: &Classifier,
    catml_model: &CategoricalJointModel,
    bins: usize,
    stride: usize,
    factors: &[usize],
    powell: &PowellConfig,
) -> Result<Vec<FREReport>> {
    let kind = TransformKind::Rigid;

    let run_single = |metric: &MetricBinding| -> Result<Vec<f64>> {
        let out: Vec<Result<f64>> = cases
            .par_iter()
            .map(|case| {
                let beta0 = identity_like(case, kind);
                let (beta, _) =
                    register_single_level(&case.fixed, &case.moving, &beta0, metric, 1, powell)?;
                Ok(fre(&beta, &case.beta_true, &case.landmarks))
            })
            .collect();
        out.into_iter().collect()
    };

    let mi = run_single(&MetricBinding::MutualInformation { bins })?;

    let mi_multi: Vec<f64> = {
        let out: Vec<Result<f64>> = cases
            .par_iter()
            .map(|case| {
                let beta0 = identity_like(case, kind);
                let schedule = MultiscaleSchedule {
                    levels: factors
                        .iter()
                        .map(|&factor| ScheduleLevel {
                            factor,
                            metric: MetricBinding::MutualInformation { bins },
                        })
                        .collect(),
                };
                let beta = register(&case.fixed, &case.moving, &beta0, &schedule, powell)?;
                Ok(fre(&beta, &case.beta_true, &case.landmarks))
            })
            .collect();
        out.into_iter().collect::<Result<_>>()?
    };

    let catml = run_single(&MetricBinding::CategoricalMl {
        model: catml_model,
    })?;

    let ditr: Vec<f64> = {
        let out: Vec<Result<f64>> = cases
            .par_iter()
            .map(|case| {
                let beta0 = identity_like(case, kind);
                let beta = register_ditr(
                    classifier,
                    &case.fixed,
                    &case.moving,
                    &beta0,
                    factors,
                    stride,
                    powell,
                )?;
                Ok(fre(&beta, &case.beta_true, &case.landmarks))
            })
            .collect();
        out.into_iter().collect::<Result<_>>()?
    };

    Ok(vec![
        FREReport::new("mi", mi),
        FREReport::new("mi_multiscale", mi_multi),
        FREReport::new("catml", catml),
        FREReport::new("ditr", ditr),
    ])
}

/// Writes one `method,case,fre` CSV for a set of comparison reports.
pub fn write_compare_csv(reports: &[FREReport], path: &Path) -> Result<()> {
    let mut csv = Vec::new();
    writeln!(csv, "method,case,fre")?;
    for report in reports {
        for (i, v) in report.per_case.iter().enumerate() {
            writeln!(csv, "{},{i},{v}", report.method)?;
        }
    }
    write_deterministic(path, &csv)?;
    Ok(())
}
