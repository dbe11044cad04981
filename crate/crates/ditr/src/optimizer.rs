//! Derivative-free maximization of registration objectives: Powell's
//! direction-set method with Brent line minimization, plus a coarse-to-fine
//! multiscale wrapper.
//!
//! Powell works internally in a scaled parameter space (one unit = one pixel
//! of translation at the current level, 0.01 rad of rotation, 0.01 of
//! scale/shear) so heterogeneous parameters take comparable steps.

use std::io::Write;
use std::path::Path;

use crate::classifier::Classifier;
use crate::error::{Error, Result};
use crate::histogram::{categorical_loglik, CategoricalJointModel, JointHistogram};
use crate::image::Image;
use crate::sampling::patch_grid;
use crate::transform::{TransformKind, TransformParams};

const GOLD: f64 = 1.618033988749895;
const CGOLD: f64 = 0.381966011250105;
const MAX_EXPANSIONS: usize = 60;
const BRENT_ITMAX: usize = 100;

#[derive(Debug, Clone)]
pub struct PowellConfig {
    /// Per-coordinate step units; empty means all ones.
    pub param_scales: Vec<f64>,
    /// Relative objective tolerance for termination.
    pub ftol: f64,
    pub max_iterations: usize,
    /// Initial line-search step in scaled units.
    pub bracket_step: f64,
    /// Line-minimum tolerance in scaled units (used as both the relative and
    /// absolute Brent tolerance).
    pub line_tol: f64,
    /// Cap on the line-search bracket span in scaled units.
    pub max_bracket_span: f64,
}

impl Default for PowellConfig {
    fn default() -> Self {
        Self {
            param_scales: Vec::new(),
            ftol: 1e-4,
            max_iterations: 50,
            bracket_step: 1.0,
            line_tol: 1e-6,
            max_bracket_span: 1e6,
        }
    }
}

impl PowellConfig {
    /// Looser line tolerances suited to image metrics.
    pub fn registration() -> Self {
        Self {
            line_tol: 5e-3,
            max_bracket_span: 128.0,
            ..Default::default()
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.ftol > 0.0) || !(self.bracket_step > 0.0) || !(self.line_tol > 0.0) {
            return Err(Error::InvalidConfig {
                reason: "ftol, bracket_step and line_tol must be positive".into(),
            });
        }
        if !self.param_scales.is_empty() {
            if self.param_scales.len() != dim {
                return Err(Error::InvalidConfig {
                    reason: format!(
                        "param_scales has {} entries for a {dim}-dimensional problem",
                        self.param_scales.len()
                    ),
                });
            }
            if self.param_scales.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::InvalidConfig {
                    reason: "param_scales must be positive".into(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PowellResult {
    pub x: Vec<f64>,
    pub f: f64,
    /// Objective at the start and after each iteration; non-increasing.
    pub trace: Vec<f64>,
    /// Parameters matching each trace entry.
    pub param_trace: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub evals: usize,
}

impl PowellResult {
    /// Writes `iteration,objective,p0,p1,...` rows.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let dim = self.param_trace.first().map_or(0, |p| p.len());
        let header: Vec<String> = (0..dim).map(|i| format!("p{i}")).collect();
        writeln!(out, "iteration,objective,{}", header.join(","))?;
        for (i, (f, p)) in self.trace.iter().zip(&self.param_trace).enumerate() {
            let ps: Vec<String> = p.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{i},{f},{}", ps.join(","))?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

enum Bracket {
    /// (a, b, c, fb) with the middle point below both ends.
    Found(f64, f64, f64, f64),
    /// No strict descent found next to the origin.
    Flat,
    /// Descent never turned back up within the span cap; best point seen.
    Monotone(f64, f64),
}

/// Expands outward from t = 0 by golden growth (both directions tried)
/// until the objective turns back up.
fn expand_bracket<F>(g: &mut F, f0: f64, step: f64, max_span: f64) -> Result<Bracket>
where
    F: FnMut(f64) -> Result<f64>,
{
    let fp = g(step)?;
    let fm = g(-step)?;
    let (dir, first) = if fp < f0 && fp <= fm {
        (1.0, fp)
    } else if fm < f0 {
        (-1.0, fm)
    } else if fp > f0 && fm > f0 {
        return Ok(Bracket::Found(-step, 0.0, step, f0));
    } else {
        return Ok(Bracket::Flat);
    };

    let mut a = 0.0;
    let mut b = dir * step;
    let mut fb = first;
    for _ in 0..MAX_EXPANSIONS {
        let c = b * GOLD;
        if c.abs() > max_span {
            return Ok(Bracket::Monotone(b, fb));
        }
        let fc = g(c)?;
        if fc > fb {
            return Ok(Bracket::Found(a, b, c, fb));
        }
        a = b;
        b = c;
        fb = fc;
    }
    Ok(Bracket::Monotone(b, fb))
}

/// Brent minimization inside a valid bracket `(a, b, c)` with `b` strictly
/// between the ends and `f(b)` strictly below both end values.
pub fn brent_line_min<F>(mut f: F, bracket: (f64, f64, f64), tol: f64) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (a, b, c) = bracket;
    let (fa, fb, fc) = (f(a)?, f(b)?, f(c)?);
    if !((a < b && b < c) || (c < b && b < a)) || !(fb < fa) || !(fb < fc) {
        return Err(Error::InvalidBracket { a, b, c });
    }
    brent_core(&mut f, (a, b, fb, c), tol, tol.min(1e-11))
}

/// Core Brent iteration; `fb` is the already-known value at `b`.
fn brent_core<F>(
    f: &mut F,
    bracket: (f64, f64, f64, f64),
    tol_rel: f64,
    tol_abs: f64,
) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    let (ax, bx, fbx, cx) = bracket;
    let mut a = ax.min(cx);
    let mut b = ax.max(cx);
    let (mut x, mut w, mut v) = (bx, bx, bx);
    let (mut fx, mut fw, mut fv) = (fbx, fbx, fbx);
    let mut d = 0.0f64;
    let mut e = 0.0f64;

    for _ in 0..BRENT_ITMAX {
        let xm = 0.5 * (a + b);
        let tol1 = tol_rel * x.abs() + tol_abs;
        let tol2 = 2.0 * tol1;
        if (x - xm).abs() <= tol2 - 0.5 * (b - a) {
            break;
        }
        let mut use_golden = true;
        if e.abs() > tol1 {
            // Parabolic fit through x, v, w.
            let r = (x - w) * (fx - fv);
            let q = (x - v) * (fx - fw);
            let mut p = (x - v) * q - (x - w) * r;
            let mut q2 = 2.0 * (q - r);
            if q2 > 0.0 {
                p = -p;
            }
            q2 = q2.abs();
            let etemp = e;
            e = d;
            if p.abs() < (0.5 * q2 * etemp).abs() && p > q2 * (a - x) && p < q2 * (b - x) {
                d = p / q2;
                let u = x + d;
                if u - a < tol2 || b - u < tol2 {
                    d = if xm - x >= 0.0 { tol1 } else { -tol1 };
                }
                use_golden = false;
            }
        }
        if use_golden {
            e = if x >= xm { a - x } else { b - x };
            d = CGOLD * e;
        }
        let u = if d.abs() >= tol1 {
            x + d
        } else {
            x + if d >= 0.0 { tol1 } else { -tol1 }
        };
        let fu = f(u)?;
        if fu <= fx {
            if u >= x {
                a = x;
            } else {
                b = x;
            }
            v = w;
            fv = fw;
            w = x;
            fw = fx;
            x = u;
            fx = fu;
        } else {
            if u < x {
                a = u;
            } else {
                b = u;
            }
            if fu <= fw || w == x {
                v = w;
                fv = fw;
                w = u;
                fw = fu;
            } else if fu <= fv || v == x || v == w {
                v = u;
                fv = fu;
            }
        }
    }
    Ok((x, fx))
}

/// Classic Powell minimization.
///
/// Cycles of line minimizations along a maintained direction set, replacing
/// the direction of largest decrease by the cycle displacement when the
/// standard acceptance test passes; the set resets to the coordinate basis
/// every `dim` iterations. Never returns a point worse than `x0`.
pub fn powell_minimize<F>(mut f: F, x0: &[f64], cfg: &PowellConfig) -> Result<PowellResult>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let dim = x0.len();
    cfg.validate(dim)?;
    let scales: Vec<f64> = if cfg.param_scales.is_empty() {
        vec![1.0; dim]
    } else {
        cfg.param_scales.clone()
    };

    let mut evals = 0usize;
    // Objective in scaled coordinates, with finiteness checking.
    let mut h = |y: &[f64]| -> Result<f64> {
        let x: Vec<f64> = y.iter().zip(&scales).map(|(yi, s)| yi * s).collect();
        let val = f(&x)?;
        evals += 1;
        if !val.is_finite() {
            return Err(Error::NonFiniteObjective { point: x });
        }
        Ok(val)
    };

    let mut y: Vec<f64> = x0.iter().zip(&scales).map(|(x, s)| x / s).collect();
    let mut fy = h(&y)?;
    let mut dirs: Vec<Vec<f64>> = (0..dim)
        .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    let unscale = |y: &[f64]| -> Vec<f64> { y.iter().zip(&scales).map(|(v, s)| v * s).collect() };

    let mut trace = vec![fy];
    let mut param_trace = vec![unscale(&y)];
    let mut iterations = 0;
    let mut converged = false;

    for iter in 0..cfg.max_iterations {
        iterations = iter + 1;
        let f_begin = fy;
        let y_begin = y.clone();
        let mut biggest_drop = 0.0;
        let mut biggest_idx = 0;

        for (i, dir) in dirs.iter().enumerate() {
            let f_before = fy;
            let (y_new, f_new) = line_minimize(&mut h, &y, dir, fy, cfg)?;
            y = y_new;
            fy = f_new;
            if f_before - fy > biggest_drop {
                biggest_drop = f_before - fy;
                biggest_idx = i;
            }
        }

        trace.push(fy);
        param_trace.push(unscale(&y));

        if 2.0 * (f_begin - fy) <= cfg.ftol * (f_begin.abs() + fy.abs()) + 1e-25 {
            converged = true;
            break;
        }

        if (iter + 1) % dim.max(2) == 0 {
            // Periodic reset to the coordinate basis guards against a
            // degenerate direction set.
            for (i, dir) in dirs.iter_mut().enumerate() {
                for (j, d) in dir.iter_mut().enumerate() {
                    *d = if i == j { 1.0 } else { 0.0 };
                }
            }
            continue;
        }

        // Extrapolated point along the cycle displacement.
        let y_ext: Vec<f64> = y
            .iter()
            .zip(&y_begin)
            .map(|(cur, beg)| 2.0 * cur - beg)
            .collect();
        let f_ext = barrier(h(&y_ext))?;
        if f_ext < f_begin {
            let t = 2.0 * (f_begin - 2.0 * fy + f_ext) * (f_begin - fy - biggest_drop).powi(2)
                - biggest_drop * (f_begin - f_ext).powi(2);
            if t < 0.0 {
                let new_dir: Vec<f64> = y
                    .iter()
                    .zip(&y_begin)
                    .map(|(cur, beg)| cur - beg)
                    .collect();
                if new_dir.iter().any(|&d| d != 0.0) {
                    let (y_new, f_new) = line_minimize(&mut h, &y, &new_dir, fy, cfg)?;
                    y = y_new;
                    fy = f_new;
                    dirs[biggest_idx] = dirs[dim - 1].clone();
                    dirs[dim - 1] = new_dir;
                }
            }
        }
    }

    Ok(PowellResult {
        x: unscale(&y),
        f: fy,
        trace,
        param_trace,
        iterations,
        converged,
        evals,
    })
}

/// Maps an out-of-overlap trial point to an infinite cost so exploration
/// stops at the field edge instead of aborting the whole optimization. The
/// starting point still propagates the error.
fn barrier(r: Result<f64>) -> Result<f64> {
    match r {
        Err(Error::NoOverlap { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

/// One line minimization from `y` along `dir`; never moves uphill.
fn line_minimize<F>(
    h: &mut F,
    y: &[f64],
    dir: &[f64],
    fy: f64,
    cfg: &PowellConfig,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let norm: f64 = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok((y.to_vec(), fy));
    }
    let unit: Vec<f64> = dir.iter().map(|d| d / norm).collect();
    let at = |t: f64| -> Vec<f64> { y.iter().zip(&unit).map(|(yi, di)| yi + t * di).collect() };
    let mut g = |t: f64| -> Result<f64> { barrier(h(&at(t))) };

    let (t_best, f_best) = match expand_bracket(&mut g, fy, cfg.bracket_step, cfg.max_bracket_span)?
    {
        Bracket::Flat => (0.0, fy),
        Bracket::Monotone(t, f) => (t, f),
        Bracket::Found(a, b, c, fb) => brent_core(&mut g, (a, b, fb, c), cfg.line_tol, cfg.line_tol)?,
    };
    if f_best < fy {
        Ok((at(t_best), f_best))
    } else {
        Ok((y.to_vec(), fy))
    }
}

/// A registration objective (to be maximized) bound to its context.
pub enum MetricBinding<'a> {
    MutualInformation {
        bins: usize,
    },
    /// Negated joint entropy, so maximizing minimizes entropy.
    NegJointEntropy {
        bins: usize,
    },
    CategoricalMl {
        model: &'a CategoricalJointModel,
    },
    Dmr {
        classifier: &'a Classifier,
        stride: usize,
    },
}

/// Default patch-score grid stride: half the patch edge.
pub fn default_stride(patch_size: usize) -> usize {
    (patch_size / 2).max(1)
}

impl MetricBinding<'_> {
    pub fn evaluate(&self, fixed: &Image, moving: &Image, beta: &TransformParams) -> Result<f64> {
        match self {
            MetricBinding::MutualInformation { bins } => {
                Ok(JointHistogram::from_images(fixed, moving, beta, *bins)?.mutual_information())
            }
            MetricBinding::NegJointEntropy { bins } => {
                Ok(-JointHistogram::from_images(fixed, moving, beta, *bins)?.joint_entropy())
            }
            MetricBinding::CategoricalMl { model } => categorical_loglik(fixed, moving, beta, model),
            MetricBinding::Dmr { classifier, stride } => {
                let p = classifier.arch().input_size;
                let grid = patch_grid(fixed, p, *stride);
                if grid.is_empty() {
                    return Err(Error::ImageTooSmall {
                        width: fixed.width(),
                        height: fixed.height(),
                        patch_size: p,
                    });
                }
                classifier
                    .dmr_score(fixed, moving, beta, &grid)
                    .map(|(s, _)| s)
            }
        }
    }

    fn patch_requirement(&self) -> usize {
        match self {
            MetricBinding::Dmr { classifier, .. } => classifier.arch().input_size,
            _ => 1,
        }
    }
}

/// One coarse-to-fine level: downsample factor (0 and 1 both mean full
/// resolution) and the metric used at that level.
pub struct ScheduleLevel<'a> {
    pub factor: usize,
    pub metric: MetricBinding<'a>,
}

pub struct MultiscaleSchedule<'a> {
    pub levels: Vec<ScheduleLevel<'a>>,
}

impl MultiscaleSchedule<'_> {
    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::InvalidConfig {
                reason: "schedule has no levels".into(),
            });
        }
        let factors: Vec<usize> = self.levels.iter().map(|l| l.factor.max(1)).collect();
        if factors.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::InvalidConfig {
                reason: "downsample factors must be non-increasing".into(),
            });
        }
        if *factors.last().unwrap() != 1 {
            return Err(Error::InvalidConfig {
                reason: "final level must run at full resolution".into(),
            });
        }
        Ok(())
    }
}

/// Maximizes a metric over transform parameters at a single pyramid level.
///
/// Translation scales follow the level's pixel size, so one scaled Powell
/// unit is one pixel at the working resolution. Both images are
/// downsampled by `factor` (0 and 1 mean full resolution).
pub fn register_single_level(
    fixed: &Image,
    moving: &Image,
    beta0: &TransformParams,
    metric: &MetricBinding,
    factor: usize,
    cfg: &PowellConfig,
) -> Result<(TransformParams, PowellResult)> {
    let lf = factor.max(1);
    let need = metric.patch_requirement();
    let (fixed_l, moving_l) = if lf == 1 {
        (fixed.clone(), moving.clone())
    } else {
        (
            fixed.downsample_for_patch(lf, need)?,
            moving.downsample_for_patch(lf, need)?,
        )
    };
    if fixed_l.width() < need || fixed_l.height() < need {
        return Err(Error::ImageTooSmall {
            width: fixed_l.width(),
            height: fixed_l.height(),
            patch_size: need,
        });
    }

    let mut level_cfg = cfg.clone();
    if level_cfg.param_scales.is_empty() {
        let t_scale = fixed_l.spacing();
        level_cfg.param_scales = match beta0.kind() {
            TransformKind::Rigid => vec![t_scale, t_scale, 0.01],
            TransformKind::Affine => vec![0.01, 0.01, 0.01, 0.01, t_scale, t_scale],
        };
    }

    let x0 = beta0.to_params();
    let objective = |params: &[f64]| -> Result<f64> {
        let beta = beta0.with_params(params);
        metric.evaluate(&fixed_l, &moving_l, &beta).map(|v| -v)
    };
    let result = powell_minimize(objective, &x0, &level_cfg)?;
    Ok((beta0.with_params(&result.x), result))
}

/// Coarse-to-fine registration: maximizes each level's metric, carrying the
/// estimate to the next level. Returns the full-resolution estimate.
pub fn register(
    fixed: &Image,
    moving: &Image,
    beta0: &TransformParams,
    schedule: &MultiscaleSchedule,
    cfg: &PowellConfig,
) -> Result<TransformParams> {
    schedule.validate()?;
    let mut beta = *beta0;
    for level in &schedule.levels {
        let (b, _) = register_single_level(fixed, moving, &beta, &level.metric, level.factor, cfg)?;
        beta = b;
    }
    Ok(beta)
}
