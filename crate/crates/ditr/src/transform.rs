//! Rigid and affine 2D transforms in physical coordinates.
//!
//! A transform maps fixed-frame physical points to moving-frame physical
//! points about a center anchor: `x -> L(x - c) + c + t`. Because physical
//! coordinates are resolution independent (see the pixel-center convention in
//! [`crate::image`]), the same parameters apply unchanged at every pyramid
//! level.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(&self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl std::ops::Add for Point {
    type Output = Point;
    fn add(self, rhs: Point) -> Point {
        Point::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point {
    type Output = Point;
    fn sub(self, rhs: Point) -> Point {
        Point::new(self.x - rhs.x, self.y - rhs.y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Rigid,
    Affine,
}

/// Transformation parameters mapping fixed-frame physical coordinates to
/// moving-frame physical coordinates about a center anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TransformParams {
    Rigid {
        tx: f64,
        ty: f64,
        theta: f64,
        center: [f64; 2],
    },
    Affine {
        matrix: [[f64; 2]; 2],
        tx: f64,
        ty: f64,
        center: [f64; 2],
    },
}

impl TransformParams {
    pub fn identity_rigid(center: Point) -> Self {
        TransformParams::Rigid {
            tx: 0.0,
            ty: 0.0,
            theta: 0.0,
            center: [center.x, center.y],
        }
    }

    pub fn identity_affine(center: Point) -> Self {
        TransformParams::Affine {
            matrix: [[1.0, 0.0], [0.0, 1.0]],
            tx: 0.0,
            ty: 0.0,
            center: [center.x, center.y],
        }
    }

    pub fn translation(tx: f64, ty: f64, center: Point) -> Self {
        TransformParams::Rigid {
            tx,
            ty,
            theta: 0.0,
            center: [center.x, center.y],
        }
    }

    pub fn kind(&self) -> TransformKind {
        match self {
            TransformParams::Rigid { .. } => TransformKind::Rigid,
            TransformParams::Affine { .. } => TransformKind::Affine,
        }
    }

    pub fn center(&self) -> Point {
        match self {
            TransformParams::Rigid { center, .. } | TransformParams::Affine { center, .. } => {
                Point::new(center[0], center[1])
            }
        }
    }

    /// The linear part L of the induced map `x -> L x + m`.
    pub fn linear_part(&self) -> [[f64; 2]; 2] {
        match self {
            TransformParams::Rigid { theta, .. } => {
                let (s, c) = theta.sin_cos();
                [[c, -s], [s, c]]
            }
            TransformParams::Affine { matrix, .. } => *matrix,
        }
    }

    /// The offset m of the induced map `x -> L x + m`, i.e. `c + t - L c`.
    fn offset(&self) -> Point {
        let l = self.linear_part();
        let c = self.center();
        let (tx, ty) = match self {
            TransformParams::Rigid { tx, ty, .. } | TransformParams::Affine { tx, ty, .. } => {
                (*tx, *ty)
            }
        };
        Point::new(
            c.x + tx - (l[0][0] * c.x + l[0][1] * c.y),
            c.y + ty - (l[1][0] * c.x + l[1][1] * c.y),
        )
    }

    /// Rebuilds parameters of the given kind and center from a raw map
    /// `x -> L x + m`.
    fn from_linear(kind: TransformKind, l: [[f64; 2]; 2], m: Point, center: Point) -> Self {
        let t = Point::new(
            m.x - center.x + l[0][0] * center.x + l[0][1] * center.y,
            m.y - center.y + l[1][0] * center.x + l[1][1] * center.y,
        );
        match kind {
            TransformKind::Rigid => TransformParams::Rigid {
                tx: t.x,
                ty: t.y,
                theta: l[1][0].atan2(l[0][0]),
                center: [center.x, center.y],
            },
            TransformKind::Affine => TransformParams::Affine {
                matrix: l,
                tx: t.x,
                ty: t.y,
                center: [center.x, center.y],
            },
        }
    }

    /// Maps a fixed-frame physical point into the moving frame.
    #[inline]
    pub fn map_point(&self, p: Point) -> Point {
        let l = self.linear_part();
        let c = self.center();
        let (tx, ty) = match self {
            TransformParams::Rigid { tx, ty, .. } | TransformParams::Affine { tx, ty, .. } => {
                (*tx, *ty)
            }
        };
        let dx = p.x - c.x;
        let dy = p.y - c.y;
        Point::new(
            l[0][0] * dx + l[0][1] * dy + c.x + tx,
            l[1][0] * dx + l[1][1] * dy + c.y + ty,
        )
    }

    /// Composition: `compose(a, b).map_point(p) == a.map_point(b.map_point(p))`.
    ///
    /// Two rigid transforms compose to a rigid transform; any other mix
    /// promotes to affine. The result keeps `a`'s center anchor.
    pub fn compose(a: &TransformParams, b: &TransformParams) -> TransformParams {
        let la = a.linear_part();
        let lb = b.linear_part();
        let ma = a.offset();
        let mb = b.offset();
        let l = [
            [
                la[0][0] * lb[0][0] + la[0][1] * lb[1][0],
                la[0][0] * lb[0][1] + la[0][1] * lb[1][1],
            ],
            [
                la[1][0] * lb[0][0] + la[1][1] * lb[1][0],
                la[1][0] * lb[0][1] + la[1][1] * lb[1][1],
            ],
        ];
        let m = Point::new(
            la[0][0] * mb.x + la[0][1] * mb.y + ma.x,
            la[1][0] * mb.x + la[1][1] * mb.y + ma.y,
        );
        let kind = if a.kind() == TransformKind::Rigid && b.kind() == TransformKind::Rigid {
            TransformKind::Rigid
        } else {
            TransformKind::Affine
        };
        TransformParams::from_linear(kind, l, m, a.center())
    }

    /// Inverse map. Errors on a singular affine matrix.
    pub fn invert(&self) -> Result<TransformParams> {
        let l = self.linear_part();
        let det = l[0][0] * l[1][1] - l[0][1] * l[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::SingularTransform { det });
        }
        let li = [
            [l[1][1] / det, -l[0][1] / det],
            [-l[1][0] / det, l[0][0] / det],
        ];
        let m = self.offset();
        let mi = Point::new(
            -(li[0][0] * m.x + li[0][1] * m.y),
            -(li[1][0] * m.x + li[1][1] * m.y),
        );
        Ok(TransformParams::from_linear(
            self.kind(),
            li,
            mi,
            self.center(),
        ))
    }

    /// Flattens to the optimizer's parameter vector.
    ///
    /// Rigid: `[tx, ty, theta]`; affine: `[a00, a01, a10, a11, tx, ty]`.
    pub fn to_params(&self) -> Vec<f64> {
        match self {
            TransformParams::Rigid { tx, ty, theta, .. } => vec![*tx, *ty, *theta],
            TransformParams::Affine { matrix, tx, ty, .. } => {
                vec![
                    matrix[0][0],
                    matrix[0][1],
                    matrix[1][0],
                    matrix[1][1],
                    *tx,
                    *ty,
                ]
            }
        }
    }

    /// Rebuilds a transform of the same kind and center from a parameter
    /// vector produced by [`TransformParams::to_params`].
    pub fn with_params(&self, p: &[f64]) -> TransformParams {
        match self {
            TransformParams::Rigid { center, .. } => TransformParams::Rigid {
                tx: p[0],
                ty: p[1],
                theta: p[2],
                center: *center,
            },
            TransformParams::Affine { center, .. } => TransformParams::Affine {
                matrix: [[p[0], p[1]], [p[2], p[3]]],
                tx: p[4],
                ty: p[5],
                center: *center,
            },
        }
    }

    pub fn n_params(&self) -> usize {
        match self.kind() {
            TransformKind::Rigid => 3,
            TransformKind::Affine => 6,
        }
    }
}

/// Uniform perturbation magnitude ranges for each parameter family.
///
/// Translation and rotation magnitudes receive an independent random sign
/// per component; scale and shear are drawn directly from their ranges
/// (the scale range brackets 1, the shear range is already two-sided).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerturbationRanges {
    pub translation: [f64; 2],
    pub rotation: [f64; 2],
    pub scale: [f64; 2],
    pub shear: [f64; 2],
}

impl PerturbationRanges {
    /// Rigid experiment ranges: translation U{1, 25}, rotation U{0.01, 0.15}.
    pub fn rigid_default() -> Self {
        Self {
            translation: [1.0, 25.0],
            rotation: [0.01, 0.15],
            scale: [1.0, 1.0],
            shear: [0.0, 0.0],
        }
    }

    /// Affine experiment ranges: adds scale U{0.95, 1.05} and shear U{-0.01, 0.01}.
    pub fn affine_default() -> Self {
        Self {
            translation: [1.0, 25.0],
            rotation: [0.01, 0.15],
            scale: [0.95, 1.05],
            shear: [-0.01, 0.01],
        }
    }

    /// All ranges collapsed to the identity (useful for systematic-shift
    /// constructions).
    pub fn zero() -> Self {
        Self {
            translation: [0.0, 0.0],
            rotation: [0.0, 0.0],
            scale: [1.0, 1.0],
            shear: [0.0, 0.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("translation", self.translation),
            ("rotation", self.rotation),
            ("scale", self.scale),
            ("shear", self.shear),
        ] {
            if r[0] > r[1] {
                return Err(Error::InvalidConfig {
                    reason: format!("{name} range has lo > hi"),
                });
            }
        }
        if !(self.scale[0] <= 1.0 && self.scale[1] >= 1.0) {
            return Err(Error::InvalidConfig {
                reason: "scale range must bracket 1".into(),
            });
        }
        Ok(())
    }
}

/// Gaussian dither displacement configuration (standard deviation in
/// physical units).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DitherConfig {
    pub sigma: f64,
}

impl DitherConfig {
    pub fn none() -> Self {
        Self { sigma: 0.0 }
    }
}

fn signed_magnitude(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    let mag = if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    };
    if rng.gen::<bool>() {
        mag
    } else {
        -mag
    }
}

fn draw(range: [f64; 2], rng: &mut impl Rng) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.gen_range(range[0]..range[1])
    }
}

/// Draws a random perturbation of the requested kind about `center`.
pub fn random_perturbation(
    ranges: &PerturbationRanges,
    kind: TransformKind,
    center: Point,
    rng: &mut impl Rng,
) -> TransformParams {
    let tx = signed_magnitude(ranges.translation, rng);
    let ty = signed_magnitude(ranges.translation, rng);
    let theta = signed_magnitude(ranges.rotation, rng);
    match kind {
        TransformKind::Rigid => TransformParams::Rigid {
            tx,
            ty,
            theta,
            center: [center.x, center.y],
        },
        TransformKind::Affine => {
            let sx = draw(ranges.scale, rng);
            let sy = draw(ranges.scale, rng);
            let h = draw(ranges.shear, rng);
            // A = R(theta) * shear(h) * diag(sx, sy); det = sx * sy > 0.
            let (s, c) = theta.sin_cos();
            let matrix = [
                [c * sx, (c * h - s) * sy],
                [s * sx, (s * h + c) * sy],
            ];
            TransformParams::Affine {
                matrix,
                tx,
                ty,
                center: [center.x, center.y],
            }
        }
    }
}

/// Draws an isotropic Gaussian displacement; `sigma = 0` returns the zero
/// vector without consuming randomness.
pub fn dither_offset(cfg: &DitherConfig, rng: &mut impl Rng) -> Point {
    if cfg.sigma == 0.0 {
        return Point::new(0.0, 0.0);
    }
    let normal = Normal::new(0.0, cfg.sigma).expect("sigma validated nonnegative");
    Point::new(normal.sample(rng), normal.sample(rng))
}

/// Pull-back resampling: output pixel at fixed-frame location `x` takes the
/// value of the moving image at `map_point(beta, x)`. The output grid copies
/// the moving image's shape and spacing; the mask marks in-bounds pixels.
pub fn resample_moving(moving: &Image, beta: &TransformParams) -> (Image, Vec<bool>) {
    let w = moving.width();
    let h = moving.height();
    let s = moving.spacing();
    let mut data = vec![0.0; w * h];
    let mut mask = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let p = Point::new(moving.pixel_to_phys(x as f64), moving.pixel_to_phys(y as f64));
            let q = beta.map_point(p);
            let qx = q.x / s - 0.5;
            let qy = q.y / s - 0.5;
            if let Some(v) = moving.sample_bilinear(qx, qy) {
                data[y * w + x] = v;
                mask[y * w + x] = true;
            }
        }
    }
    (
        Image::new(w, h, s, data).expect("dimensions preserved"),
        mask,
    )
}
