//! Two-channel patch discriminator: a small convolutional network whose
//! pre-sigmoid output scores how likely a pair of patches is to be in
//! registration, trained with cross-entropy.
//!
//! The registration objective `dmr_score` is the sum of pre-sigmoid
//! responses over a grid of corresponding patches.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::sampling::{extract_patch, LabeledPatchPair, PatchPair};
use crate::transform::{Point, TransformParams};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of the logistic function, `ln(p / (1 - p))`.
#[inline]
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
    },
    Relu,
    GlobalAvgPool,
    Dense {
        out: usize,
    },
}

/// Network architecture: input channel count and edge length, then a layer
/// stack that must reduce to a single scalar output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub input_channels: usize,
    pub input_size: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    /// The default two-channel patch net: two strided 3x3 convolutions with
    /// ReLU, global average pooling, and a dense scalar head.
    pub fn two_channel_default(patch_size: usize) -> Self {
        Self {
            input_channels: 2,
            input_size: patch_size,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 8,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::Conv {
                    out_channels: 16,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out: 1 },
            ],
        }
    }

    /// A small net for gradient checking.
    pub fn reduced(patch_size: usize) -> Self {
        Self {
            input_channels: 2,
            input_size: patch_size,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 3,
                    stride: 2,
                },
                LayerSpec::Relu,
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out: 1 },
            ],
        }
    }
}

#[derive(Debug, Clone)]
struct LayerPlan {
    spec: LayerSpec,
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    w_off: usize,
    w_len: usize,
    b_off: usize,
    b_len: usize,
}

fn build_plans(arch: &ArchDescriptor) -> Result<Vec<LayerPlan>> {
    let bad = |reason: String| Error::InvalidArchitecture { reason };
    if arch.input_channels == 0 || arch.input_size == 0 {
        return Err(bad("input dimensions must be positive".into()));
    }
    if arch.layers.is_empty() {
        return Err(bad("layer stack is empty".into()));
    }
    let (mut c, mut h, mut w) = (arch.input_channels, arch.input_size, arch.input_size);
    let mut offset = 0usize;
    let mut plans = Vec::with_capacity(arch.layers.len());
    for spec in &arch.layers {
        let (out_c, out_h, out_w, w_len, b_len) = match *spec {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
            } => {
                if out_channels == 0 || kernel == 0 || stride == 0 {
                    return Err(bad("conv parameters must be positive".into()));
                }
                if h < kernel || w < kernel {
                    return Err(bad(format!(
                        "conv kernel {kernel} exceeds input {h}x{w}"
                    )));
                }
                let oh = (h - kernel) / stride + 1;
                let ow = (w - kernel) / stride + 1;
                (
                    out_channels,
                    oh,
                    ow,
                    out_channels * c * kernel * kernel,
                    out_channels,
                )
            }
            LayerSpec::Relu => (c, h, w, 0, 0),
            LayerSpec::GlobalAvgPool => (c, 1, 1, 0, 0),
            LayerSpec::Dense { out } => {
                if out == 0 {
                    return Err(bad("dense output must be positive".into()));
                }
                (out, 1, 1, out * c * h * w, out)
            }
        };
        plans.push(LayerPlan {
            spec: *spec,
            in_c: c,
            in_h: h,
            in_w: w,
            out_c,
            out_h,
            out_w,
            w_off: offset,
            w_len,
            b_off: offset + w_len,
            b_len,
        });
        offset += w_len + b_len;
        c = out_c;
        h = out_h;
        w = out_w;
    }
    if c * h * w != 1 {
        return Err(bad(format!(
            "network must end in a single scalar, got {c}x{h}x{w}"
        )));
    }
    Ok(plans)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Momentum coefficient; 0 is plain SGD.
    #[serde(default)]
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 256,
            weight_decay: 0.005,
            epochs: 6,
            momentum: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.weight_decay < 0.0 {
            return Err(Error::InvalidConfig {
                reason: "need learning_rate > 0, batch_size >= 1, weight_decay >= 0".into(),
            });
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig {
                reason: "momentum must lie in [0, 1)".into(),
            });
        }
        Ok(())
    }
}

/// The discriminator with its parameters.
#[derive(Debug, Clone)]
pub struct Classifier {
    arch: ArchDescriptor,
    plans: Vec<LayerPlan>,
    params: Vec<f64>,
}

const MODEL_MAGIC: &[u8; 8] = b"DITRCLF\0";
const MODEL_VERSION: u32 = 1;

impl Classifier {
    /// Scaled-uniform initialization: weights `U(-1/sqrt(fan_in),
    /// 1/sqrt(fan_in))`, biases zero. Deterministic given the seed.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        let plans = build_plans(&arch)?;
        let count = plans.iter().map(|p| p.w_len + p.b_len).sum();
        let mut params = vec![0.0; count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for plan in &plans {
            let fan_in = match plan.spec {
                LayerSpec::Conv { kernel, .. } => plan.in_c * kernel * kernel,
                LayerSpec::Dense { .. } => plan.in_c * plan.in_h * plan.in_w,
                _ => continue,
            };
            let a = 1.0 / (fan_in as f64).sqrt();
            for i in 0..plan.w_len {
                params[plan.w_off + i] = rng.gen_range(-a..a);
            }
            // Biases stay zero.
        }
        Ok(Self {
            arch,
            plans,
            params,
        })
    }

    pub fn from_params(arch: ArchDescriptor, params: Vec<f64>) -> Result<Self> {
        let plans = build_plans(&arch)?;
        let count: usize = plans.iter().map(|p| p.w_len + p.b_len).sum();
        if params.len() != count {
            return Err(Error::InvalidArchitecture {
                reason: format!("expected {count} parameters, got {}", params.len()),
            });
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArchitecture {
                reason: "parameters must be finite".into(),
            });
        }
        Ok(Self {
            arch,
            plans,
            params,
        })
    }

    pub fn arch(&self) -> &ArchDescriptor {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", self.params.len()),
                got: format!("{}", params.len()),
            });
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn input_of(&self, pair: &PatchPair) -> Result<Vec<f64>> {
        let p = self.arch.input_size;
        if pair.size != p || pair.u.len() != p * p || pair.v.len() != p * p {
            return Err(Error::ShapeMismatch {
                expected: format!("2x{p}x{p} patch pair"),
                got: format!("size {} (u: {}, v: {})", pair.size, pair.u.len(), pair.v.len()),
            });
        }
        if self.arch.input_channels != 2 {
            return Err(Error::ShapeMismatch {
                expected: "2 input channels".into(),
                got: format!("{}", self.arch.input_channels),
            });
        }
        // Center the unit-interval intensities; removing the DC component
        // is what lets plain SGD train this small net.
        let mut input = Vec::with_capacity(2 * p * p);
        input.extend(pair.u.iter().map(|&x| x as f64 - 0.5));
        input.extend(pair.v.iter().map(|&x| x as f64 - 0.5));
        Ok(input)
    }

    /// Runs the forward pass, returning activations at each layer boundary
    /// (`acts[0]` is the input).
    fn forward(&self, input: Vec<f64>) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.plans.len() + 1);
        acts.push(input);
        for plan in &self.plans {
            let x = acts.last().unwrap();
            let mut y = vec![0.0; plan.out_c * plan.out_h * plan.out_w];
            match plan.spec {
                LayerSpec::Conv { kernel, stride, .. } => {
                    let (ih, iw) = (plan.in_h, plan.in_w);
                    for oc in 0..plan.out_c {
                        let b = self.params[plan.b_off + oc];
                        for oy in 0..plan.out_h {
                            for ox in 0..plan.out_w {
                                let mut acc = b;
                                for ic in 0..plan.in_c {
                                    let wbase =
                                        plan.w_off + ((oc * plan.in_c + ic) * kernel) * kernel;
                                    let ibase = ic * ih;
                                    for ky in 0..kernel {
                                        let iy = oy * stride + ky;
                                        let row = (ibase + iy) * iw + ox * stride;
                                        let ws = &self.params[wbase + ky * kernel..][..kernel];
                                        let xs = &x[row..][..kernel];
                                        acc += ws
                                            .iter()
                                            .zip(xs)
                                            .map(|(w, v)| w * v)
                                            .sum::<f64>();
                                    }
                                }
                                y[(oc * plan.out_h + oy) * plan.out_w + ox] = acc;
                            }
                        }
                    }
                }
                LayerSpec::Relu => {
                    for (o, &v) in y.iter_mut().zip(x.iter()) {
                        *o = v.max(0.0);
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    let plane = plan.in_h * plan.in_w;
                    let inv = 1.0 / plane as f64;
                    for c in 0..plan.in_c {
                        y[c] = x[c * plane..(c + 1) * plane].iter().sum::<f64>() * inv;
                    }
                }
                LayerSpec::Dense { .. } => {
                    let n = plan.in_c * plan.in_h * plan.in_w;
                    for o in 0..plan.out_c {
                        let mut acc = self.params[plan.b_off + o];
                        let wrow = plan.w_off + o * n;
                        for i in 0..n {
                            acc += self.params[wrow + i] * x[i];
                        }
                        y[o] = acc;
                    }
                }
            }
            acts.push(y);
        }
        acts
    }

    /// Pre-sigmoid response for a patch pair.
    pub fn logit(&self, pair: &PatchPair) -> Result<f64> {
        let input = self.input_of(pair)?;
        let acts = self.forward(input);
        Ok(acts.last().unwrap()[0])
    }

    /// `sigma(logit)`: the probability that the pair is registered.
    pub fn predict_prob(&self, pair: &PatchPair) -> Result<f64> {
        Ok(sigmoid(self.logit(pair)?))
    }

    /// Cross-entropy loss of one labeled pair, accumulating its parameter
    /// gradient into `grads` (same layout as `params`).
    pub fn grad_into(&self, pair: &PatchPair, z: u8, grads: &mut [f64]) -> Result<f64> {
        debug_assert_eq!(grads.len(), self.params.len());
        let input = self.input_of(pair)?;
        let acts = self.forward(input);
        let f = acts.last().unwrap()[0];
        let zf = z as f64;
        // Stable binary cross-entropy and its logit gradient.
        let loss = f.max(0.0) - f * zf + (-f.abs()).exp().ln_1p();
        let mut grad_out = vec![sigmoid(f) - zf];

        for (li, plan) in self.plans.iter().enumerate().rev() {
            let x = &acts[li];
            let mut grad_in = vec![0.0; plan.in_c * plan.in_h * plan.in_w];
            match plan.spec {
                LayerSpec::Conv { kernel, stride, .. } => {
                    let (ih, iw) = (plan.in_h, plan.in_w);
                    for oc in 0..plan.out_c {
                        for oy in 0..plan.out_h {
                            for ox in 0..plan.out_w {
                                let g = grad_out[(oc * plan.out_h + oy) * plan.out_w + ox];
                                if g == 0.0 {
                                    continue;
                                }
                                grads[plan.b_off + oc] += g;
                                for ic in 0..plan.in_c {
                                    let wbase =
                                        plan.w_off + ((oc * plan.in_c + ic) * kernel) * kernel;
                                    let ibase = ic * ih;
                                    for ky in 0..kernel {
                                        let iy = oy * stride + ky;
                                        let row = (ibase + iy) * iw + ox * stride;
                                        let wrow = wbase + ky * kernel;
                                        for kx in 0..kernel {
                                            grads[wrow + kx] += g * x[row + kx];
                                            grad_in[row + kx] += g * self.params[wrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                LayerSpec::Relu => {
                    for i in 0..grad_in.len() {
                        if x[i] > 0.0 {
                            grad_in[i] = grad_out[i];
                        }
                    }
                }
                LayerSpec::GlobalAvgPool => {
                    let plane = plan.in_h * plan.in_w;
                    let inv = 1.0 / plane as f64;
                    for c in 0..plan.in_c {
                        let g = grad_out[c] * inv;
                        for i in 0..plane {
                            grad_in[c * plane + i] = g;
                        }
                    }
                }
                LayerSpec::Dense { .. } => {
                    let n = plan.in_c * plan.in_h * plan.in_w;
                    for o in 0..plan.out_c {
                        let g = grad_out[o];
                        grads[plan.b_off + o] += g;
                        let wrow = plan.w_off + o * n;
                        for i in 0..n {
                            grads[wrow + i] += g * x[i];
                            grad_in[i] += g * self.params[wrow + i];
                        }
                    }
                }
            }
            grad_out = grad_in;
        }
        Ok(loss)
    }

    /// Convenience wrapper around [`Classifier::grad_into`].
    pub fn loss_and_grad(&self, pair: &PatchPair, z: u8) -> Result<(f64, Vec<f64>)> {
        let mut grads = vec![0.0; self.params.len()];
        let loss = self.grad_into(pair, z, &mut grads)?;
        Ok((loss, grads))
    }

    /// Sign pattern of all ReLU pre-activations for this input.
    ///
    /// Finite differences are only valid where the loss is smooth; a
    /// gradient check should skip parameters whose perturbation flips any
    /// entry of this pattern.
    pub fn relu_pattern(&self, pair: &PatchPair) -> Result<Vec<bool>> {
        let input = self.input_of(pair)?;
        let acts = self.forward(input);
        let mut pattern = Vec::new();
        for (li, plan) in self.plans.iter().enumerate() {
            if matches!(plan.spec, LayerSpec::Relu) {
                pattern.extend(acts[li].iter().map(|&v| v > 0.0));
            }
        }
        Ok(pattern)
    }

    /// Mini-batch SGD on mean cross-entropy plus `weight_decay/2 * |theta|^2`.
    ///
    /// Returns the per-epoch mean cross-entropy. Shuffling, and therefore the
    /// whole optimization, is deterministic given `cfg.seed`. Batch gradients
    /// are accumulated over fixed-size chunks and reduced in chunk order, so
    /// results do not depend on thread scheduling.
    pub fn train(&mut self, dataset: &[LabeledPatchPair], cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if dataset.is_empty()
            || dataset.iter().all(|d| d.z == 0)
            || dataset.iter().all(|d| d.z == 1)
        {
            return Err(Error::DegenerateLabels);
        }
        let n = dataset.len();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut trace = Vec::with_capacity(cfg.epochs);
        let nparams = self.params.len();
        let mut velocity = vec![0.0; nparams];

        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let partials: Vec<Result<(Vec<f64>, f64)>> = batch
                    .par_chunks(16)
                    .map(|chunk| {
                        let mut g = vec![0.0; nparams];
                        let mut loss = 0.0;
                        for &i in chunk {
                            loss += self.grad_into(&dataset[i].pair, dataset[i].z, &mut g)?;
                        }
                        Ok((g, loss))
                    })
                    .collect();
                let mut grad = vec![0.0; nparams];
                let mut batch_loss = 0.0;
                for part in partials {
                    let (g, l) = part?;
                    for (acc, v) in grad.iter_mut().zip(&g) {
                        *acc += v;
                    }
                    batch_loss += l;
                }
                epoch_loss += batch_loss;
                let inv = 1.0 / batch.len() as f64;
                let lr = cfg.learning_rate;
                let wd = cfg.weight_decay;
                for ((p, g), v) in self.params.iter_mut().zip(&grad).zip(&mut velocity) {
                    *v = cfg.momentum * *v + g * inv + wd * *p;
                    *p -= lr * *v;
                }
            }
            trace.push(epoch_loss / n as f64);
        }
        Ok(trace)
    }

    /// Fraction of the dataset classified correctly at threshold 0.5.
    pub fn accuracy(&self, dataset: &[LabeledPatchPair]) -> Result<f64> {
        let mut correct = 0usize;
        for item in dataset {
            let pred = self.logit(&item.pair)? > 0.0;
            if pred == (item.z == 1) {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// Registration objective: sum of pre-sigmoid responses over the grid of
    /// patch centers (pixel coordinates in the fixed image). Moving patches
    /// whose support falls out of field are skipped; returns the score and
    /// the number of contributing patches.
    pub fn dmr_score(
        &self,
        fixed: &Image,
        moving: &Image,
        beta: &TransformParams,
        grid: &[(f64, f64)],
    ) -> Result<(f64, usize)> {
        let p = self.arch.input_size;
        let mut score = 0.0;
        let mut count = 0usize;
        for &(cx, cy) in grid {
            let u = extract_patch(fixed, cx, cy, p)?;
            let phys = Point::new(fixed.pixel_to_phys(cx), fixed.pixel_to_phys(cy));
            let q = beta.map_point(phys);
            let mx = moving.phys_to_pixel(q.x);
            let my = moving.phys_to_pixel(q.y);
            let Ok(v) = extract_patch(moving, mx, my, p) else {
                continue;
            };
            score += self.logit(&PatchPair { u, v, size: p })?;
            count += 1;
        }
        if count == 0 {
            return Err(Error::NoOverlap {
                params: beta.to_params(),
            });
        }
        Ok((score, count))
    }

    /// Serializes to `magic | version | descriptor JSON | f32 LE parameters`.
    /// File -> memory -> file round trips are byte exact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let desc = serde_json::to_vec(&self.arch)?;
        let mut buf = Vec::with_capacity(20 + desc.len() + 4 * self.params.len());
        buf.extend_from_slice(MODEL_MAGIC);
        buf.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        buf.extend_from_slice(&(desc.len() as u32).to_le_bytes());
        buf.extend_from_slice(&desc);
        for &p in &self.params {
            buf.extend_from_slice(&(p as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let bad = |reason: &str| Error::MalformedFile {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("missing model magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let desc_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + desc_len {
            return Err(bad("truncated descriptor"));
        }
        let arch: ArchDescriptor = serde_json::from_slice(&bytes[16..16 + desc_len])?;
        let body = &bytes[16 + desc_len..];
        if body.len() % 4 != 0 {
            return Err(bad("parameter block not a multiple of 4 bytes"));
        }
        let params: Vec<f64> = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Self::from_params(arch, params)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::PatchPair;

    fn rand_patch(rng: &mut ChaCha8Rng, p: usize) -> Vec<f32> {
        (0..p * p).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn rand_pair(rng: &mut ChaCha8Rng, p: usize) -> PatchPair {
        PatchPair {
            u: rand_patch(rng, p),
            v: rand_patch(rng, p),
            size: p,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let arch = ArchDescriptor::two_channel_default(17);
        let a = Classifier::init(arch.clone(), 5).unwrap();
        let b = Classifier::init(arch, 5).unwrap();
        assert_eq!(a.params(), b.params());
        // All bias slots are zero at init.
        for plan in &a.plans {
            for i in 0..plan.b_len {
                assert_eq!(a.params[plan.b_off + i], 0.0);
            }
        }
    }

    #[test]
    fn init_weight_variance_matches_uniform_law() {
        // Dense layer with fan_in 1250 and 20000 weights:
        // Var U(-a, a) = a^2 / 3 = 1 / (3 * fan_in).
        let arch = ArchDescriptor {
            input_channels: 2,
            input_size: 25,
            layers: vec![LayerSpec::Dense { out: 16 }, LayerSpec::Dense { out: 1 }],
        };
        let c = Classifier::init(arch, 11).unwrap();
        let plan = &c.plans[0];
        let ws = &c.params[plan.w_off..plan.w_off + plan.w_len];
        let mean = ws.iter().sum::<f64>() / ws.len() as f64;
        let var = ws.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / ws.len() as f64;
        let expected = 1.0 / (3.0 * 1250.0);
        assert!(
            (var - expected).abs() < 0.2 * expected,
            "var {var}, expected {expected}"
        );
    }

    #[test]
    fn invalid_descriptor_errors() {
        let arch = ArchDescriptor {
            input_channels: 2,
            input_size: 0,
            layers: vec![LayerSpec::Dense { out: 1 }],
        };
        assert!(Classifier::init(arch, 0).is_err());
        let arch = ArchDescriptor {
            input_channels: 2,
            input_size: 9,
            layers: vec![LayerSpec::Dense { out: 2 }],
        };
        assert!(matches!(
            Classifier::init(arch, 0),
            Err(Error::InvalidArchitecture { .. })
        ));
    }

    #[test]
    fn zero_params_give_zero_logit() {
        let arch = ArchDescriptor::two_channel_default(9);
        let mut c = Classifier::init(arch, 1).unwrap();
        let zeros = vec![0.0; c.param_count()];
        c.set_params(&zeros).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pair = rand_pair(&mut rng, 9);
        assert_eq!(c.logit(&pair).unwrap(), 0.0);
        assert_eq!(c.predict_prob(&pair).unwrap(), 0.5);
    }

    #[test]
    fn final_bias_shift_is_exact() {
        let arch = ArchDescriptor::two_channel_default(9);
        let c = Classifier::init(arch, 3).unwrap();
        let mut shifted = c.clone();
        let last = shifted.params.len() - 1;
        let delta = 0.73;
        let mut p = shifted.params().to_vec();
        p[last] += delta;
        shifted.set_params(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let pair = rand_pair(&mut rng, 9);
            let f0 = c.logit(&pair).unwrap();
            let f1 = shifted.logit(&pair).unwrap();
            assert!((f1 - f0 - delta).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let arch = ArchDescriptor::two_channel_default(9);
        let c = Classifier::init(arch, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pair = rand_pair(&mut rng, 7);
        assert!(matches!(c.logit(&pair), Err(Error::ShapeMismatch { .. })));
    }

    /// Independent straight-line forward pass for the default architecture.
    fn oracle_forward(c: &Classifier, pair: &PatchPair) -> f64 {
        let p = c.arch.input_size;
        let input: Vec<f64> = pair
            .u
            .iter()
            .chain(pair.v.iter())
            .map(|&x| x as f64 - 0.5)
            .collect();
        let conv = |x: &[f64], ic: usize, ih: usize, iw: usize, oc: usize, w: &[f64], b: &[f64]| {
            let oh = (ih - 3) / 2 + 1;
            let ow = (iw - 3) / 2 + 1;
            let mut y = vec![0.0; oc * oh * ow];
            for o in 0..oc {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[o];
                        for i in 0..ic {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let wv = w[((o * ic + i) * 3 + ky) * 3 + kx];
                                    let xv = x[(i * ih + yy * 2 + ky) * iw + xx * 2 + kx];
                                    acc += wv * xv;
                                }
                            }
                        }
                        y[(o * oh + yy) * ow + xx] = acc;
                    }
                }
            }
            (y, oh, ow)
        };
        let relu = |x: Vec<f64>| x.into_iter().map(|v| v.max(0.0)).collect::<Vec<_>>();

        let pr = c.params();
        let (w1, b1) = (&pr[0..144], &pr[144..152]);
        let (w2, b2) = (&pr[152..1304], &pr[1304..1320]);
        let (w3, b3) = (&pr[1320..1336], &pr[1336..1337]);

        let (y1, h1, w1s) = conv(&input, 2, p, p, 8, w1, b1);
        let y1 = relu(y1);
        let (y2, h2, w2s) = conv(&y1, 8, h1, w1s, 16, w2, b2);
        let y2 = relu(y2);
        let plane = h2 * w2s;
        let mut pooled = vec![0.0; 16];
        for ch in 0..16 {
            pooled[ch] = y2[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        let mut f = b3[0];
        for i in 0..16 {
            f += w3[i] * pooled[i];
        }
        f
    }

    #[test]
    fn forward_matches_independent_oracle() {
        let arch = ArchDescriptor::two_channel_default(17);
        let c = Classifier::init(arch, 7).unwrap();
        assert_eq!(c.param_count(), 1337);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let pair = rand_pair(&mut rng, 17);
            let f = c.logit(&pair).unwrap();
            let oracle = oracle_forward(&c, &pair);
            assert!((f - oracle).abs() < 1e-12, "{f} vs {oracle}");
        }
    }

    #[test]
    fn sigmoid_logit_identities() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-12);
        // sigma(logit(p)) = p across (0, 1).
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            assert!((sigmoid(logit(p)) - p).abs() < 1e-9);
        }
        // logit(sigma(x)) = x within the f64 information-preserving range:
        // for x beyond ~16, sigma(x) quantizes next to 1 and the identity
        // degrades to ~1e-5 regardless of implementation.
        let mut x = -30.0;
        while x <= 16.0 {
            assert!((logit(sigmoid(x)) - x).abs() < 1e-9, "x = {x}");
            x += 0.125;
        }
    }

    #[test]
    fn logit_of_predict_prob_recovers_logit() {
        let arch = ArchDescriptor::two_channel_default(9);
        let c = Classifier::init(arch, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let pair = rand_pair(&mut rng, 9);
            let f = c.logit(&pair).unwrap();
            let p = c.predict_prob(&pair).unwrap();
            assert!((logit(p) - f).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let arch = ArchDescriptor::reduced(9);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-3;
        let mut checked_params = 0usize;
        let mut skipped_params = 0usize;
        for point in 0..10u64 {
            let mut c = Classifier::init(arch.clone(), 100 + point).unwrap();
            // Move off the init manifold so biases are nonzero too.
            let mut p = c.params().to_vec();
            for v in &mut p {
                *v += rng.gen_range(-0.1..0.1);
            }
            c.set_params(&p).unwrap();

            let pair = rand_pair(&mut rng, 9);
            let z = (point % 2) as u8;
            let (_, grad) = c.loss_and_grad(&pair, z).unwrap();

            let mut max_rel = 0.0f64;
            let mut cp = c.clone();
            for i in 0..p.len() {
                let mut plus = p.clone();
                plus[i] += h;
                let mut minus = p.clone();
                minus[i] -= h;
                cp.set_params(&plus).unwrap();
                let pat_plus = cp.relu_pattern(&pair).unwrap();
                let f_plus = cp.logit(&pair).unwrap();
                cp.set_params(&minus).unwrap();
                let pat_minus = cp.relu_pattern(&pair).unwrap();
                let f_minus = cp.logit(&pair).unwrap();
                // Central differences are invalid across a ReLU kink.
                if pat_plus != pat_minus {
                    skipped_params += 1;
                    continue;
                }
                checked_params += 1;
                let ce = |f: f64| f.max(0.0) - f * z as f64 + (-f.abs()).exp().ln_1p();
                let fd = (ce(f_plus) - ce(f_minus)) / (2.0 * h);
                let denom = grad[i].abs().max(fd.abs()).max(1e-6);
                max_rel = max_rel.max((grad[i] - fd).abs() / denom);
            }
            assert!(max_rel < 1e-4, "point {point}: max rel err {max_rel}");
        }
        // The kink filter must not hollow out the check.
        assert!(
            checked_params > 9 * skipped_params,
            "checked {checked_params}, skipped {skipped_params}"
        );
    }

    /// Brightness-ordered toy set: z = 1 iff u is brighter than v.
    fn separable_toyset(n: usize, p: usize, seed: u64) -> Vec<LabeledPatchPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b) = loop {
                let a: f64 = rng.gen_range(0.0..1.0);
                let b: f64 = rng.gen_range(0.0..1.0);
                if (a - b).abs() > 0.05 {
                    break (a, b);
                }
            };
            let noise = |rng: &mut ChaCha8Rng, base: f64| -> Vec<f32> {
                (0..p * p)
                    .map(|_| (base + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0) as f32)
                    .collect()
            };
            let u = noise(&mut rng, a);
            let v = noise(&mut rng, b);
            out.push(LabeledPatchPair {
                pair: PatchPair { u, v, size: p },
                z: (a > b) as u8,
            });
        }
        out
    }

    /// Logistic regression on the single feature mean(u) - mean(v); shows
    /// the toy set is linearly separable to high accuracy.
    fn logistic_oracle_accuracy(ds: &[LabeledPatchPair]) -> f64 {
        let feat: Vec<f64> = ds
            .iter()
            .map(|d| {
                let mu: f64 = d.pair.u.iter().map(|&x| x as f64).sum::<f64>()
                    / d.pair.u.len() as f64;
                let mv: f64 = d.pair.v.iter().map(|&x| x as f64).sum::<f64>()
                    / d.pair.v.len() as f64;
                mu - mv
            })
            .collect();
        let (mut w, mut b) = (0.0f64, 0.0f64);
        for _ in 0..200 {
            let (mut gw, mut gb) = (0.0, 0.0);
            for (x, d) in feat.iter().zip(ds) {
                let e = sigmoid(w * x + b) - d.z as f64;
                gw += e * x;
                gb += e;
            }
            w -= 2.0 * gw / ds.len() as f64;
            b -= 2.0 * gb / ds.len() as f64;
        }
        let correct = feat
            .iter()
            .zip(ds)
            .filter(|(x, d)| ((w * **x + b) > 0.0) == (d.z == 1))
            .count();
        correct as f64 / ds.len() as f64
    }

    #[test]
    fn train_reaches_oracle_accuracy_on_separable_set() {
        let ds = separable_toyset(2000, 9, 21);
        assert!(logistic_oracle_accuracy(&ds) >= 0.98);

        let arch = ArchDescriptor::two_channel_default(9);
        let mut c = Classifier::init(arch, 22).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.02,
            batch_size: 64,
            weight_decay: 0.0005,
            epochs: 10,
            momentum: 0.0,
            seed: 23,
        };
        let trace = c.train(&ds, &cfg).unwrap();
        assert!(trace.iter().all(|l| l.is_finite()));
        assert!(*trace.last().unwrap() < trace[0]);
        let acc = c.accuracy(&ds).unwrap();
        assert!(acc >= 0.98, "training accuracy {acc}");
    }

    #[test]
    fn train_loss_trace_non_increasing_at_small_lr() {
        let ds = separable_toyset(1000, 9, 31);
        let arch = ArchDescriptor::two_channel_default(9);
        let mut c = Classifier::init(arch, 32).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 50,
            weight_decay: 0.0,
            epochs: 8,
            momentum: 0.0,
            seed: 33,
        };
        let trace = c.train(&ds, &cfg).unwrap();
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "trace not monotone: {trace:?}");
        }
    }

    #[test]
    fn train_on_label_independent_data_predicts_prior() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let ds: Vec<LabeledPatchPair> = (0..2000)
            .map(|_| LabeledPatchPair {
                pair: rand_pair(&mut rng, 9),
                z: rng.gen_bool(0.5) as u8,
            })
            .collect();
        let prior = ds.iter().filter(|d| d.z == 1).count() as f64 / ds.len() as f64;
        let arch = ArchDescriptor::two_channel_default(9);
        let mut c = Classifier::init(arch, 42).unwrap();
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            batch_size: 128,
            weight_decay: 0.001,
            epochs: 3,
            momentum: 0.0,
            seed: 43,
        };
        c.train(&ds, &cfg).unwrap();
        let mean_prob: f64 = ds
            .iter()
            .map(|d| c.predict_prob(&d.pair).unwrap())
            .sum::<f64>()
            / ds.len() as f64;
        assert!(
            (mean_prob - prior).abs() < 0.05,
            "mean prob {mean_prob}, prior {prior}"
        );
    }

    #[test]
    fn train_rejects_degenerate_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let ds: Vec<LabeledPatchPair> = (0..10)
            .map(|_| LabeledPatchPair {
                pair: rand_pair(&mut rng, 9),
                z: 1,
            })
            .collect();
        let arch = ArchDescriptor::two_channel_default(9);
        let mut c = Classifier::init(arch, 52).unwrap();
        assert!(matches!(
            c.train(&ds, &TrainConfig::default()),
            Err(Error::DegenerateLabels)
        ));
        assert!(matches!(
            c.train(&[], &TrainConfig::default()),
            Err(Error::DegenerateLabels)
        ));
    }

    fn smooth_image(seed: u64, n: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(n, n, 1.0, |_, _| rng.gen::<f64>())
            .gaussian_smooth(1.5)
            .normalize_intensity()
            .unwrap()
    }

    #[test]
    fn dmr_score_zero_net_and_bias_linearity() {
        let img = smooth_image(61, 64);
        let grid = crate::sampling::patch_grid(&img, 9, 4);
        let beta = TransformParams::identity_rigid(Point::new(32.0, 32.0));

        let arch = ArchDescriptor::two_channel_default(9);
        let mut zero = Classifier::init(arch.clone(), 0).unwrap();
        zero.set_params(&vec![0.0; zero.param_count()]).unwrap();
        let (s, n) = zero.dmr_score(&img, &img, &beta, &grid).unwrap();
        assert_eq!(s, 0.0);
        assert_eq!(n, grid.len());

        let c = Classifier::init(arch, 62).unwrap();
        let (s0, n0) = c.dmr_score(&img, &img, &beta, &grid).unwrap();
        let mut shifted = c.clone();
        let mut p = shifted.params().to_vec();
        let delta = -0.41;
        let last = p.len() - 1;
        p[last] += delta;
        shifted.set_params(&p).unwrap();
        let (s1, n1) = shifted.dmr_score(&img, &img, &beta, &grid).unwrap();
        assert_eq!(n0, n1);
        assert!((s1 - s0 - delta * n0 as f64).abs() < 1e-9);
    }

    #[test]
    fn dmr_score_matches_per_patch_loop_and_ignores_order() {
        let fixed = smooth_image(63, 64);
        let moving = smooth_image(64, 64);
        let beta = TransformParams::Rigid {
            tx: 2.0,
            ty: -1.0,
            theta: 0.05,
            center: [32.0, 32.0],
        };
        let arch = ArchDescriptor::two_channel_default(9);
        let c = Classifier::init(arch, 65).unwrap();
        let grid = crate::sampling::patch_grid(&fixed, 9, 4);
        let (s, n) = c.dmr_score(&fixed, &moving, &beta, &grid).unwrap();

        // Per-patch loop oracle.
        let mut oracle = 0.0;
        let mut count = 0;
        for &(cx, cy) in &grid {
            let u = extract_patch(&fixed, cx, cy, 9).unwrap();
            let q = beta.map_point(Point::new(
                fixed.pixel_to_phys(cx),
                fixed.pixel_to_phys(cy),
            ));
            if let Ok(v) = extract_patch(&moving, moving.phys_to_pixel(q.x), moving.phys_to_pixel(q.y), 9)
            {
                oracle += c.logit(&PatchPair { u, v, size: 9 }).unwrap();
                count += 1;
            }
        }
        assert_eq!(n, count);
        assert!((s - oracle).abs() < 1e-12);

        let mut reversed = grid.clone();
        reversed.reverse();
        let (s_rev, n_rev) = c.dmr_score(&fixed, &moving, &beta, &reversed).unwrap();
        assert_eq!(n, n_rev);
        assert!((s - s_rev).abs() < 1e-9);
    }

    #[test]
    fn dmr_score_no_overlap_errors() {
        let img = smooth_image(66, 32);
        let arch = ArchDescriptor::two_channel_default(9);
        let c = Classifier::init(arch, 67).unwrap();
        let grid = crate::sampling::patch_grid(&img, 9, 4);
        let beta = TransformParams::translation(500.0, 0.0, Point::new(16.0, 16.0));
        assert!(matches!(
            c.dmr_score(&img, &img, &beta, &grid),
            Err(Error::NoOverlap { .. })
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let dir = std::env::temp_dir().join(format!("ditr_clf_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");

        let arch = ArchDescriptor::two_channel_default(9);
        let mut c = Classifier::init(arch, 71).unwrap();
        // Make parameters non-trivial.
        let ds = separable_toyset(200, 9, 72);
        c.train(
            &ds,
            &TrainConfig {
                epochs: 1,
                ..Default::default()
            },
        )
        .unwrap();

        c.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        let loaded = Classifier::load(&path).unwrap();
        assert_eq!(loaded.arch(), c.arch());
        loaded.save(&path).unwrap();
        let second = std::fs::read(&path).unwrap();
        assert_eq!(first, second);

        // Reloaded logits agree to f32 precision.
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let pair = rand_pair(&mut rng, 9);
        let a = c.logit(&pair).unwrap();
        let b = loaded.logit(&pair).unwrap();
        assert!((a - b).abs() < 1e-4);

        std::fs::remove_dir_all(&dir).ok();
    }
}
