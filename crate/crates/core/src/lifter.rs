//! 3D stage: a residual dense network lifting 2D keypoints (plus per-keypoint
//! depth) to root-relative 3D, trained from scratch with Adam.
//!
//! Layout: dense → BN → ReLU → dropout, then `blocks` residual blocks of two
//! such layers with an additive skip, then a dense output of 17×3.

use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{backproject, CameraId, CameraRig, Vec2, Vec3};
use crate::preprocess::{CoordScale, DEFAULT_DEPTH_MAX, MODEL_HEIGHT, MODEL_WIDTH};
use crate::skeleton::{split_concat_coords, Skeleton2D, Skeleton3D, SkeletonError, Topology, NUM_KEYPOINTS};

pub const OUTPUT_WIDTH: usize = NUM_KEYPOINTS * 3;
pub const MODEL_MAGIC: [u8; 4] = *b"WPLM";
pub const MODEL_VERSION: u32 = 1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum LifterError {
    #[error("input width {got} does not match model input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    DivergedTraining { epoch: usize, step: u64 },
    #[error("no keypoint has a valid depth reading")]
    AllDepthDead,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("subject {0} appears in both training and validation data")]
    OverlappingSplits(u32),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    BadModelFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
}

/// Which quantity the network sees and predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Normalized (u, v) plus normalized depth per keypoint.
    Default,
    /// Normalized (u, v) only.
    Baseline,
    /// Backprojected root-relative points in; correction to them out.
    ProjectionResidual,
}

impl Variant {
    pub fn input_width(self) -> usize {
        match self {
            Variant::Baseline => NUM_KEYPOINTS * 2,
            Variant::Default | Variant::ProjectionResidual => NUM_KEYPOINTS * 3,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Default => 0,
            Variant::Baseline => 1,
            Variant::ProjectionResidual => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Variant::Default),
            1 => Some(Variant::Baseline),
            2 => Some(Variant::ProjectionResidual),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::Baseline => "baseline",
            Variant::ProjectionResidual => "projection-residual",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "default" => Ok(Variant::Default),
            "baseline" => Ok(Variant::Baseline),
            "projection-residual" => Ok(Variant::ProjectionResidual),
            other => Err(format!(
                "unknown variant {other:?} (default|baseline|projection-residual)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Inference,
}

/// `(u − W/2)/W`, `(v − H/2)/W`: centered and divided by the width on both
/// axes so the aspect ratio survives.
pub fn normalize_2d(skel: &Skeleton2D, frame_w: f64, frame_h: f64) -> [Vec2; NUM_KEYPOINTS] {
    skel.coords
        .map(|p| Vec2::new((p.x - frame_w / 2.0) / frame_w, (p.y - frame_h / 2.0) / frame_w))
}

#[inline]
pub fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// Mean log-cosh over matching value arrays.
pub fn log_cosh_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    pred.iter().zip(target).map(|(p, t)| log_cosh(p - t)).sum::<f64>() / pred.len() as f64
}

/// Batch log-cosh loss and its gradient with respect to `pred`.
pub fn log_cosh_with_grad(pred: &Array2<f64>, target: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let n = pred.len() as f64;
    let diff = pred - &target;
    let loss = diff.iter().map(|&d| log_cosh(d)).sum::<f64>() / n;
    let grad = diff.mapv(|d| d.tanh() / n);
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
        }
    }
}

/// Dense layer, `weights` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub norm: Option<BatchNorm>,
}

impl Layer {
    fn init(input: usize, output: usize, norm: bool, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((input, output), || rng.random_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(output, || rng.random_range(-bound..bound));
        Self {
            weights,
            bias,
            norm: norm.then(|| BatchNorm::new(output)),
        }
    }

    pub fn input_width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_width(&self) -> usize {
        self.weights.ncols()
    }

    fn affine(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weights) + &self.bias
    }

    fn forward_inference(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut z = self.affine(x);
        if let Some(bn) = &self.norm {
            let scale = Zip::from(&bn.gamma)
                .and(&bn.running_var)
                .map_collect(|g, v| g / (v + BN_EPS).sqrt());
            let shift = &bn.beta - &(&bn.running_mean * &scale);
            z = z * &scale + &shift;
            z.mapv_inplace(|v| v.max(0.0));
        }
        z
    }
}

struct HiddenCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    /// BN output before the rectifier.
    normed: Array2<f64>,
    mask: Option<Array2<f64>>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

/// Intermediate values of one training-mode forward pass.
pub struct TrainCache {
    hidden: Vec<HiddenCache>,
    last_input: Array2<f64>,
}

/// Gradients shaped like [`Layer`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Option<Array1<f64>>,
    pub beta: Option<Array1<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrad>,
}

impl Gradients {
    /// Flat views in the canonical parameter order (weights, bias, gamma, beta per layer).
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.push(g.weights.as_slice().expect("standard layout"));
            out.push(g.bias.as_slice().expect("standard layout"));
            if let (Some(gm), Some(bt)) = (&g.gamma, &g.beta) {
                out.push(gm.as_slice().expect("standard layout"));
                out.push(bt.as_slice().expect("standard layout"));
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for g in &mut self.layers {
            out.push(g.weights.as_slice_mut().expect("standard layout"));
            out.push(g.bias.as_slice_mut().expect("standard layout"));
            if let (Some(gm), Some(bt)) = (&mut g.gamma, &mut g.beta) {
                out.push(gm.as_slice_mut().expect("standard layout"));
                out.push(bt.as_slice_mut().expect("standard layout"));
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Elementwise value clip to `[-limit, limit]`.
pub fn clip_gradients(grads: &mut Gradients, limit: f64) {
    for s in grads.slices_mut() {
        for v in s.iter_mut() {
            *v = v.clamp(-limit, limit);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifterModel {
    pub variant: Variant,
    pub layers: Vec<Layer>,
    pub mode: Mode,
}

impl LifterModel {
    pub fn new(variant: Variant, hidden: usize, blocks: usize, seed: u64) -> Self {
        Self::with_input_width(variant, variant.input_width(), hidden, blocks, seed)
    }

    pub fn with_input_width(variant: Variant, input: usize, hidden: usize, blocks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = vec![Layer::init(input, hidden, true, &mut rng)];
        for _ in 0..2 * blocks {
            layers.push(Layer::init(hidden, hidden, true, &mut rng));
        }
        layers.push(Layer::init(hidden, OUTPUT_WIDTH, false, &mut rng));
        Self {
            variant,
            layers,
            mode: Mode::Inference,
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn hidden_width(&self) -> usize {
        self.layers[0].output_width()
    }

    pub fn blocks(&self) -> usize {
        (self.layers.len() - 2) / 2
    }

    /// Trainable parameters (weights, biases, BN scale and shift).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len() + l.norm.as_ref().map_or(0, |n| n.gamma.len() + n.beta.len()))
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.push(l.weights.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            if let Some(n) = &l.norm {
                out.push(n.gamma.as_slice().expect("standard layout"));
                out.push(n.beta.as_slice().expect("standard layout"));
            }
        }
        out
    }

    /// Mutable parameter views paired with whether weight decay applies.
    pub fn param_slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            out.push((l.weights.as_slice_mut().expect("standard layout"), true));
            out.push((l.bias.as_slice_mut().expect("standard layout"), false));
            if let Some(n) = &mut l.norm {
                out.push((n.gamma.as_slice_mut().expect("standard layout"), false));
                out.push((n.beta.as_slice_mut().expect("standard layout"), false));
            }
        }
        out
    }

    fn check_width(&self, got: usize) -> Result<(), LifterError> {
        if got != self.input_width() {
            return Err(LifterError::WidthMismatch {
                expected: self.input_width(),
                got,
            });
        }
        Ok(())
    }

    /// Inference-mode forward of one sample.
    pub fn forward(&self, input: &[f64]) -> Result<[f64; OUTPUT_WIDTH], LifterError> {
        self.check_width(input.len())?;
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let y = self.forward_batch(x)?;
        let mut out = [0.0; OUTPUT_WIDTH];
        out.copy_from_slice(y.as_slice().expect("standard layout"));
        Ok(out)
    }

    /// Inference-mode forward of a batch (rows are samples).
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, LifterError> {
        self.check_width(x.ncols())?;
        let n = self.layers.len();
        let mut h = self.layers[0].forward_inference(x);
        for b in 0..self.blocks() {
            let t = self.layers[1 + 2 * b].forward_inference(h.view());
            let t = self.layers[2 + 2 * b].forward_inference(t.view());
            h += &t;
        }
        Ok(self.layers[n - 1].affine(h.view()))
    }

    /// Training-mode forward: batch statistics and (if `dropout > 0`) inverted
    /// dropout masks drawn from `rng`.
    pub fn forward_train(&self, x: ArrayView2<f64>, dropout: f64, rng: &mut ChaCha8Rng) -> (Array2<f64>, TrainCache) {
        let n = self.layers.len();
        let mut hidden = Vec::with_capacity(n - 1);
        let mut h = hidden_forward(&self.layers[0], x, dropout, rng, &mut hidden);
        for b in 0..self.blocks() {
            let t = hidden_forward(&self.layers[1 + 2 * b], h.view(), dropout, rng, &mut hidden);
            let t = hidden_forward(&self.layers[2 + 2 * b], t.view(), dropout, rng, &mut hidden);
            h += &t;
        }
        let y = self.layers[n - 1].affine(h.view());
        (y, TrainCache { hidden, last_input: h })
    }

    /// Gradients of the loss whose gradient w.r.t. the output is `dy`.
    pub fn backward(&self, cache: &TrainCache, dy: &Array2<f64>) -> Gradients {
        let n = self.layers.len();
        let out_layer = &self.layers[n - 1];
        let mut grads: Vec<Option<LayerGrad>> = vec![None; n];
        grads[n - 1] = Some(LayerGrad {
            weights: cache.last_input.t().dot(dy),
            bias: dy.sum_axis(Axis(0)),
            gamma: None,
            beta: None,
        });
        let mut dh = dy.dot(&out_layer.weights.t());
        for b in (0..self.blocks()).rev() {
            let (i1, i2) = (1 + 2 * b, 2 + 2 * b);
            let (dt, g2) = hidden_backward(&self.layers[i2], &cache.hidden[i2], &dh);
            let (dt, g1) = hidden_backward(&self.layers[i1], &cache.hidden[i1], &dt);
            grads[i2] = Some(g2);
            grads[i1] = Some(g1);
            dh += &dt;
        }
        let (_, g0) = hidden_backward(&self.layers[0], &cache.hidden[0], &dh);
        grads[0] = Some(g0);
        Gradients {
            layers: grads.into_iter().map(|g| g.expect("every layer visited")).collect(),
        }
    }

    /// Folds the batch statistics of a training step into the running ones.
    pub fn update_running_stats(&mut self, cache: &TrainCache, momentum: f64) {
        for (layer, hc) in self.layers.iter_mut().zip(&cache.hidden) {
            let bn = layer.norm.as_mut().expect("hidden layers are normalized");
            let n = hc.input.nrows() as f64;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            Zip::from(&mut bn.running_mean)
                .and(&hc.batch_mean)
                .for_each(|r, &m| *r = (1.0 - momentum) * *r + momentum * m);
            Zip::from(&mut bn.running_var)
                .and(&hc.batch_var)
                .for_each(|r, &v| *r = (1.0 - momentum) * *r + momentum * v * unbiased);
        }
    }

    /// Rewrites the first layer so raw inputs give the same pre-activations
    /// that `(x − mean) / std` gave before.
    pub fn fold_input_scaling(&mut self, mean: &Array1<f64>, std: &Array1<f64>) {
        let first = &mut self.layers[0];
        for (mut row, s) in first.weights.outer_iter_mut().zip(std) {
            row /= *s;
        }
        first.bias -= &mean.dot(&first.weights);
    }

    /// `½·λ·Σw²` over dense weights only.
    pub fn l2_penalty(&self, weight_decay: f64) -> f64 {
        0.5 * weight_decay
            * self
                .layers
                .iter()
                .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
                .sum::<f64>()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), LifterError> {
        w.write_all(&MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&[self.variant.tag()])?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        let put = |w: &mut W, values: &[f64]| -> std::io::Result<()> {
            let mut buf = Vec::with_capacity(values.len() * 8);
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)
        };
        for l in &self.layers {
            w.write_all(&(l.input_width() as u32).to_le_bytes())?;
            w.write_all(&(l.output_width() as u32).to_le_bytes())?;
            w.write_all(&[l.norm.is_some() as u8])?;
            put(&mut w, l.weights.as_slice().expect("standard layout"))?;
            put(&mut w, l.bias.as_slice().expect("standard layout"))?;
            if let Some(n) = &l.norm {
                for a in [&n.gamma, &n.beta, &n.running_mean, &n.running_var] {
                    put(&mut w, a.as_slice().expect("standard layout"))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, LifterError> {
        let bad = |m: &str| LifterError::BadModelFile(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != MODEL_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(&mut r)?;
        if version != MODEL_VERSION {
            return Err(LifterError::BadModelFile(format!("unsupported version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let variant = Variant::from_tag(tag[0]).ok_or_else(|| bad("unknown variant tag"))?;
        let count = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&count) || count % 2 != 0 {
            return Err(LifterError::BadModelFile(format!("implausible layer count {count}")));
        }
        let mut layers = Vec::with_capacity(count);
        for i in 0..count {
            let input = read_u32(&mut r)? as usize;
            let output = read_u32(&mut r)? as usize;
            if input == 0 || output == 0 || input > 1 << 16 || output > 1 << 16 {
                return Err(LifterError::BadModelFile(format!(
                    "layer {i}: bad dims {input}x{output}"
                )));
            }
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let weights = Array2::from_shape_vec((input, output), read_f64s(&mut r, input * output)?)
                .map_err(|e| LifterError::BadModelFile(e.to_string()))?;
            let bias = Array1::from(read_f64s(&mut r, output)?);
            let norm = match flag[0] {
                0 => None,
                1 => Some(BatchNorm {
                    gamma: Array1::from(read_f64s(&mut r, output)?),
                    beta: Array1::from(read_f64s(&mut r, output)?),
                    running_mean: Array1::from(read_f64s(&mut r, output)?),
                    running_var: Array1::from(read_f64s(&mut r, output)?),
                }),
                _ => return Err(bad("bad norm flag")),
            };
            layers.push(Layer { weights, bias, norm });
        }
        let model = Self {
            variant,
            layers,
            mode: Mode::Inference,
        };
        model.check_structure()?;
        Ok(model)
    }

    fn check_structure(&self) -> Result<(), LifterError> {
        let n = self.layers.len();
        let hidden = self.hidden_width();
        for (i, l) in self.layers.iter().enumerate() {
            let last = i == n - 1;
            let expect_in = if i == 0 { self.input_width() } else { hidden };
            let expect_out = if last { OUTPUT_WIDTH } else { hidden };
            if l.input_width() != expect_in || l.output_width() != expect_out || l.norm.is_some() == last {
                return Err(LifterError::BadModelFile(format!(
                    "layer {i} does not fit the architecture"
                )));
            }
        }
        if self.input_width() != self.variant.input_width() {
            return Err(LifterError::BadModelFile(format!(
                "variant {} expects input width {}, file has {}",
                self.variant,
                self.variant.input_width(),
                self.input_width()
            )));
        }
        if !self.is_finite() {
            return Err(LifterError::BadModelFile("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), LifterError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, LifterError> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, LifterError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>, LifterError> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

fn hidden_forward(
    layer: &Layer,
    x: ArrayView2<f64>,
    dropout: f64,
    rng: &mut ChaCha8Rng,
    caches: &mut Vec<HiddenCache>,
) -> Array2<f64> {
    let bn = layer.norm.as_ref().expect("hidden layers are normalized");
    let z = layer.affine(x);
    let n = z.nrows() as f64;
    let batch_mean = z.sum_axis(Axis(0)) / n;
    let centered = &z - &batch_mean;
    let batch_var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
    let inv_std = batch_var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
    let xhat = centered * &inv_std;
    let normed = &xhat * &bn.gamma + &bn.beta;
    let mut a = normed.mapv(|v| v.max(0.0));
    let mask = (dropout > 0.0).then(|| {
        let keep = 1.0 - dropout;
        let m = Array2::from_shape_simple_fn(
            a.raw_dim(),
            || if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 },
        );
        a *= &m;
        m
    });
    caches.push(HiddenCache {
        input: x.to_owned(),
        xhat,
        inv_std,
        normed,
        mask,
        batch_mean,
        batch_var,
    });
    a
}

fn hidden_backward(layer: &Layer, c: &HiddenCache, dout: &Array2<f64>) -> (Array2<f64>, LayerGrad) {
    let bn = layer.norm.as_ref().expect("hidden layers are normalized");
    let mut dy = match &c.mask {
        Some(m) => dout * m,
        None => dout.clone(),
    };
    Zip::from(&mut dy).and(&c.normed).for_each(|d, &y| {
        if y <= 0.0 {
            *d = 0.0;
        }
    });
    let dgamma = (&dy * &c.xhat).sum_axis(Axis(0));
    let dbeta = dy.sum_axis(Axis(0));
    let dxhat = dy * &bn.gamma;
    let n = dxhat.nrows() as f64;
    let sum_dxhat = dxhat.sum_axis(Axis(0));
    let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
    let dz = (dxhat * n - &sum_dxhat - &c.xhat * &sum_dxhat_xhat) * &(&c.inv_std / n);
    let grad = LayerGrad {
        weights: c.input.t().dot(&dz),
        bias: dz.sum_axis(Axis(0)),
        gamma: Some(dgamma),
        beta: Some(dbeta),
    };
    (dz.dot(&layer.weights.t()), grad)
}

/// Every knob of the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub dropout: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    pub hidden_width: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 2e-3,
            lr_final: 1e-5,
            epochs: 30,
            batch_size: 32,
            grad_clip: 0.2,
            dropout: 0.5,
            weight_decay: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.1,
            hidden_width: 256,
            blocks: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LifterError> {
        let err = |m: String| Err(LifterError::InvalidConfig(m));
        if !(self.lr_final < self.lr_init && self.lr_final >= 0.0) {
            return err(format!(
                "need 0 <= lr_final ({}) < lr_init ({})",
                self.lr_final, self.lr_init
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.hidden_width == 0 {
            return err("batch_size, epochs and hidden_width must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if !(self.grad_clip > 0.0) || self.weight_decay < 0.0 {
            return err("grad_clip must be > 0 and weight_decay >= 0".into());
        }
        Ok(())
    }

    /// Cosine-annealed rate at fractional epoch `t`.
    pub fn lr_at(&self, t: f64) -> f64 {
        let w = 0.5 * (1.0 + (PI * t / self.epochs as f64).cos());
        self.lr_init * w + self.lr_final * (1.0 - w)
    }
}

/// Adam optimizer with per-step cosine annealing and gradient clipping.
pub struct Trainer {
    pub model: LifterModel,
    pub cfg: TrainConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: u64,
    steps_per_epoch: usize,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub lr: f64,
    /// Largest |gradient| after clipping.
    pub max_abs_grad: f64,
}

impl Trainer {
    pub fn new(mut model: LifterModel, cfg: TrainConfig, steps_per_epoch: usize) -> Self {
        model.mode = Mode::Train;
        let shapes: Vec<usize> = model.param_slices().iter().map(|s| s.len()).collect();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
        Self {
            model,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            cfg,
            steps: 0,
            steps_per_epoch: steps_per_epoch.max(1),
            rng,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.lr_at(self.steps as f64 / self.steps_per_epoch as f64)
    }

    /// Loss (data term plus L2) and clipped gradients for one batch, without
    /// touching the model.
    pub fn loss_and_grads(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> (f64, Gradients, TrainCache) {
        let (pred, cache) = self.model.forward_train(x, self.cfg.dropout, &mut self.rng);
        let (data_loss, dy) = log_cosh_with_grad(&pred, y);
        let mut grads = self.model.backward(&cache, &dy);
        for (g, l) in grads.layers.iter_mut().zip(&self.model.layers) {
            g.weights.scaled_add(self.cfg.weight_decay, &l.weights);
        }
        (data_loss, grads, cache)
    }

    pub fn step(&mut self, x: ArrayView2<f64>, y: ArrayView2<f64>) -> StepStats {
        let lr = self.current_lr();
        let (loss, mut grads, cache) = self.loss_and_grads(x, y);
        clip_gradients(&mut grads, self.cfg.grad_clip);
        let max_abs_grad = grads.max_abs();
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2, eps) = (self.cfg.adam_beta1, self.cfg.adam_beta2, self.cfg.adam_eps);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let params = self.model.param_slices_mut();
        for (((p, _), g), (m, v)) in params
            .into_iter()
            .zip(grads.slices())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        self.model.update_running_stats(&cache, self.cfg.bn_momentum);
        StepStats { loss, lr, max_abs_grad }
    }
}

/// One training example: network input, 17×3 target, subject id.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftSample {
    pub input: Vec<f64>,
    pub target: [f64; OUTPUT_WIDTH],
    pub subject: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mpjpe_mm: f64,
    pub lr_end: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: LifterModel,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn stack_inputs(samples: &[LiftSample]) -> (Array2<f64>, Array2<f64>) {
    let w = samples[0].input.len();
    let mut x = Array2::zeros((samples.len(), w));
    let mut y = Array2::zeros((samples.len(), OUTPUT_WIDTH));
    for (i, s) in samples.iter().enumerate() {
        x.row_mut(i).assign(&ndarray::ArrayView1::from(&s.input[..]));
        y.row_mut(i).assign(&ndarray::ArrayView1::from(&s.target[..]));
    }
    (x, y)
}

/// Root-aligned mean per-joint error in mm between flattened predictions and targets.
pub fn flat_mpjpe_mm(pred: &Array2<f64>, target: &Array2<f64>, root: usize) -> f64 {
    let mut total = 0.0;
    for (p, t) in pred.outer_iter().zip(target.outer_iter()) {
        let off = [
            p[3 * root] - t[3 * root],
            p[3 * root + 1] - t[3 * root + 1],
            p[3 * root + 2] - t[3 * root + 2],
        ];
        for k in 0..NUM_KEYPOINTS {
            let d: f64 = (0..3).map(|a| (p[3 * k + a] - t[3 * k + a] - off[a]).powi(2)).sum();
            total += d.sqrt();
        }
    }
    1000.0 * total / (pred.nrows() * NUM_KEYPOINTS) as f64
}

/// Trains a fresh model and returns the epoch with the best validation MPJPE.
pub fn train(
    train_set: &[LiftSample],
    val_set: &[LiftSample],
    variant: Variant,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, LifterError> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(LifterError::EmptyDataset);
    }
    let train_subjects: std::collections::BTreeSet<u32> = train_set.iter().map(|s| s.subject).collect();
    if let Some(s) = val_set.iter().find(|s| train_subjects.contains(&s.subject)) {
        return Err(LifterError::OverlappingSplits(s.subject));
    }
    for s in train_set.iter().chain(val_set) {
        if s.input.len() != variant.input_width() {
            return Err(LifterError::WidthMismatch {
                expected: variant.input_width(),
                got: s.input.len(),
            });
        }
    }
    let (mut x, y) = stack_inputs(train_set);
    let (vx, vy) = stack_inputs(val_set);
    // Training runs on standardized inputs; the scaling is folded into the
    // first layer of every returned model.
    let in_mean = x.mean_axis(Axis(0)).expect("non-empty");
    let in_std = x.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-8 { s } else { 1.0 });
    x -= &in_mean;
    x /= &in_std;
    let root = Topology::walker17().root_index;

    let n = train_set.len();
    let bs = cfg.batch_size.min(n);
    // A trailing batch of one has no batch statistics; it is skipped.
    let batches_per_epoch = if n % bs == 1 && bs > 1 { n / bs } else { n.div_ceil(bs) };
    let model = LifterModel::new(variant, cfg.hidden_width, cfg.blocks, cfg.seed);
    let mut trainer = Trainer::new(model, cfg.clone(), batches_per_epoch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, LifterModel)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(trainer.rng());
        let mut loss_sum = 0.0;
        let mut max_grad: f64 = 0.0;
        for b in 0..batches_per_epoch {
            let idx = &order[b * bs..((b + 1) * bs).min(n)];
            let bx = x.select(Axis(0), idx);
            let by = y.select(Axis(0), idx);
            let stats = trainer.step(bx.view(), by.view());
            if !stats.loss.is_finite() {
                return Err(LifterError::DivergedTraining {
                    epoch,
                    step: trainer.steps(),
                });
            }
            loss_sum += stats.loss;
            max_grad = max_grad.max(stats.max_abs_grad);
        }
        let mut snapshot = trainer.model.clone();
        snapshot.mode = Mode::Inference;
        snapshot.fold_input_scaling(&in_mean, &in_std);
        let val_pred = snapshot.forward_batch(vx.view())?;
        let val_mpjpe = flat_mpjpe_mm(&val_pred, &vy, root);
        if !val_mpjpe.is_finite() {
            return Err(LifterError::DivergedTraining {
                epoch,
                step: trainer.steps(),
            });
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss: loss_sum / batches_per_epoch as f64,
            val_mpjpe_mm: val_mpjpe,
            lr_end: trainer.current_lr(),
            max_abs_grad: max_grad,
        };
        log::debug!(
            "epoch {} loss {:.6} val {:.3} mm",
            entry.epoch,
            entry.train_loss,
            entry.val_mpjpe_mm
        );
        log.push(entry);
        if best.as_ref().is_none_or(|(m, _, _)| val_mpjpe < *m) {
            best = Some((val_mpjpe, epoch + 1, snapshot));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(TrainOutcome { model, log, best_epoch })
}

/// Where the absolute root of a prediction came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RootSource {
    /// Backprojected pelvis.
    Pelvis,
    /// Mean over other keypoints with live depth.
    Keypoints,
    /// Carried over from an earlier frame.
    Previous,
    /// Nothing available; the skeleton stays root-relative.
    Unknown,
}

/// Everything needed to turn a model-resolution [`Skeleton2D`] into network
/// input and back into posture-frame 3D.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftContext {
    pub rig: CameraRig,
    pub topo: Topology,
    pub frame_w: usize,
    pub frame_h: usize,
    pub depth_max: f64,
}

impl LiftContext {
    pub fn new(rig: CameraRig) -> Self {
        Self {
            rig,
            topo: Topology::walker17(),
            frame_w: MODEL_WIDTH,
            frame_h: MODEL_HEIGHT,
            depth_max: DEFAULT_DEPTH_MAX,
        }
    }

    fn scale(&self) -> CoordScale {
        let (w, h) = (self.rig.posture.width as usize, self.rig.posture.height as usize);
        CoordScale::new((w, 2 * h), (self.frame_w, self.frame_h))
    }

    /// Model-resolution 2D skeleton to native pixels of each keypoint's camera.
    pub fn to_native(&self, skel: &Skeleton2D) -> Result<[(CameraId, Vec2); NUM_KEYPOINTS], LifterError> {
        let scale = self.scale();
        let mut native = *skel;
        native.coords = skel.coords.map(|p| scale.inverse(&p));
        Ok(split_concat_coords(
            &native,
            &self.topo,
            self.rig.posture.height as f64,
        )?)
    }

    /// Posture-frame backprojection of every keypoint with live depth.
    pub fn backproject_live(&self, skel: &Skeleton2D) -> Result<[Option<Vec3>; NUM_KEYPOINTS], LifterError> {
        let native = self.to_native(skel)?;
        let mut out = [None; NUM_KEYPOINTS];
        for (k, (cam, px)) in native.iter().enumerate() {
            let intr = self.rig.camera(*cam);
            if let Ok(p) = backproject(px, skel.depth_at_kp[k], intr) {
                out[k] = Some(self.rig.to_posture(*cam, &p));
            }
        }
        Ok(out)
    }

    /// Backprojection with dead keypoints replaced by the mean of the nearest
    /// live keypoints in the topology graph.
    pub fn backproject_skeleton(&self, skel: &Skeleton2D) -> Result<Skeleton3D, LifterError> {
        let live = self.backproject_live(skel)?;
        if live.iter().all(Option::is_none) {
            return Err(LifterError::AllDepthDead);
        }
        let mut coords = [Vec3::zeros(); NUM_KEYPOINTS];
        for k in 0..NUM_KEYPOINTS {
            coords[k] = match live[k] {
                Some(p) => p,
                None => {
                    let hops = self.topo.hop_distances(k);
                    let nearest = (0..NUM_KEYPOINTS)
                        .filter(|&j| live[j].is_some())
                        .filter_map(|j| hops[j])
                        .min()
                        .expect("tree is connected and a live keypoint exists");
                    let ring: Vec<Vec3> = (0..NUM_KEYPOINTS)
                        .filter(|&j| hops[j] == Some(nearest))
                        .filter_map(|j| live[j])
                        .collect();
                    ring.iter().sum::<Vec3>() / ring.len() as f64
                }
            };
        }
        Ok(Skeleton3D::new(coords, skel.timestamp))
    }

    /// Network input for `variant`.
    pub fn input(&self, variant: Variant, skel: &Skeleton2D) -> Result<Vec<f64>, LifterError> {
        match variant {
            Variant::Default | Variant::Baseline => {
                let uv = normalize_2d(skel, self.frame_w as f64, self.frame_h as f64);
                let with_depth = variant == Variant::Default;
                let mut out = Vec::with_capacity(variant.input_width());
                for k in 0..NUM_KEYPOINTS {
                    out.push(uv[k].x);
                    out.push(uv[k].y);
                    if with_depth {
                        let d = skel.depth_at_kp[k];
                        out.push(if d.is_finite() && d > 0.0 {
                            (d / self.depth_max).min(1.0)
                        } else {
                            0.0
                        });
                    }
                }
                Ok(out)
            }
            Variant::ProjectionResidual => {
                let bp = self.backproject_skeleton(skel)?;
                let root = bp.coords[self.topo.root_index];
                Ok(bp
                    .coords
                    .iter()
                    .flat_map(|c| (c - root).iter().copied().collect::<Vec<_>>())
                    .collect())
            }
        }
    }

    /// Training pair: ground truth is in the posture frame.
    pub fn sample(
        &self,
        variant: Variant,
        skel: &Skeleton2D,
        gt: &Skeleton3D,
        subject: u32,
    ) -> Result<LiftSample, LifterError> {
        let input = self.input(variant, skel)?;
        let root = gt.coords[self.topo.root_index];
        let mut target = [0.0; OUTPUT_WIDTH];
        for k in 0..NUM_KEYPOINTS {
            for a in 0..3 {
                target[3 * k + a] = gt.coords[k][a] - root[a];
            }
        }
        if variant == Variant::ProjectionResidual {
            for (t, x) in target.iter_mut().zip(&input) {
                *t -= x;
            }
        }
        Ok(LiftSample { input, target, subject })
    }

    /// Root-relative prediction.
    pub fn predict_root_relative(&self, model: &LifterModel, skel: &Skeleton2D) -> Result<Skeleton3D, LifterError> {
        let input = self.input(model.variant, skel)?;
        let mut out = model.forward(&input)?;
        if model.variant == Variant::ProjectionResidual {
            for (o, x) in out.iter_mut().zip(&input) {
                *o += x;
            }
        }
        Ok(Skeleton3D::from_flat(&out, skel.timestamp))
    }

    /// Absolute root for a root-relative prediction from live depth, if any.
    pub fn estimate_root(&self, rr: &Skeleton3D, skel: &Skeleton2D) -> Result<Option<(Vec3, RootSource)>, LifterError> {
        let live = self.backproject_live(skel)?;
        let r = self.topo.root_index;
        if let Some(p) = live[r] {
            return Ok(Some((p - rr.coords[r], RootSource::Pelvis)));
        }
        let est: Vec<Vec3> = (0..NUM_KEYPOINTS)
            .filter_map(|k| live[k].map(|p| p - rr.coords[k]))
            .collect();
        if est.is_empty() {
            return Ok(None);
        }
        Ok(Some((
            est.iter().sum::<Vec3>() / est.len() as f64,
            RootSource::Keypoints,
        )))
    }

    /// Posture-frame absolute prediction. `previous_root` is used when no
    /// keypoint has live depth.
    pub fn predict_absolute(
        &self,
        model: &LifterModel,
        skel: &Skeleton2D,
        previous_root: Option<Vec3>,
    ) -> Result<(Skeleton3D, Vec3, RootSource), LifterError> {
        if model.variant == Variant::ProjectionResidual {
            let bp = self.backproject_skeleton(skel)?;
            let rr = self.predict_root_relative(model, skel)?;
            let root = bp.coords[self.topo.root_index];
            return Ok((rr.translated(&root), root, RootSource::Pelvis));
        }
        let rr = self.predict_root_relative(model, skel)?;
        let (root, source) = match self.estimate_root(&rr, skel)? {
            Some(found) => found,
            None => match previous_root {
                Some(p) => (p, RootSource::Previous),
                None => (Vec3::zeros(), RootSource::Unknown),
            },
        };
        Ok((rr.translated(&root), root, source))
    }
}

/// Explicit backprojection refined by a residual network.
pub fn projection_residual_forward(
    skel: &Skeleton2D,
    ctx: &LiftContext,
    residual_model: &LifterModel,
) -> Result<Skeleton3D, LifterError> {
    if residual_model.variant != Variant::ProjectionResidual {
        return Err(LifterError::WidthMismatch {
            expected: Variant::ProjectionResidual.input_width(),
            got: residual_model.input_width(),
        });
    }
    Ok(ctx.predict_absolute(residual_model, skel, None)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{project, CameraIntrinsics, RigidTransform};
    use crate::preprocess::coord_rescale;
    use crate::skeleton::stack_concat_coords;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn normalize_examples() {
        let mut s = Skeleton2D::zeros();
        s.coords[0] = Vec2::new(64.0, 112.0);
        s.coords[1] = Vec2::new(0.0, 0.0);
        s.coords[2] = Vec2::new(100.0, 50.0);
        let n = normalize_2d(&s, 128.0, 224.0);
        assert_eq!(n[0], Vec2::new(0.0, 0.0));
        assert_eq!(n[1], Vec2::new(-0.5, -0.875));
        let mut m = s;
        for c in m.coords.iter_mut() {
            c.x = 128.0 - c.x;
        }
        let nm = normalize_2d(&m, 128.0, 224.0);
        for k in 0..3 {
            assert_eq!(nm[k].x, -n[k].x);
            assert_eq!(nm[k].y, n[k].y);
        }
    }

    #[test]
    fn log_cosh_examples() {
        let zero = [0.0; OUTPUT_WIDTH];
        assert_eq!(log_cosh_loss(&zero, &zero), 0.0);
        let mut one = zero;
        one[7] = 1.0;
        let v = log_cosh_loss(&one, &zero);
        assert!((v - 1f64.cosh().ln() / 51.0).abs() < 1e-15);
        assert!((v - 8.506e-3).abs() < 1e-6);
        let mut big = zero;
        big[0] = 50.0;
        let v = log_cosh_loss(&big, &zero);
        assert!(v.is_finite());
        assert!((v - (50.0 - LN_2) / 51.0).abs() < 1e-12);
        assert!(log_cosh(1e6).is_finite());
    }

    #[test]
    fn zero_weights_return_output_bias() {
        let mut m = LifterModel::new(Variant::Default, 16, 2, 1);
        for l in m.layers.iter_mut() {
            l.weights.fill(0.0);
        }
        let n = m.layers.len();
        let bias: Vec<f64> = (0..OUTPUT_WIDTH).map(|i| i as f64 * 0.1 - 2.0).collect();
        m.layers[n - 1].bias = Array1::from(bias.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let x: Vec<f64> = (0..51).map(|_| rng.random_range(-1.0..1.0)).collect();
            assert_eq!(m.forward(&x).unwrap().to_vec(), bias);
        }
    }

    #[test]
    fn forward_is_deterministic_and_checks_width() {
        let m = LifterModel::new(Variant::Default, 32, 2, 5);
        let x: Vec<f64> = (0..51).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = m.forward(&x).unwrap();
        let b = m.forward(&x).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        assert!(matches!(
            m.forward(&x[..34]),
            Err(LifterError::WidthMismatch { expected: 51, got: 34 })
        ));
    }

    #[test]
    fn default_parameter_count_is_about_0_29m() {
        let m = LifterModel::new(Variant::Default, 256, 2, 0);
        assert_eq!(m.parameter_count(), 292_147);
        assert!((m.parameter_count() as f64 - 290_000.0).abs() / 290_000.0 < 0.05);
        let wide = LifterModel::new(Variant::Baseline, 1024, 2, 0);
        assert_eq!(wide.hidden_width(), 1024);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0.0), 2e-3);
        assert_eq!(cfg.lr_at(30.0), 1e-5);
        let mid = cfg.lr_at(15.0);
        assert!((mid - (2e-3 + 1e-5) / 2.0).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for i in 0..=300 {
            let lr = cfg.lr_at(i as f64 / 10.0);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, width: usize) -> (Array2<f64>, Array2<f64>) {
        let x = Array2::from_shape_simple_fn((n, width), || StandardNormal.sample(rng));
        let y = Array2::from_shape_simple_fn((n, OUTPUT_WIDTH), || {
            let v: f64 = StandardNormal.sample(rng);
            0.5 * v
        });
        (x, y)
    }

    fn total_loss(model: &LifterModel, x: &Array2<f64>, y: &Array2<f64>, wd: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (pred, _) = model.forward_train(x.view(), 0.0, &mut rng);
        log_cosh_with_grad(&pred, y.view()).0 + model.l2_penalty(wd)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = TrainConfig {
            hidden_width: 8,
            dropout: 0.0,
            ..TrainConfig::default()
        };
        let model = LifterModel::new(Variant::Default, 8, 2, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (x, y) = random_batch(&mut rng, 20, 51);
        let mut trainer = Trainer::new(model.clone(), cfg.clone(), 1);
        let (_, grads, _) = trainer.loss_and_grads(x.view(), y.view());
        let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
        let eps = 1e-4;
        let mut worst: f64 = 0.0;
        for (gi, g) in analytic.iter().enumerate() {
            for i in 0..g.len() {
                let mut plus = model.clone();
                plus.param_slices_mut()[gi].0[i] += eps;
                let mut minus = model.clone();
                minus.param_slices_mut()[gi].0[i] -= eps;
                let numeric = (total_loss(&plus, &x, &y, cfg.weight_decay)
                    - total_loss(&minus, &x, &y, cfg.weight_decay))
                    / (2.0 * eps);
                let rel = (numeric - g[i]).abs() / numeric.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn clipping_bounds_every_gradient() {
        let model = LifterModel::new(Variant::Default, 16, 2, 2);
        let mut trainer = Trainer::new(model, TrainConfig::default(), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = random_batch(&mut rng, 8, 51);
        let x = x * 1000.0;
        let (_, mut grads, _) = trainer.loss_and_grads(x.view(), y.view());
        assert!(grads.max_abs() > 0.2, "test needs some large gradients");
        clip_gradients(&mut grads, 0.2);
        assert!(grads.max_abs() <= 0.2);
        let stats = trainer.step(x.view(), y.view());
        assert!(stats.max_abs_grad <= 0.2);
    }

    #[test]
    fn memorizes_a_single_sample() {
        let sample = LiftSample {
            input: (0..51).map(|i| ((i * 7) % 13) as f64 / 13.0 - 0.5).collect(),
            target: std::array::from_fn(|i| ((i * 5) % 11) as f64 / 20.0 - 0.25),
            subject: 0,
        };
        let train_set = vec![sample.clone(); 2048];
        let mut val = sample.clone();
        val.subject = 1;
        let out = train(&train_set, &[val], Variant::Default, &TrainConfig::default()).unwrap();
        let pred = out.model.forward(&sample.input).unwrap();
        let loss = log_cosh_loss(&pred, &sample.target);
        assert!(loss < 1e-4, "loss {loss}");
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let make = |rng: &mut ChaCha8Rng, subject| LiftSample {
            input: (0..51).map(|_| rng.random_range(-0.5..0.5)).collect(),
            target: std::array::from_fn(|_| rng.random_range(-0.5..0.5)),
            subject,
        };
        let tr: Vec<_> = (0..100).map(|i| make(&mut rng, i % 3)).collect();
        let va: Vec<_> = (0..20).map(|_| make(&mut rng, 7)).collect();
        let cfg = TrainConfig {
            epochs: 2,
            hidden_width: 32,
            ..TrainConfig::default()
        };
        let a = train(&tr, &va, Variant::Default, &cfg).unwrap();
        let b = train(&tr, &va, Variant::Default, &cfg).unwrap();
        assert_eq!(a.model.to_bytes(), b.model.to_bytes());
        assert_eq!(a.log, b.log);
        assert!(a.log.iter().all(|e| e.max_abs_grad <= 0.2));
    }

    #[test]
    fn overlapping_subjects_rejected() {
        let s = LiftSample {
            input: vec![0.0; 51],
            target: [0.0; OUTPUT_WIDTH],
            subject: 4,
        };
        assert!(matches!(
            train(&[s.clone(), s.clone()], &[s], Variant::Default, &TrainConfig::default()),
            Err(LifterError::OverlappingSplits(4))
        ));
    }

    #[test]
    fn model_file_round_trip() {
        let m = LifterModel::new(Variant::ProjectionResidual, 24, 2, 8);
        let bytes = m.to_bytes();
        assert_eq!(&bytes[..4], b"WPLM");
        let back = LifterModel::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut broken = bytes.clone();
        broken[8] = 9;
        assert!(LifterModel::read_from(broken.as_slice()).is_err());
        assert!(LifterModel::read_from(&bytes[..bytes.len() - 3]).is_err());
    }

    fn rig() -> CameraRig {
        let cam = CameraIntrinsics {
            fx: 380.0,
            fy: 380.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            depth_min: 0.1,
            depth_max: 10.0,
        };
        let t = RigidTransform::new(
            crate::geometry::rotation_about(&Vec3::x(), -0.3),
            Vec3::new(0.0, 0.55, 0.05),
            1.0,
        )
        .unwrap();
        CameraRig::new(cam, cam, t).unwrap()
    }

    /// Posture-frame skeleton and its exact model-space observation.
    fn observed(ctx: &LiftContext) -> (Skeleton3D, Skeleton2D) {
        let mut gt = Skeleton3D::zeros();
        let mut per_cam = [(CameraId::Posture, Vec2::zeros()); NUM_KEYPOINTS];
        let mut depth = [0.0; NUM_KEYPOINTS];
        for k in 0..NUM_KEYPOINTS {
            let cam = ctx.topo.camera_assignment[k];
            let local = Vec3::new(
                0.02 * k as f64 - 0.15,
                0.01 * (k % 5) as f64 - 0.02,
                0.7 + 0.01 * k as f64,
            );
            gt.coords[k] = ctx.rig.to_posture(cam, &local);
            per_cam[k] = (cam, project(&local, ctx.rig.camera(cam)).unwrap());
            depth[k] = local.z;
        }
        let concat = stack_concat_coords(&per_cam, 480.0);
        let mut s = Skeleton2D::zeros();
        s.coords = concat.map(|p| coord_rescale(&p, MODEL_WIDTH, MODEL_HEIGHT));
        s.depth_at_kp = depth;
        s.confidence = [1.0; NUM_KEYPOINTS];
        (gt, s)
    }

    #[test]
    fn exact_backprojection_and_zero_residual() {
        let ctx = LiftContext::new(rig());
        let (gt, obs) = observed(&ctx);
        let bp = ctx.backproject_skeleton(&obs).unwrap();
        for k in 0..NUM_KEYPOINTS {
            assert!((bp.coords[k] - gt.coords[k]).norm() < 1e-9);
        }
        let mut model = LifterModel::new(Variant::ProjectionResidual, 8, 2, 0);
        let n = model.layers.len();
        model.layers[n - 1].weights.fill(0.0);
        model.layers[n - 1].bias.fill(0.0);
        let out = projection_residual_forward(&obs, &ctx, &model).unwrap();
        for k in 0..NUM_KEYPOINTS {
            assert!((out.coords[k] - gt.coords[k]).norm() < 1e-9);
        }
    }

    #[test]
    fn dead_keypoint_takes_neighbor_mean() {
        let ctx = LiftContext::new(rig());
        let (_, mut obs) = observed(&ctx);
        let full = ctx.backproject_skeleton(&obs).unwrap();
        let elbow = crate::skeleton::kp::L_ELBOW;
        obs.depth_at_kp[elbow] = 0.0;
        let bp = ctx.backproject_skeleton(&obs).unwrap();
        let nbrs = &ctx.topo.neighbors()[elbow];
        let mean = nbrs.iter().map(|&j| full.coords[j]).sum::<Vec3>() / nbrs.len() as f64;
        assert!((bp.coords[elbow] - mean).norm() < 1e-12);
        obs.depth_at_kp = [0.0; NUM_KEYPOINTS];
        assert!(matches!(ctx.backproject_skeleton(&obs), Err(LifterError::AllDepthDead)));
    }

    #[test]
    fn root_recovery_falls_back() {
        let ctx = LiftContext::new(rig());
        let (gt, mut obs) = observed(&ctx);
        let rr = crate::skeleton::root_relative(&gt, &ctx.topo);
        let (root, src) = ctx.estimate_root(&rr, &obs).unwrap().unwrap();
        assert_eq!(src, RootSource::Pelvis);
        assert!((root - gt.coords[0]).norm() < 1e-9);
        obs.depth_at_kp[0] = 0.0;
        let (root, src) = ctx.estimate_root(&rr, &obs).unwrap().unwrap();
        assert_eq!(src, RootSource::Keypoints);
        assert!((root - gt.coords[0]).norm() < 1e-9);
        obs.depth_at_kp = [0.0; NUM_KEYPOINTS];
        assert!(ctx.estimate_root(&rr, &obs).unwrap().is_none());
    }

    #[test]
    fn residual_target_recomposes() {
        let ctx = LiftContext::new(rig());
        let (gt, obs) = observed(&ctx);
        let s = ctx.sample(Variant::ProjectionResidual, &obs, &gt, 0).unwrap();
        assert!(s.target.iter().all(|v| v.abs() < 1e-9));
        let d = ctx.sample(Variant::Default, &obs, &gt, 0).unwrap();
        assert_eq!(d.input.len(), 51);
        assert!((d.input[2] - gt.coords[0].z / 10.0).abs() < 1e-12);
        let b = ctx.sample(Variant::Baseline, &obs, &gt, 0).unwrap();
        assert_eq!(b.input.len(), 34);
    }
}
