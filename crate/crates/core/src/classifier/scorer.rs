//! Small convolutional scorer with hand-written backpropagation.
//!
//! conv3x3(8) → ReLU → avgpool2 → conv3x3(16) → ReLU → avgpool2 → global
//! average pool → dense(32) → ReLU (the embedding) → dense(1) → logistic.
//! Convolutions use zero padding, so spatial sizes only change at pooling.

use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{BlackBox, Confidence, Embedding, TrainConfig};
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub channels: usize,
    pub input_side: usize,
    pub conv1: usize,
    pub conv2: usize,
    pub hidden: usize,
    /// Map pixel values from [0, 1] to [-1, 1] before the first convolution.
    pub center_input: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: 1,
            input_side: 32,
            conv1: 8,
            conv2: 16,
            hidden: 32,
            center_input: true,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {}", self.channels)));
        }
        if self.input_side < 4 || !self.input_side.is_multiple_of(4) {
            return Err(Error::invalid(format!(
                "input side {} must be a positive multiple of 4",
                self.input_side
            )));
        }
        if self.conv1 == 0 || self.conv2 == 0 || self.hidden == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start..at
        };
        let w1 = take(self.conv1 * self.channels * 9);
        let b1 = take(self.conv1);
        let w2 = take(self.conv2 * self.conv1 * 9);
        let b2 = take(self.conv2);
        let wh = take(self.hidden * self.conv2);
        let bh = take(self.hidden);
        let wo = take(self.hidden);
        let bo = take(1);
        Layout {
            w1,
            b1,
            w2,
            b2,
            wh,
            bh,
            wo,
            bo,
            total: at,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().total
    }
}

type Range = std::ops::Range<usize>;

#[derive(Clone, Debug)]
struct Layout {
    w1: Range,
    b1: Range,
    w2: Range,
    b2: Range,
    wh: Range,
    bh: Range,
    wo: Range,
    bo: Range,
    total: usize,
}

/// Activations kept for the backward pass.
struct Trace {
    input: Vec<f64>,
    z1: Vec<f64>,
    p1: Vec<f64>,
    z2: Vec<f64>,
    pooled: Vec<f64>,
    zh: Vec<f64>,
    hidden: Vec<f64>,
    logit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvScorer {
    arch: Architecture,
    params: Vec<f64>,
    initialized: bool,
}

/// 3x3 zero-padded convolution, accumulating into `out` (already holding biases).
fn conv3x3(input: &[f64], cin: usize, weights: &[f64], cout: usize, side: usize, out: &mut [f64]) {
    let plane = side * side;
    for o in 0..cout {
        let out_plane = &mut out[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let w = &weights[(o * cin + i) * 9..(o * cin + i + 1) * 9];
            for ky in 0..3 {
                let (y0, y1) = (1usize.saturating_sub(ky), (side + 1 - ky).min(side));
                for kx in 0..3 {
                    let wk = w[ky * 3 + kx];
                    let (x0, x1) = (1usize.saturating_sub(kx), (side + 1 - kx).min(side));
                    for y in y0..y1 {
                        let src_row = (y + ky - 1) * side;
                        let dst = &mut out_plane[y * side + x0..y * side + x1];
                        let src = &in_plane[src_row + x0 + kx - 1..src_row + x1 + kx - 1];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wk * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of [`conv3x3`] with respect to its weights (accumulated into
/// `dw`) and, when requested, its input.
fn conv3x3_backward(
    input: &[f64],
    cin: usize,
    weights: &[f64],
    cout: usize,
    side: usize,
    dout: &[f64],
    dw: &mut [f64],
    mut dinput: Option<&mut [f64]>,
) {
    let plane = side * side;
    for o in 0..cout {
        let g_plane = &dout[o * plane..(o + 1) * plane];
        for i in 0..cin {
            let in_plane = &input[i * plane..(i + 1) * plane];
            let base = (o * cin + i) * 9;
            for ky in 0..3 {
                let (y0, y1) = (1usize.saturating_sub(ky), (side + 1 - ky).min(side));
                for kx in 0..3 {
                    let (x0, x1) = (1usize.saturating_sub(kx), (side + 1 - kx).min(side));
                    let wk = weights[base + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let src_row = (y + ky - 1) * side;
                        let g = &g_plane[y * side + x0..y * side + x1];
                        let s = &in_plane[src_row + x0 + kx - 1..src_row + x1 + kx - 1];
                        acc += g.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
                        if let Some(din) = dinput.as_deref_mut() {
                            let d = &mut din[i * plane + src_row + x0 + kx - 1..i * plane + src_row + x1 + kx - 1];
                            for (d, g) in d.iter_mut().zip(g) {
                                *d += wk * g;
                            }
                        }
                    }
                    dw[base + ky * 3 + kx] += acc;
                }
            }
        }
    }
}

fn relu_pool(z: &[f64], channels: usize, side: usize) -> Vec<f64> {
    let half = side / 2;
    let mut out = vec![0.0; channels * half * half];
    for c in 0..channels {
        for y in 0..half {
            for x in 0..half {
                let at = |dy: usize, dx: usize| z[c * side * side + (2 * y + dy) * side + 2 * x + dx].max(0.0);
                out[c * half * half + y * half + x] = 0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1));
            }
        }
    }
    out
}

/// Backward of ReLU followed by 2x2 average pooling.
fn relu_pool_backward(z: &[f64], channels: usize, side: usize, dpooled: &[f64]) -> Vec<f64> {
    let half = side / 2;
    let mut dz = vec![0.0; channels * side * side];
    for c in 0..channels {
        for y in 0..side {
            for x in 0..side {
                let i = c * side * side + y * side + x;
                if z[i] > 0.0 {
                    dz[i] = 0.25 * dpooled[c * half * half + (y / 2) * half + x / 2];
                }
            }
        }
    }
    dz
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of a logit against a 0/1 target, computed stably.
fn bce_with_logit(logit: f64, target: f64) -> f64 {
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

fn target_of(label: Label) -> f64 {
    match label {
        Label::Nok => 1.0,
        Label::Ok => 0.0,
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"IVRSCKPT";
const CHECKPOINT_VERSION: u32 = 1;

impl ConvScorer {
    /// A scorer with Glorot-uniform weights and zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut scorer = Self::uninitialized(arch)?;
        scorer.initialize(seed);
        Ok(scorer)
    }

    /// A scorer with no parameters yet; every query fails until initialized.
    pub fn uninitialized(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        Ok(Self {
            arch,
            params: vec![0.0; arch.parameter_count()],
            initialized: false,
        })
    }

    pub fn initialize(&mut self, seed: u64) {
        let a = self.arch;
        let l = a.layout();
        let mut r = rng::stream(seed, "init", 0);
        let mut fill = |range: Range, fan_in: usize, fan_out: usize, params: &mut [f64]| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut params[range] {
                *p = r.random_range(-bound..=bound);
            }
        };
        self.params.iter_mut().for_each(|p| *p = 0.0);
        fill(l.w1, a.channels * 9, a.conv1 * 9, &mut self.params);
        fill(l.w2, a.conv1 * 9, a.conv2 * 9, &mut self.params);
        fill(l.wh, a.conv2, a.hidden, &mut self.params);
        fill(l.wo, a.hidden, 1, &mut self.params);
        self.initialized = true;
    }

    pub fn architecture(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        self.initialized = true;
        Ok(())
    }

    /// Zero the output unit so every prediction is exactly 0.5.
    pub fn zero_head(&mut self) {
        let l = self.arch.layout();
        self.params[l.wo].iter_mut().for_each(|p| *p = 0.0);
        self.params[l.bo].iter_mut().for_each(|p| *p = 0.0);
    }

    fn check_ready(&self) -> Result<()> {
        if self.initialized {
            Ok(())
        } else {
            Err(Error::InvalidState("classifier parameters are not initialized".into()))
        }
    }

    /// Resize to the input side and convert to planar layout.
    pub(crate) fn prepare(&self, image: &Image) -> Result<Vec<f64>> {
        if image.channels() != self.arch.channels {
            return Err(Error::invalid(format!(
                "classifier expects {} channel(s), image has {}",
                self.arch.channels,
                image.channels()
            )));
        }
        let side = self.arch.input_side;
        let resized = image.resize(side);
        let ch = self.arch.channels;
        let (scale, offset) = if self.arch.center_input { (2.0, -1.0) } else { (1.0, 0.0) };
        let mut planar = vec![0.0; ch * side * side];
        for (i, &v) in resized.pixels().iter().enumerate() {
            planar[(i % ch) * side * side + i / ch] = scale * v + offset;
        }
        Ok(planar)
    }

    fn forward(&self, params: &[f64], input: Vec<f64>) -> Trace {
        let a = &self.arch;
        let l = a.layout();
        let s1 = a.input_side;
        let s2 = s1 / 2;
        let s4 = s1 / 4;

        let mut z1 = vec![0.0; a.conv1 * s1 * s1];
        for (o, b) in params[l.b1.clone()].iter().enumerate() {
            z1[o * s1 * s1..(o + 1) * s1 * s1].iter_mut().for_each(|v| *v = *b);
        }
        conv3x3(&input, a.channels, &params[l.w1.clone()], a.conv1, s1, &mut z1);
        let p1 = relu_pool(&z1, a.conv1, s1);

        let mut z2 = vec![0.0; a.conv2 * s2 * s2];
        for (o, b) in params[l.b2.clone()].iter().enumerate() {
            z2[o * s2 * s2..(o + 1) * s2 * s2].iter_mut().for_each(|v| *v = *b);
        }
        conv3x3(&p1, a.conv1, &params[l.w2.clone()], a.conv2, s2, &mut z2);
        let p2 = relu_pool(&z2, a.conv2, s2);

        let plane4 = (s4 * s4) as f64;
        let pooled: Vec<f64> = (0..a.conv2)
            .map(|c| p2[c * s4 * s4..(c + 1) * s4 * s4].iter().sum::<f64>() / plane4)
            .collect();

        let wh = &params[l.wh.clone()];
        let zh: Vec<f64> = (0..a.hidden)
            .map(|j| {
                params[l.bh.start + j]
                    + wh[j * a.conv2..(j + 1) * a.conv2]
                        .iter()
                        .zip(&pooled)
                        .map(|(w, g)| w * g)
                        .sum::<f64>()
            })
            .collect();
        let hidden: Vec<f64> = zh.iter().map(|v| v.max(0.0)).collect();
        let logit = params[l.bo.start]
            + params[l.wo.clone()]
                .iter()
                .zip(&hidden)
                .map(|(w, h)| w * h)
                .sum::<f64>();
        Trace {
            input,
            z1,
            p1,
            z2,
            pooled,
            zh,
            hidden,
            logit,
        }
    }

    /// Gradient of the cross-entropy loss for one example, added into `grad`.
    fn backward(&self, params: &[f64], trace: &Trace, target: f64, grad: &mut [f64]) {
        let a = &self.arch;
        let l = a.layout();
        let s1 = a.input_side;
        let s2 = s1 / 2;
        let s4 = s1 / 4;

        let dlogit = sigmoid(trace.logit) - target;
        grad[l.bo.start] += dlogit;
        let mut dzh = vec![0.0; a.hidden];
        for j in 0..a.hidden {
            grad[l.wo.start + j] += dlogit * trace.hidden[j];
            if trace.zh[j] > 0.0 {
                dzh[j] = dlogit * params[l.wo.start + j];
            }
        }
        let mut dpooled = vec![0.0; a.conv2];
        for j in 0..a.hidden {
            grad[l.bh.start + j] += dzh[j];
            for c in 0..a.conv2 {
                grad[l.wh.start + j * a.conv2 + c] += dzh[j] * trace.pooled[c];
                dpooled[c] += dzh[j] * params[l.wh.start + j * a.conv2 + c];
            }
        }
        let plane4 = (s4 * s4) as f64;
        let dp2: Vec<f64> = (0..a.conv2 * s4 * s4)
            .map(|i| dpooled[i / (s4 * s4)] / plane4)
            .collect();
        let dz2 = relu_pool_backward(&trace.z2, a.conv2, s2, &dp2);
        for (o, g) in grad[l.b2.clone()].iter_mut().enumerate() {
            *g += dz2[o * s2 * s2..(o + 1) * s2 * s2].iter().sum::<f64>();
        }
        let mut dp1 = vec![0.0; a.conv1 * s2 * s2];
        let (grad_w2, params_w2) = (&mut grad[l.w2.clone()], &params[l.w2.clone()]);
        conv3x3_backward(&trace.p1, a.conv1, params_w2, a.conv2, s2, &dz2, grad_w2, Some(&mut dp1));

        let dz1 = relu_pool_backward(&trace.z1, a.conv1, s1, &dp1);
        for (o, g) in grad[l.b1.clone()].iter_mut().enumerate() {
            *g += dz1[o * s1 * s1..(o + 1) * s1 * s1].iter().sum::<f64>();
        }
        conv3x3_backward(
            &trace.input,
            a.channels,
            &params[l.w1.clone()],
            a.conv1,
            s1,
            &dz1,
            &mut grad[l.w1.clone()],
            None,
        );
    }

    fn loss_and_gradient(&self, params: &[f64], input: &[f64], target: f64) -> (f64, f64, Vec<f64>) {
        let trace = self.forward(params, input.to_vec());
        let mut grad = vec![0.0; params.len()];
        self.backward(params, &trace, target, &mut grad);
        (bce_with_logit(trace.logit, target), sigmoid(trace.logit), grad)
    }

    /// Mean loss and accuracy over prepared inputs.
    fn evaluate(&self, inputs: &[(Vec<f64>, f64)]) -> (f64, f64) {
        let results: Vec<(f64, bool)> = inputs
            .par_iter()
            .map(|(x, t)| {
                let logit = self.forward(&self.params, x.clone()).logit;
                let predicted = if sigmoid(logit) > 0.5 { 1.0 } else { 0.0 };
                (bce_with_logit(logit, *t), predicted == *t)
            })
            .collect();
        let n = results.len() as f64;
        (
            results.iter().map(|r| r.0).sum::<f64>() / n,
            results.iter().filter(|r| r.1).count() as f64 / n,
        )
    }

    /// Minibatch SGD with momentum on binary cross-entropy, with early
    /// stopping on validation loss. The parameters of the best validation
    /// epoch are restored at the end. Iteration order and gradient summation
    /// order are fixed, so identical inputs give bit-identical parameters.
    pub fn train(
        &mut self,
        train: &[(&Image, Label)],
        validation: &[(&Image, Label)],
        config: &TrainConfig,
    ) -> Result<TrainingLog> {
        self.check_ready()?;
        config.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut log = TrainingLog::default();
        let nok = train.iter().filter(|(_, l)| *l == Label::Nok).count();
        if nok == 0 || nok == train.len() {
            let msg = format!("training set contains a single class ({} instances)", train.len());
            warn!("{msg}");
            log.warnings.push(msg);
        }
        let prepare = |set: &[(&Image, Label)]| -> Result<Vec<(Vec<f64>, f64)>> {
            set.iter().map(|(img, l)| Ok((self.prepare(img)?, target_of(*l)))).collect()
        };
        let train_inputs = prepare(train)?;
        let val_inputs = prepare(validation)?;

        let mut velocity = vec![0.0; self.params.len()];
        let mut best: Option<(f64, Vec<f64>)> = None;
        let mut since_best = 0;
        let mut order: Vec<usize> = (0..train_inputs.len()).collect();

        for epoch in 0..config.max_epochs {
            order.shuffle(&mut rng::stream(config.seed, "epoch", epoch as u64));
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for batch in order.chunks(config.batch_size) {
                let per_sample: Vec<(f64, f64, Vec<f64>)> = batch
                    .par_iter()
                    .map(|&i| {
                        let (x, t) = &train_inputs[i];
                        self.loss_and_gradient(&self.params, x, *t)
                    })
                    .collect();
                let mut grad = vec![0.0; self.params.len()];
                for (&i, (loss, prob, g)) in batch.iter().zip(&per_sample) {
                    loss_sum += loss;
                    let predicted = if *prob > 0.5 { 1.0 } else { 0.0 };
                    if predicted == train_inputs[i].1 {
                        correct += 1;
                    }
                    for (a, b) in grad.iter_mut().zip(g) {
                        *a += b;
                    }
                }
                let scale = config.learning_rate / batch.len() as f64;
                for ((p, v), g) in self.params.iter_mut().zip(&mut velocity).zip(&grad) {
                    *v = config.momentum * *v - scale * g;
                    *p += *v;
                }
            }
            let n = train_inputs.len() as f64;
            let (val_loss, val_accuracy) = if val_inputs.is_empty() {
                (None, None)
            } else {
                let (l, a) = self.evaluate(&val_inputs);
                (Some(l), Some(a))
            };
            log.epochs.push(EpochLog {
                epoch,
                train_loss: loss_sum / n,
                train_accuracy: correct as f64 / n,
                val_loss,
                val_accuracy,
            });
            if let Some(vl) = val_loss {
                if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                    best = Some((vl, self.params.clone()));
                    log.best_epoch = Some(epoch);
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= config.patience {
                        log.stopped_early = true;
                        break;
                    }
                }
            }
        }
        if let Some((_, params)) = best {
            self.params = params;
        }
        Ok(log)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let a = self.arch;
        let mut out = Vec::with_capacity(44 + self.params.len() * 8);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [a.channels, a.input_side, a.conv1, a.conv2, a.hidden, usize::from(a.center_input)] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::format("<checkpoint>", m.to_string());
        if bytes.len() < 44 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a scorer checkpoint"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if u32_at(8) != CHECKPOINT_VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let field = |k: usize| u32_at(12 + 4 * k) as usize;
        let arch = Architecture {
            channels: field(0),
            input_side: field(1),
            conv1: field(2),
            conv2: field(3),
            hidden: field(4),
            center_input: field(5) != 0,
        };
        arch.validate()?;
        let count = u64::from_le_bytes(bytes[36..44].try_into().unwrap()) as usize;
        if count != arch.parameter_count() || bytes.len() != 44 + 8 * count {
            return Err(bad("parameter block does not match the architecture"));
        }
        let params = bytes[44..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            arch,
            params,
            initialized: true,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_ready()?;
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path, message),
            other => other,
        })
    }
}

impl BlackBox for ConvScorer {
    fn predict(&self, image: &Image) -> Result<Confidence> {
        self.check_ready()?;
        let trace = self.forward(&self.params, self.prepare(image)?);
        Confidence::new(sigmoid(trace.logit))
    }

    fn embed(&self, image: &Image) -> Result<Embedding> {
        self.check_ready()?;
        Ok(Embedding(self.forward(&self.params, self.prepare(image)?).hidden))
    }

    fn embedding_len(&self) -> usize {
        self.arch.hidden
    }

    fn predict_batch(&self, images: &[Image]) -> Result<Vec<Confidence>> {
        images.par_iter().map(|i| self.predict(i)).collect()
    }
}

/// Whether two forward passes use the same ReLU branches everywhere.
fn same_kinks(a: &Trace, b: &Trace) -> bool {
    let pattern = |z: &[f64]| z.iter().map(|v| *v > 0.0).collect::<Vec<_>>();
    pattern(&a.z1) == pattern(&b.z1) && pattern(&a.z2) == pattern(&b.z2) && pattern(&a.zh) == pattern(&b.zh)
}

/// Compare analytic gradients against central finite differences (step 1e-5)
/// at `coordinates` parameter indices drawn from `seed`. Coordinates whose
/// perturbation flips a ReLU are redrawn, since the loss has a kink there.
/// Returns the largest relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn gradient_check(scorer: &ConvScorer, image: &Image, label: Label, coordinates: usize, seed: u64) -> Result<f64> {
    scorer.check_ready()?;
    let input = scorer.prepare(image)?;
    let target = target_of(label);
    let (_, _, analytic) = scorer.loss_and_gradient(&scorer.params, &input, target);
    let mut r = rng::stream(seed, "gradcheck", 0);
    let step = 1e-5;
    let mut params = scorer.params.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for _ in 0..coordinates * 50 {
        if checked == coordinates {
            break;
        }
        let k = r.random_range(0..params.len());
        let original = params[k];
        params[k] = original + step;
        let up = scorer.forward(&params, input.clone());
        params[k] = original - step;
        let down = scorer.forward(&params, input.clone());
        params[k] = original;
        if !same_kinks(&up, &down) {
            continue;
        }
        checked += 1;
        let numeric = (bce_with_logit(up.logit, target) - bce_with_logit(down.logit, target)) / (2.0 * step);
        let denom = analytic[k].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((analytic[k] - numeric).abs() / denom);
    }
    if checked < coordinates {
        return Err(Error::InvalidState(format!(
            "only {checked} of {coordinates} coordinates avoid a ReLU kink"
        )));
    }
    Ok(worst)
}
