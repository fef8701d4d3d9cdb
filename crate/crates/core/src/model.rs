//! Per-pixel MLP segmenter trained with soft Dice loss.
//!
//! Each pixel is described by four features (intensity, 3x3 local mean,
//! normalized x, normalized y) and classified independently by a one
//! hidden layer tanh network with a sigmoid output. The flat weight layout is
//! `[W1 (F x H, row-major by feature), b1 (H), W2 (H), b2 (1)]`.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{Grid, SyntheticSample};
use crate::error::{Error, Result};
use crate::params::ParamVector;
use crate::rng::SimRng;

pub const FEATURES: usize = 4;
pub const DICE_SMOOTHING: f64 = 1.0;

/// Per-pixel inputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelFeatures {
    pub width: usize,
    pub height: usize,
    pub values: Vec<[f64; FEATURES]>,
}

impl PixelFeatures {
    pub fn from_image(image: &Grid) -> Self {
        let (w, h) = (image.width, image.height);
        let clampi = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;
        let nx = if w > 1 { (w - 1) as f64 } else { 1.0 };
        let ny = if h > 1 { (h - 1) as f64 } else { 1.0 };
        let mut values = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0;
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        sum += image.get(clampi(x as isize + dx, w), clampi(y as isize + dy, h));
                    }
                }
                values.push([image.get(x, y), sum / 9.0, x as f64 / nx, y as f64 / ny]);
            }
        }
        Self { width: w, height: h, values }
    }
}

/// A sample with precomputed features, ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct Example {
    pub features: PixelFeatures,
    pub mask: Vec<f64>,
}

impl Example {
    pub fn from_sample(s: &SyntheticSample) -> Self {
        Self {
            features: PixelFeatures::from_image(&s.image),
            mask: s.mask.values.clone(),
        }
    }
}

pub fn param_count(hidden: usize) -> usize {
    FEATURES * hidden + 2 * hidden + 1
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    hidden: usize,
    weights: ParamVector,
}

impl ToyModel {
    pub fn from_params(hidden: usize, weights: ParamVector) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::config("hidden width must be positive"));
        }
        if weights.len() != param_count(hidden) {
            return Err(Error::Dimension {
                expected: param_count(hidden),
                found: weights.len(),
            });
        }
        Ok(Self { hidden, weights })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(hidden: usize, rng: &mut SimRng) -> Result<Self> {
        let mut w = vec![0.0; param_count(hidden)];
        let a1 = (6.0 / (FEATURES + hidden) as f64).sqrt();
        for v in &mut w[..FEATURES * hidden] {
            *v = rng.random_range(-a1..a1);
        }
        let a2 = (6.0 / (hidden + 1) as f64).sqrt();
        let w2 = FEATURES * hidden + hidden;
        for v in &mut w[w2..w2 + hidden] {
            *v = rng.random_range(-a2..a2);
        }
        Self::from_params(hidden, ParamVector::new(w))
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn params(&self) -> &ParamVector {
        &self.weights
    }

    pub fn into_params(self) -> ParamVector {
        self.weights
    }

    fn layout(&self) -> Layout<'_> {
        let h = self.hidden;
        let w = self.weights.as_slice();
        let (w1, rest) = w.split_at(FEATURES * h);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(h);
        Layout { w1, b1, w2, b2: b2[0] }
    }

    /// Writes hidden activations into `hidden_out` and returns the logit.
    fn pixel_logit(&self, l: &Layout<'_>, feat: &[f64; FEATURES], hidden_out: &mut [f64]) -> f64 {
        let h = self.hidden;
        for (j, out) in hidden_out.iter_mut().enumerate() {
            let mut a = l.b1[j];
            for (f, x) in feat.iter().enumerate() {
                a += l.w1[f * h + j] * x;
            }
            *out = a.tanh();
        }
        l.b2 + hidden_out.iter().zip(l.w2).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn predict(&self, features: &PixelFeatures) -> Vec<f64> {
        let l = self.layout();
        let mut hid = vec![0.0; self.hidden];
        features
            .values
            .iter()
            .map(|f| sigmoid(self.pixel_logit(&l, f, &mut hid)))
            .collect()
    }

    /// Foreground probability for every pixel of `image`.
    pub fn forward(&self, image: &Grid) -> Grid {
        let p = self.predict(&PixelFeatures::from_image(image));
        Grid {
            width: image.width,
            height: image.height,
            values: p,
        }
    }

    /// Soft Dice loss of one example and its gradient, accumulated into `grad`
    /// scaled by `weight`.
    fn accumulate_example(&self, ex: &Example, weight: f64, grad: &mut [f64]) -> f64 {
        let h = self.hidden;
        let l = self.layout();
        let n = ex.features.values.len();
        let mut hidden = vec![0.0; n * h];
        let mut probs = vec![0.0; n];
        for (i, f) in ex.features.values.iter().enumerate() {
            probs[i] = sigmoid(self.pixel_logit(&l, f, &mut hidden[i * h..(i + 1) * h]));
        }
        let inter: f64 = probs.iter().zip(&ex.mask).map(|(p, g)| p * g).sum();
        let psum: f64 = probs.iter().sum();
        let gsum: f64 = ex.mask.iter().sum();
        let num = 2.0 * inter + DICE_SMOOTHING;
        let den = psum + gsum + DICE_SMOOTHING;
        let loss = 1.0 - num / den;

        let (gw1, rest) = grad.split_at_mut(FEATURES * h);
        let (gb1, rest) = rest.split_at_mut(h);
        let (gw2, gb2) = rest.split_at_mut(h);
        let den2 = den * den;
        for i in 0..n {
            let p = probs[i];
            let dl_dp = -(2.0 * ex.mask[i] * den - num) / den2;
            let dz = weight * dl_dp * p * (1.0 - p);
            gb2[0] += dz;
            let hid = &hidden[i * h..(i + 1) * h];
            let feat = &ex.features.values[i];
            for j in 0..h {
                gw2[j] += dz * hid[j];
                let da = dz * l.w2[j] * (1.0 - hid[j] * hid[j]);
                gb1[j] += da;
                for (f, x) in feat.iter().enumerate() {
                    gw1[f * h + j] += da * x;
                }
            }
        }
        loss
    }

    /// Mean soft Dice loss over `batch` and its analytic gradient.
    pub fn loss_and_gradient(&self, batch: &[&Example]) -> Result<(f64, ParamVector)> {
        if batch.is_empty() {
            return Err(Error::config("gradient needs a nonempty batch"));
        }
        let weight = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        for ex in batch {
            loss += weight * self.accumulate_example(ex, weight, &mut grad);
        }
        Ok((loss, ParamVector::new(grad)))
    }

    pub fn gradient(&self, batch: &[&Example]) -> Result<ParamVector> {
        self.loss_and_gradient(batch).map(|(_, g)| g)
    }

    pub fn loss(&self, batch: &[&Example]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::config("loss needs a nonempty batch"));
        }
        let total: f64 = batch
            .iter()
            .map(|ex| soft_dice_loss(&self.predict(&ex.features), &ex.mask))
            .collect::<Result<Vec<_>>>()?
            .iter()
            .sum();
        Ok(total / batch.len() as f64)
    }
}

struct Layout<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `1 - (2 sum(p g) + s) / (sum(p) + sum(g) + s)` with `s = 1`.
pub fn soft_dice_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    soft_dice_loss_smoothed(pred, target, DICE_SMOOTHING)
}

pub fn soft_dice_loss_smoothed(pred: &[f64], target: &[f64], smoothing: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension {
            expected: target.len(),
            found: pred.len(),
        });
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, g)| p * g).sum();
    let psum: f64 = pred.iter().sum();
    let gsum: f64 = target.iter().sum();
    Ok(1.0 - (2.0 * inter + smoothing) / (psum + gsum + smoothing))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied as `w -= lr * weight_decay * w` before the Adam step.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    /// Reference optimizer settings (lr 1e-4, weight decay 1e-5).
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    /// One Adam update with bias correction at learning rate `lr`.
    pub fn adam_step(
        &mut self,
        weights: &ParamVector,
        grad: &ParamVector,
        lr: f64,
        cfg: &AdamConfig,
    ) -> Result<ParamVector> {
        if weights.len() != grad.len() || weights.len() != self.m.len() {
            return Err(Error::Dimension {
                expected: self.m.len(),
                found: if weights.len() != self.m.len() { weights.len() } else { grad.len() },
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut out = Vec::with_capacity(weights.len());
        for (i, (&w, &g)) in weights.iter().zip(grad.iter()).enumerate() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let decayed = w - lr * cfg.weight_decay * w;
            out.push(decayed - lr * m_hat / (v_hat.sqrt() + cfg.eps));
        }
        Ok(ParamVector::new(out))
    }
}

/// Cosine-annealed learning rate for round `t` of `total`.
pub fn cosine_lr(t: usize, total: usize, base: f64) -> Result<f64> {
    if t >= total {
        return Err(Error::Schedule { step: t, total });
    }
    Ok(base * (1.0 + (PI * t as f64 / total as f64).cos()) / 2.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

/// Runs `epochs` passes over `shard` from `start` and returns the local
/// weights with the mean batch loss of the last epoch. `opt` carries the
/// client's optimizer state across calls.
pub fn local_train(
    start: &ParamVector,
    hidden: usize,
    shard: &[Example],
    train: &LocalTraining,
    lr: f64,
    opt: &mut OptimizerState,
    rng: &mut SimRng,
) -> Result<(ParamVector, f64)> {
    if shard.is_empty() {
        return Err(Error::config("local training shard is empty"));
    }
    if train.epochs == 0 || train.batch_size == 0 {
        return Err(Error::config("epochs and batch size must be at least 1"));
    }
    let mut model = ToyModel::from_params(hidden, start.clone())?;
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut last_loss = 0.0;
    for _ in 0..train.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train.batch_size) {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &shard[i]).collect();
            let (loss, grad) = model.loss_and_gradient(&batch)?;
            let next = opt.adam_step(model.params(), &grad, lr, &train.adam)?;
            model = ToyModel::from_params(hidden, next)?;
            total += loss;
            batches += 1;
        }
        last_loss = total / batches as f64;
    }
    Ok((model.into_params(), last_loss))
}
