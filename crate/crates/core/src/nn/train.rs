use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm2d, Layer, ParamGrads, ReluBackward};
use super::model::Model;
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips for image inputs.
    pub flip: bool,
    /// Momentum of the BatchNorm running statistics.
    pub bn_momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            batch_size: 32,
            seed: 0,
            flip: true,
            bn_momentum: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub epoch_loss: Vec<f64>,
    /// Training accuracy per epoch, measured on the fly.
    pub epoch_accuracy: Vec<f64>,
    pub final_accuracy: f64,
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax probabilities of a logit vector.
pub fn probabilities(logits: &Tensor) -> Vec<f64> {
    softmax(logits.data())
}

fn flip_horizontal(x: &Tensor) -> Tensor {
    let (c, h, w) = x.chw().expect("image input");
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for r in 0..h {
            for col in 0..w {
                out[(ch * h + r) * w + col] = x.data()[(ch * h + r) * w + (w - 1 - col)];
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn channel_moments(x: &Tensor) -> Vec<(f64, f64, f64)> {
    let (c, h, w) = x.chw().expect("batchnorm input is C×H×W");
    (0..c)
        .map(|ch| {
            let (mut s, mut sq) = (0.0f64, 0.0f64);
            for &v in x.channel(ch) {
                s += v as f64;
                sq += (v as f64) * (v as f64);
            }
            (s, sq, (h * w) as f64)
        })
        .collect()
}

struct BatchStep {
    loss: f64,
    correct: usize,
    /// Gradients summed over the batch, per layer and parameter.
    grads: Vec<Vec<Vec<f32>>>,
    /// Per BatchNorm layer: per-sample channel moments of its input.
    moments: Vec<Option<Vec<Vec<(f64, f64, f64)>>>>,
}

/// Forward and backward pass of a whole batch, one layer at a time.
/// BatchNorm layers normalize with the batch statistics, and their
/// backward accounts for every sample's effect on those statistics.
fn batch_step(model: &Model, inputs: Vec<Tensor>, labels: &[usize]) -> Result<BatchStep> {
    let mut step = model.clone();
    let n_layers = step.layers.len();
    let tiles = step.tiles;
    let mut acts: Vec<Vec<Tensor>> = Vec::with_capacity(n_layers + 1);
    acts.push(inputs);
    let mut moments = vec![None; n_layers];
    for i in 0..n_layers {
        if let Layer::BatchNorm2d(bn) = &mut step.layers[i] {
            let m: Vec<Vec<(f64, f64, f64)>> = acts[i].par_iter().map(channel_moments).collect();
            set_stats(bn, &m, 1.0);
            moments[i] = Some(m);
        }
        let layer = &step.layers[i];
        let next = acts[i]
            .par_iter()
            .map(|a| layer.forward(a, tiles, i))
            .collect::<Result<Vec<_>>>()?;
        acts.push(next);
    }

    let (mut loss, mut correct) = (0.0, 0);
    let mut g = Vec::with_capacity(labels.len());
    for (logits, &label) in acts[n_layers].iter().zip(labels) {
        if label >= logits.len() {
            return Err(Error::TargetOutOfRange {
                target: label,
                outputs: logits.len(),
            });
        }
        let p = softmax(logits.data());
        loss += -(p[label].max(1e-30)).ln();
        if logits.argmax() == label {
            correct += 1;
        }
        let mut seed = Tensor::from_parts(logits.shape().to_vec(), p.iter().map(|&v| v as f32).collect());
        seed.data_mut()[label] -= 1.0;
        g.push(seed);
    }

    let mut grads: Vec<Vec<Vec<f32>>> = step
        .layers
        .iter()
        .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
        .collect();
    let first_param = step.layers.iter().position(|l| l.num_params() > 0).unwrap_or(n_layers);
    for i in (first_param..n_layers).rev() {
        let layer = &step.layers[i];
        let x = &acts[i];
        if let Layer::BatchNorm2d(bn) = layer {
            let (gx, gamma, beta) = batchnorm_backward(bn, x, &g)?;
            grads[i] = vec![gamma, beta];
            g = gx;
            continue;
        }
        if layer.num_params() > 0 {
            let per: Vec<Option<ParamGrads>> = x
                .par_iter()
                .zip(g.par_iter())
                .map(|(a, gy)| layer.param_grads(a, gy, tiles))
                .collect();
            for ParamGrads(pg) in per.into_iter().flatten() {
                for (acc, gp) in grads[i].iter_mut().zip(pg) {
                    for (a, v) in acc.iter_mut().zip(gp) {
                        *a += v;
                    }
                }
            }
        }
        if i > first_param {
            g = x
                .par_iter()
                .zip(g.par_iter())
                .map(|(a, gy)| layer.backward(a, gy, tiles, ReluBackward::Standard))
                .collect();
        }
    }
    Ok(BatchStep {
        loss,
        correct,
        grads,
        moments,
    })
}

/// Backward of batch normalization over `xs` with the statistics stored in
/// `bn` being those of `xs`. Returns the input gradients and the summed
/// gamma and beta gradients.
fn batchnorm_backward(bn: &BatchNorm2d, xs: &[Tensor], gs: &[Tensor]) -> Result<(Vec<Tensor>, Vec<f32>, Vec<f32>)> {
    let (c, h, w) = xs[0].chw()?;
    let hw = h * w;
    let count = (xs.len() * hw) as f64;
    let mut out: Vec<Vec<f32>> = xs.iter().map(|x| vec![0.0; x.len()]).collect();
    let (mut g_gamma, mut g_beta) = (vec![0.0f32; c], vec![0.0f32; c]);
    for ch in 0..c {
        let mean = bn.running_mean.data()[ch];
        let inv = 1.0 / (bn.running_var.data()[ch] + bn.eps).sqrt();
        let gamma = bn.gamma.data()[ch];
        let (mut sum_g, mut sum_gx) = (0.0f64, 0.0f64);
        for (x, gy) in xs.iter().zip(gs) {
            for (&v, &gv) in x.channel(ch).iter().zip(gy.channel(ch)) {
                sum_g += gv as f64;
                sum_gx += gv as f64 * ((v - mean) * inv) as f64;
            }
        }
        g_gamma[ch] = sum_gx as f32;
        g_beta[ch] = sum_g as f32;
        let (mg, mgx) = ((sum_g / count) as f32, (sum_gx / count) as f32);
        for ((x, gy), o) in xs.iter().zip(gs).zip(&mut out) {
            let dst = &mut o[ch * hw..(ch + 1) * hw];
            for ((d, &v), &gv) in dst.iter_mut().zip(x.channel(ch)).zip(gy.channel(ch)) {
                let xhat = (v - mean) * inv;
                *d = gamma * inv * (gv - mg - xhat * mgx);
            }
        }
    }
    let gx = out
        .into_iter()
        .map(|d| Tensor::from_parts(vec![c, h, w], d))
        .collect();
    Ok((gx, g_gamma, g_beta))
}

fn set_stats(bn: &mut BatchNorm2d, moments: &[Vec<(f64, f64, f64)>], momentum: f32) {
    let c = bn.gamma.len();
    for ch in 0..c {
        let (mut s, mut sq, mut n) = (0.0, 0.0, 0.0);
        for m in moments {
            s += m[ch].0;
            sq += m[ch].1;
            n += m[ch].2;
        }
        let mean = s / n;
        let var = (sq / n - mean * mean).max(0.0);
        let rm = &mut bn.running_mean.data_mut()[ch];
        *rm = (1.0 - momentum) * *rm + momentum * mean as f32;
        let rv = &mut bn.running_var.data_mut()[ch];
        *rv = (1.0 - momentum) * *rv + momentum * var as f32;
    }
}

/// Mini-batch SGD with momentum on the cross-entropy loss.
///
/// Per-sample gradients are computed in parallel and summed in sample
/// order, so the result does not depend on the number of threads.
/// During a step, BatchNorm layers normalize with the statistics of the
/// current batch, held constant for the gradient. The running statistics
/// start at the first batch's and then follow each batch with
/// `bn_momentum`.
pub fn train_sgd(model: &Model, data: &[LabeledImage], cfg: &TrainConfig) -> Result<(Model, TrainReport)> {
    if data.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if !(cfg.lr >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::Config("lr must be ≥ 0 and batch_size ≥ 1".into()));
    }
    let mut model = model.clone();
    let mut velocity: Vec<Vec<Vec<f32>>> = model
        .layers
        .iter()
        .map(|l| l.params().iter().map(|p| vec![0.0; p.len()]).collect())
        .collect();
    let image_input = model.input_shape.len() == 3;
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        epoch_accuracy: Vec::new(),
        final_accuracy: 0.0,
    };
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut shuffle = rng::stream(cfg.seed, &[rng::label_key("train-shuffle"), epoch as u64]);
        order.shuffle(&mut shuffle);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let inputs: Vec<Tensor> = chunk
                .iter()
                .map(|&i| {
                    let x = &data[i].pixels;
                    let mut r = rng::stream(cfg.seed, &[rng::label_key("train-flip"), epoch as u64, i as u64]);
                    if cfg.flip && image_input && rand::Rng::gen_bool(&mut r, 0.5) {
                        flip_horizontal(x)
                    } else {
                        x.clone()
                    }
                })
                .collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let out = batch_step(&model, inputs, &labels)?;
            if !out.loss.is_finite() {
                return Err(Error::Divergence { epoch, batch: b });
            }
            loss_sum += out.loss;
            correct += out.correct;

            let inv = 1.0 / chunk.len() as f32;
            for (li, layer) in model.layers.iter_mut().enumerate() {
                let n_params = layer.params().len();
                if n_params == 0 {
                    continue;
                }
                let summed = &out.grads[li];
                let is_bn = matches!(layer, Layer::BatchNorm2d(_));
                for ((param, grad), vel) in layer.params_mut().into_iter().zip(summed).zip(&mut velocity[li]) {
                    for ((w, &g), v) in param.data_mut().iter_mut().zip(grad).zip(vel.iter_mut()) {
                        let decay = if is_bn { 0.0 } else { cfg.weight_decay * *w };
                        *v = cfg.momentum * *v + g * inv + decay;
                        *w -= cfg.lr * *v;
                    }
                }
                if let Layer::BatchNorm2d(bn) = layer {
                    let m = out.moments[li].as_ref().expect("batch moments");
                    let first = epoch == 0 && b == 0;
                    set_stats(bn, m, if first { 1.0 } else { cfg.bn_momentum });
                }
            }
            if model.layers.iter().any(|l| l.params().iter().any(|p| !p.is_finite())) {
                return Err(Error::Divergence { epoch, batch: b });
            }
        }
        let acc = correct as f64 / data.len() as f64;
        let mean_loss = loss_sum / data.len() as f64;
        log::info!("epoch {epoch}: loss {mean_loss:.4} train acc {acc:.4}");
        report.epoch_loss.push(mean_loss);
        report.epoch_accuracy.push(acc);
        report.final_accuracy = acc;
    }
    Ok((model, report))
}

/// Fraction of samples whose argmax logit equals the label.
pub fn accuracy(model: &Model, data: &[LabeledImage]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let hits: Vec<bool> = data
        .par_iter()
        .map(|s| model.logits(&s.pixels).map(|y| y.argmax() == s.label))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / data.len() as f64)
}
