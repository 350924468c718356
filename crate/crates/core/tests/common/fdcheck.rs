//! Central finite differences against the analytic backward of every
//! layer, reported as `(check name, relative error)` tables.
//!
//! Error measure: max_i |analytic_i − numeric_i| / max_i |analytic_i|.

use std::collections::BTreeMap;

use attreval::nn::layer::{BatchNorm2d, Conv2d, Layer, Linear, RegionPool, ReluBackward};
use attreval::nn::model::Model;
use attreval::nn::presets::{build, Arch, ArchConfig};
use attreval::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f32 = 1e-3;
pub const TOL: f64 = 1e-3;

pub type Errors = Vec<(String, f64)>;

pub fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap()
}

/// Distinct values spaced 0.02 apart and at least 0.01 away from zero, so
/// no ReLU kink or max-pool tie lies within ±h.
fn spaced_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.02 + 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, r.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().map(|v| v.abs() as f64).fold(0.0, f64::max).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a as f64 - n).abs())
        .fold(0.0, f64::max)
        / scale
}

/// Scalar objective `proj · layer(x)` in f64.
fn objective(layer: &Layer, x: &Tensor, proj: &[f32], tiles: usize) -> f64 {
    let y = layer.forward(x, tiles, 0).unwrap();
    y.data().iter().zip(proj).map(|(&a, &b)| a as f64 * b as f64).sum()
}

fn input_grad_err(layer: &Layer, x: &Tensor, tiles: usize, seed: u64) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward(x, tiles, 0).unwrap();
    let proj = rand_tensor(&mut r, y.shape());
    let analytic = layer.backward(x, &proj, tiles, ReluBackward::Standard);
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut xp = x.clone();
            xp.data_mut()[i] += H;
            let mut xm = x.clone();
            xm.data_mut()[i] -= H;
            (objective(layer, &xp, proj.data(), tiles) - objective(layer, &xm, proj.data(), tiles)) / (2.0 * H as f64)
        })
        .collect();
    rel_err(analytic.data(), &numeric)
}

fn param_grad_errs(layer: &Layer, x: &Tensor, tiles: usize, seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let y = layer.forward(x, tiles, 0).unwrap();
    let proj = rand_tensor(&mut r, y.shape());
    let grads = layer.param_grads(x, &proj, tiles).expect("layer has params");
    grads
        .0
        .iter()
        .enumerate()
        .map(|(p, analytic)| {
            let len = layer.params()[p].len();
            let numeric: Vec<f64> = (0..len)
                .map(|i| {
                    let mut lp = layer.clone();
                    lp.params_mut()[p].data_mut()[i] += H;
                    let mut lm = layer.clone();
                    lm.params_mut()[p].data_mut()[i] -= H;
                    (objective(&lp, x, proj.data(), tiles) - objective(&lm, x, proj.data(), tiles)) / (2.0 * H as f64)
                })
                .collect();
            rel_err(analytic, &numeric)
        })
        .collect()
}

fn layer_errors(out: &mut Errors, name: &str, layer: &Layer, x: &Tensor, tiles: usize, seed: u64) {
    out.push((format!("{name}: input"), input_grad_err(layer, x, tiles, seed)));
    if layer.num_params() > 0 {
        for (p, e) in param_grad_errs(layer, x, tiles, seed + 1).into_iter().enumerate() {
            out.push((format!("{name}: param {p}"), e));
        }
    }
}

fn conv(r: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize, stride: usize, padding: usize, bias: bool) -> Layer {
    Layer::Conv2d(Conv2d {
        weight: rand_tensor(r, &[out_c, in_c, k, k]),
        bias: bias.then(|| rand_tensor(r, &[out_c])),
        stride,
        padding,
    })
}

pub fn conv2d() -> Errors {
    let mut out = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for (k, stride, padding, bias) in [(3, 1, 1, true), (3, 2, 1, false), (1, 1, 0, true), (2, 2, 0, true)] {
        let layer = conv(&mut r, 3, 2, k, stride, padding, bias);
        let x = rand_tensor(&mut r, &[2, 6, 6]);
        layer_errors(&mut out, &format!("conv k{k} s{stride} p{padding}"), &layer, &x, 1, 10);
    }
    out
}

pub fn tiled_conv2d() -> Errors {
    let mut out = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(2);
    let layer = conv(&mut r, 2, 2, 3, 1, 1, true);
    let x = rand_tensor(&mut r, &[2, 8, 8]);
    layer_errors(&mut out, "tiled conv", &layer, &x, 2, 12);
    out
}

pub fn linear() -> Errors {
    let mut out = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let layer = Layer::Linear(Linear {
        weight: rand_tensor(&mut r, &[4, 7]),
        bias: Some(rand_tensor(&mut r, &[4])),
    });
    let x = rand_tensor(&mut r, &[7]);
    layer_errors(&mut out, "linear", &layer, &x, 1, 14);
    out
}

pub fn relu_and_pool() -> Errors {
    let mut out = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let x = spaced_tensor(&mut r, &[2, 6, 6]);
    let cases = [
        ("relu", Layer::ReLU, 1),
        ("maxpool 2/2", Layer::MaxPool2d { kernel: 2, stride: 2 }, 1),
        ("maxpool 3/1", Layer::MaxPool2d { kernel: 3, stride: 1 }, 1),
        ("maxpool tiled", Layer::MaxPool2d { kernel: 2, stride: 1 }, 2),
        ("avgpool 2/2", Layer::AvgPool2d { kernel: 2, stride: 2 }, 1),
        ("avgpool 3/1", Layer::AvgPool2d { kernel: 3, stride: 1 }, 1),
        ("gap", Layer::GlobalAvgPool, 1),
        ("flatten", Layer::Flatten, 1),
    ];
    for (i, (name, layer, tiles)) in cases.iter().enumerate() {
        layer_errors(&mut out, name, layer, &x, *tiles, 16 + i as u64);
    }
    out
}

pub fn batchnorm() -> Errors {
    let mut out = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut bn = BatchNorm2d::identity(3, 1e-5);
    bn.gamma = rand_tensor(&mut r, &[3]);
    bn.beta = rand_tensor(&mut r, &[3]);
    bn.running_mean = rand_tensor(&mut r, &[3]);
    bn.running_var = Tensor::new(vec![3], vec![0.5, 1.5, 2.0]).unwrap();
    let x = rand_tensor(&mut r, &[3, 4, 4]);
    layer_errors(&mut out, "batchnorm", &Layer::BatchNorm2d(bn), &x, 1, 24);
    out
}

pub fn region_pool() -> Errors {
    let mut out = Vec::new();
    let mut r = ChaCha8Rng::seed_from_u64(6);
    let assignment = (0..16).map(|i| if i % 4 < 2 { 0 } else { 1 + (i / 8) as u32 }).collect();
    let layer = Layer::RegionAvgPool(RegionPool {
        regions: 3,
        height: 4,
        width: 4,
        assignment,
    });
    let x = rand_tensor(&mut r, &[2, 4, 4]);
    layer_errors(&mut out, "region pool", &layer, &x, 1, 26);
    out
}

pub fn three_layer_cnn(seed: u64) -> Model {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let layers = vec![
        conv(&mut r, 4, 3, 3, 1, 1, true),
        Layer::ReLU,
        conv(&mut r, 4, 4, 3, 2, 1, true),
        Layer::ReLU,
        Layer::GlobalAvgPool,
        Layer::Linear(Linear {
            weight: rand_tensor(&mut r, &[3, 4]),
            bias: Some(rand_tensor(&mut r, &[3])),
        }),
    ];
    Model::new(layers, BTreeMap::new(), 4, vec![3, 8, 8]).unwrap()
}

/// Smallest distance of any ReLU input from zero and of any max-pool
/// window's winner from its runner-up.
fn kink_margin(model: &Model, x: &Tensor) -> f32 {
    let trace = model.forward(x, true).unwrap();
    let mut margin = f32::INFINITY;
    for (i, layer) in model.layers.iter().enumerate() {
        let a = trace.input(i);
        match layer {
            Layer::ReLU => margin = a.data().iter().fold(margin, |m, v| m.min(v.abs())),
            Layer::MaxPool2d { kernel, stride } => {
                let (c, h, w) = a.chw().unwrap();
                for ch in 0..c {
                    for oi in 0..(h - kernel) / stride + 1 {
                        for oj in 0..(w - kernel) / stride + 1 {
                            let mut vals: Vec<f32> = (0..kernel * kernel)
                                .map(|k| a.data()[(ch * h + oi * stride + k / kernel) * w + oj * stride + k % kernel])
                                .collect();
                            vals.sort_by(|p, q| q.partial_cmp(p).unwrap());
                            // windows of dead ReLUs stay dead under ±h
                            if vals[0] > 0.0 {
                                margin = margin.min(vals[0] - vals[1]);
                            }
                        }
                    }
                }
            }
            _ => {}
        }
    }
    margin
}

/// First input, from successive seeds, whose kinks all lie outside ±4h.
pub fn kink_free_input(model: &Model, shape: &[usize], seed: u64, h: f32) -> Tensor {
    (0..10_000)
        .map(|k| rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed * 10_000 + k), shape))
        .find(|x| kink_margin(model, x) > 4.0 * h)
        .expect("no kink-free input found")
}

fn model_err(model: &Model, x: &Tensor, target: usize, h: f32) -> f64 {
    let trace = model.forward(x, true).unwrap();
    let analytic = model.input_gradient(&trace, target, ReluBackward::Standard).unwrap();
    let numeric = super::fd_input_gradient(model, x, target, h as f64);
    rel_err(analytic.data(), &numeric)
}

pub fn three_layer_cnn_input() -> Errors {
    let model = three_layer_cnn(9);
    (0..5)
        .map(|seed| {
            let x = kink_free_input(&model, &[3, 8, 8], seed, H);
            (format!("3-layer CNN input {seed}"), model_err(&model, &x, 2, H))
        })
        .collect()
}

pub fn tinyvgg_input() -> Errors {
    let cfg = ArchConfig {
        widths: [4, 4, 4, 4, 6, 6, 6, 6],
        classes: 3,
        size: 16,
    };
    [Arch::TinyVggPlain, Arch::TinyVggBn]
        .into_iter()
        .map(|arch| {
            let model = build(arch, &cfg, 7).unwrap();
            // Many more units than the small net: a smaller step keeps a
            // kink-free input easy to find. The f64 reference makes this safe.
            let h = 1e-5;
            let x = kink_free_input(&model, &[3, 16, 16], 1, h);
            (arch.name().to_string(), model_err(&model, &x, 1, h))
        })
        .collect()
}

/// Every check above.
pub fn all() -> Errors {
    [
        conv2d(),
        tiled_conv2d(),
        linear(),
        relu_and_pool(),
        batchnorm(),
        region_pool(),
        three_layer_cnn_input(),
        tinyvgg_input(),
    ]
    .concat()
}
