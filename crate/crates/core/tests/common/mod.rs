//! Scalar f64 reference implementation of the layer set, written with plain
//! index loops and no shared code with the library kernels.

#![allow(dead_code)]

pub mod fdcheck;

use attreval::nn::layer::Layer;
use attreval::nn::model::Model;
use attreval::Tensor;

#[derive(Clone, Debug)]
pub struct Arr {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Arr {
    pub fn from_tensor(t: &Tensor) -> Self {
        Arr {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|&v| v as f64).collect(),
        }
    }
}

fn tile_forward(layer: &Layer, x: &Arr, n: usize) -> Arr {
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (th, tw) = (h / n, w / n);
    let mut outs = Vec::new();
    for tr in 0..n {
        for tc in 0..n {
            let mut data = vec![0.0; c * th * tw];
            for ch in 0..c {
                for i in 0..th {
                    for j in 0..tw {
                        data[(ch * th + i) * tw + j] = x.data[(ch * h + tr * th + i) * w + tc * tw + j];
                    }
                }
            }
            outs.push(layer_forward(layer, &Arr { shape: vec![c, th, tw], data }, 1));
        }
    }
    let (oc, oh, ow) = (outs[0].shape[0], outs[0].shape[1], outs[0].shape[2]);
    let mut data = vec![0.0; oc * oh * n * ow * n];
    for tr in 0..n {
        for tc in 0..n {
            let t = &outs[tr * n + tc];
            for ch in 0..oc {
                for i in 0..oh {
                    for j in 0..ow {
                        data[(ch * oh * n + tr * oh + i) * ow * n + tc * ow + j] = t.data[(ch * oh + i) * ow + j];
                    }
                }
            }
        }
    }
    Arr {
        shape: vec![oc, oh * n, ow * n],
        data,
    }
}

pub fn layer_forward(layer: &Layer, x: &Arr, tiles: usize) -> Arr {
    if tiles > 1 && layer.is_spatial() {
        return tile_forward(layer, x, tiles);
    }
    match layer {
        Layer::Conv2d(conv) => {
            let ws = conv.weight.shape();
            let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
            let (h, w) = (x.shape[1], x.shape[2]);
            let (s, p) = (conv.stride as isize, conv.padding as isize);
            let oh = ((h as isize + 2 * p - kh as isize) / s + 1) as usize;
            let ow = ((w as isize + 2 * p - kw as isize) / s + 1) as usize;
            let wd = conv.weight.data();
            let mut out = vec![0.0; oc * oh * ow];
            for o in 0..oc {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = conv.bias.as_ref().map_or(0.0, |b| b.data()[o] as f64);
                        for c in 0..ic {
                            for a in 0..kh {
                                for b in 0..kw {
                                    let y = i as isize * s - p + a as isize;
                                    let xx = j as isize * s - p + b as isize;
                                    if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                        continue;
                                    }
                                    acc += wd[((o * ic + c) * kh + a) * kw + b] as f64
                                        * x.data[(c * h + y as usize) * w + xx as usize];
                                }
                            }
                        }
                        out[(o * oh + i) * ow + j] = acc;
                    }
                }
            }
            Arr {
                shape: vec![oc, oh, ow],
                data: out,
            }
        }
        Layer::Linear(l) => {
            let (o, i) = (l.weight.shape()[0], l.weight.shape()[1]);
            let data = (0..o)
                .map(|r| {
                    let b = l.bias.as_ref().map_or(0.0, |b| b.data()[r] as f64);
                    b + (0..i).map(|k| l.weight.data()[r * i + k] as f64 * x.data[k]).sum::<f64>()
                })
                .collect();
            Arr { shape: vec![o], data }
        }
        Layer::ReLU => Arr {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
        },
        Layer::MaxPool2d { kernel, stride } | Layer::AvgPool2d { kernel, stride } => {
            let is_max = matches!(layer, Layer::MaxPool2d { .. });
            let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
            let (oh, ow) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        let mut s = 0.0;
                        for a in 0..*kernel {
                            for b in 0..*kernel {
                                let v = x.data[(ch * h + i * stride + a) * w + j * stride + b];
                                m = m.max(v);
                                s += v;
                            }
                        }
                        out[(ch * oh + i) * ow + j] = if is_max { m } else { s / (kernel * kernel) as f64 };
                    }
                }
            }
            Arr {
                shape: vec![c, oh, ow],
                data: out,
            }
        }
        Layer::GlobalAvgPool => {
            let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
            let data = (0..c)
                .map(|ch| x.data[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
                .collect();
            Arr { shape: vec![c], data }
        }
        Layer::BatchNorm2d(bn) => {
            let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
            let mut data = x.data.clone();
            for ch in 0..c {
                let g = bn.gamma.data()[ch] as f64;
                let b = bn.beta.data()[ch] as f64;
                let m = bn.running_mean.data()[ch] as f64;
                let v = bn.running_var.data()[ch] as f64;
                let eps = bn.eps as f64;
                for d in &mut data[ch * h * w..(ch + 1) * h * w] {
                    *d = g * (*d - m) / (v + eps).sqrt() + b;
                }
            }
            Arr {
                shape: x.shape.clone(),
                data,
            }
        }
        Layer::Flatten => Arr {
            shape: vec![x.data.len()],
            data: x.data.clone(),
        },
        Layer::RegionAvgPool(p) => {
            let c = x.shape[0];
            let plane = p.height * p.width;
            let mut data = vec![0.0; p.regions * c];
            for r in 0..p.regions {
                let members: Vec<usize> = (0..plane).filter(|&q| p.assignment[q] as usize == r).collect();
                for ch in 0..c {
                    let s: f64 = members.iter().map(|&q| x.data[ch * plane + q]).sum();
                    data[r * c + ch] = s / members.len() as f64;
                }
            }
            Arr {
                shape: vec![p.regions * c],
                data,
            }
        }
    }
}

pub fn model_forward(model: &Model, x: &Arr) -> Arr {
    let mut a = x.clone();
    for layer in &model.layers {
        a = layer_forward(layer, &a, model.tiles);
    }
    a
}

/// Central differences of logit `target` on the f64 reference.
pub fn fd_input_gradient(model: &Model, x: &Tensor, target: usize, h: f64) -> Vec<f64> {
    let base = Arr::from_tensor(x);
    (0..base.data.len())
        .map(|i| {
            let mut p = base.clone();
            p.data[i] += h;
            let mut m = base.clone();
            m.data[i] -= h;
            (model_forward(model, &p).data[target] - model_forward(model, &m).data[target]) / (2.0 * h)
        })
        .collect()
}
