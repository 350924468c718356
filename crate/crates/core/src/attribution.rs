//! Attribution methods evaluated at an arbitrary tap.
//!
//! Every method explains `f_explain` (the part of a model after the tap)
//! with respect to its input, the tap activation, and returns an `H×W` map
//! at the tap's resolution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrp::{self, LrpPreset};
use crate::nn::layer::ReluBackward;
use crate::nn::model::Model;
use crate::rng;
use crate::tensor::Tensor;

/// Base methods SmoothGrad can average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NoiseBase {
    Gradient,
    GuidedBackprop,
    InputXGradient,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    Gradient,
    GuidedBackprop,
    InputXGradient,
    IntegratedGradients,
    SmoothGrad(NoiseBase),
    GradCam,
    LayerCam,
    Occlusion,
    Rise,
    /// Input×Gradient followed by Gaussian smoothing; `None` uses the
    /// configured kernel size.
    SmoothedIxg(Option<usize>),
    SmoothedIntGrad(Option<usize>),
    Lrp(LrpPreset),
}

impl Method {
    /// Methods whose maps come from (modified) gradients of one forward
    /// pass, as opposed to input perturbation.
    pub fn is_backprop(&self) -> bool {
        !matches!(self, Method::Occlusion | Method::Rise)
    }

    pub fn is_signed(&self) -> bool {
        matches!(
            self,
            Method::InputXGradient
                | Method::IntegratedGradients
                | Method::Occlusion
                | Method::Rise
                | Method::SmoothedIxg(_)
                | Method::SmoothedIntGrad(_)
                | Method::SmoothGrad(NoiseBase::InputXGradient)
                | Method::Lrp(_)
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Gradient => f.write_str("gradient"),
            Method::GuidedBackprop => f.write_str("guidedbp"),
            Method::InputXGradient => f.write_str("ixg"),
            Method::IntegratedGradients => f.write_str("intgrad"),
            Method::SmoothGrad(NoiseBase::Gradient) => f.write_str("smoothgrad"),
            Method::SmoothGrad(NoiseBase::GuidedBackprop) => f.write_str("smoothgrad:guidedbp"),
            Method::SmoothGrad(NoiseBase::InputXGradient) => f.write_str("smoothgrad:ixg"),
            Method::GradCam => f.write_str("gradcam"),
            Method::LayerCam => f.write_str("layercam"),
            Method::Occlusion => f.write_str("occlusion"),
            Method::Rise => f.write_str("rise"),
            Method::SmoothedIxg(None) => f.write_str("s-ixg"),
            Method::SmoothedIxg(Some(k)) => write!(f, "s-ixg:{k}"),
            Method::SmoothedIntGrad(None) => f.write_str("s-intgrad"),
            Method::SmoothedIntGrad(Some(k)) => write!(f, "s-intgrad:{k}"),
            Method::Lrp(p) => write!(f, "lrp-{p}"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (name, arg) = match lower.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (lower.as_str(), None),
        };
        let kernel = |a: Option<&str>| -> Result<Option<usize>> {
            a.map(|k| {
                k.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad smoothing kernel `{k}` in `{s}`")))
            })
            .transpose()
        };
        let no_arg = |m: Method| match arg {
            None => Ok(m),
            Some(_) => Err(Error::Config(format!("method `{name}` takes no argument"))),
        };
        match name {
            "gradient" | "grad" => no_arg(Method::Gradient),
            "guidedbp" | "guided-backprop" | "gbp" => no_arg(Method::GuidedBackprop),
            "ixg" | "input-x-gradient" => no_arg(Method::InputXGradient),
            "intgrad" | "ig" => no_arg(Method::IntegratedGradients),
            "smoothgrad" => match arg {
                None | Some("gradient") => Ok(Method::SmoothGrad(NoiseBase::Gradient)),
                Some("guidedbp") => Ok(Method::SmoothGrad(NoiseBase::GuidedBackprop)),
                Some("ixg") => Ok(Method::SmoothGrad(NoiseBase::InputXGradient)),
                Some(other) => Err(Error::Config(format!("unsupported smoothgrad base `{other}`"))),
            },
            "gradcam" | "grad-cam" => no_arg(Method::GradCam),
            "layercam" | "layer-cam" => no_arg(Method::LayerCam),
            "occlusion" => no_arg(Method::Occlusion),
            "rise" => no_arg(Method::Rise),
            "s-ixg" => Ok(Method::SmoothedIxg(kernel(arg)?)),
            "s-intgrad" => Ok(Method::SmoothedIntGrad(kernel(arg)?)),
            "lrp" => Ok(Method::Lrp(match arg {
                Some(p) => p.parse()?,
                None => LrpPreset::Focus,
            })),
            _ if name.starts_with("lrp-") => {
                let preset = match arg {
                    Some(a) => format!("{}:{a}", &name[4..]),
                    None => name[4..].to_string(),
                };
                Ok(Method::Lrp(preset.parse()?))
            }
            _ => Err(Error::Config(format!("unknown attribution method `{s}`"))),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MethodConfig {
    pub intgrad_steps: usize,
    /// Constant baseline value.
    pub intgrad_baseline: f32,
    pub smoothgrad_samples: usize,
    pub smoothgrad_noise_frac: f32,
    /// Occlusion window; `None` picks 8 at the input tap and 3 elsewhere.
    pub occlusion_k: Option<usize>,
    /// Occlusion stride; `None` picks 4 at the input tap and 1 elsewhere.
    pub occlusion_stride: Option<usize>,
    pub occlusion_baseline: f32,
    pub rise_masks: usize,
    pub rise_grid: usize,
    pub rise_keep_prob: f32,
    pub smooth_kernel: usize,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            intgrad_steps: 32,
            intgrad_baseline: 0.0,
            smoothgrad_samples: 25,
            smoothgrad_noise_frac: 0.15,
            occlusion_k: None,
            occlusion_stride: None,
            occlusion_baseline: 0.0,
            rise_masks: 1000,
            rise_grid: 7,
            rise_keep_prob: 0.5,
            smooth_kernel: 17,
        }
    }
}

impl MethodConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("intgrad_steps", self.intgrad_steps),
            ("smoothgrad_samples", self.smoothgrad_samples),
            ("rise_masks", self.rise_masks),
            ("rise_grid", self.rise_grid),
            ("occlusion_k", self.occlusion_k.unwrap_or(1)),
            ("occlusion_stride", self.occlusion_stride.unwrap_or(1)),
            ("smooth_kernel", self.smooth_kernel),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.rise_keep_prob > 0.0 && self.rise_keep_prob < 1.0) {
            return Err(Error::Config(format!("rise_keep_prob {} outside (0, 1)", self.rise_keep_prob)));
        }
        if self.smooth_kernel % 2 == 0 {
            return Err(Error::Config(format!("smooth_kernel {} must be odd", self.smooth_kernel)));
        }
        if !(self.smoothgrad_noise_frac >= 0.0) {
            return Err(Error::Config("smoothgrad_noise_frac must be ≥ 0".into()));
        }
        Ok(())
    }

    pub fn occlusion_window(&self, at_input: bool) -> (usize, usize) {
        let (k, s) = if at_input { (8, 4) } else { (3, 1) };
        (self.occlusion_k.unwrap_or(k), self.occlusion_stride.unwrap_or(s))
    }
}

/// Per-call context: `seed` drives the stochastic methods (derive it from
/// the global seed and the sample id), `at_input` tells whether the tap is
/// the pixel input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttrContext {
    pub seed: u64,
    pub at_input: bool,
}

/// A signed attribution map at a tap.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    /// `H×W` at the tap's resolution.
    pub values: Tensor,
    pub tap: String,
    pub method: String,
    /// Full-resolution view, when computed.
    pub upsampled: Option<Tensor>,
    /// Positive mass inside the target cell, once scored.
    pub positive_mass_target: Option<f64>,
}

impl AttributionMap {
    pub fn new(values: Tensor, tap: impl Into<String>, method: impl Into<String>) -> Result<Self> {
        if values.ndim() != 2 {
            return Err(Error::InvalidTensor(format!(
                "attribution map must be 2-D, got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::InvalidTensor("attribution map contains non-finite values".into()));
        }
        Ok(AttributionMap {
            values,
            tap: tap.into(),
            method: method.into(),
            upsampled: None,
            positive_mass_target: None,
        })
    }

    /// Upsample to `h×w`, keeping the cells of an `n×n` grid separate.
    pub fn upsample(&mut self, h: usize, w: usize, n: usize) -> Result<&Tensor> {
        self.upsampled = Some(upsample_grid(&self.values, h, w, n)?);
        Ok(self.upsampled.as_ref().unwrap())
    }
}

/// Sum over channels of a `C×H×W` tensor.
pub fn channel_sum(raw: &Tensor) -> Result<Tensor> {
    let (c, h, w) = raw.chw()?;
    let mut out = vec![0.0f32; h * w];
    for ch in 0..c {
        for (o, &v) in out.iter_mut().zip(raw.channel(ch)) {
            *o += v;
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Bilinear resize with half-pixel centres: output `(u, v)` samples the
/// input at `((u + 0.5)·H'/H − 0.5, (v + 0.5)·W'/W − 0.5)`, clamped to the
/// valid range.
pub fn upsample_bilinear(map: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (ih, iw) = map.hw()?;
    if h == 0 || w == 0 {
        return Err(Error::DimensionMismatch(format!("upsample target {h}×{w}")));
    }
    if (ih, iw) == (h, w) {
        return Ok(map.clone());
    }
    let src = map.data();
    let coords = |out: usize, inn: usize| -> Vec<(usize, usize, f32)> {
        (0..out)
            .map(|u| {
                let c = ((u as f64 + 0.5) * inn as f64 / out as f64 - 0.5).clamp(0.0, (inn - 1) as f64);
                let lo = c.floor() as usize;
                let hi = (lo + 1).min(inn - 1);
                (lo, hi, (c - lo as f64) as f32)
            })
            .collect()
    };
    let ys = coords(h, ih);
    let xs = coords(w, iw);
    let mut out = Vec::with_capacity(h * w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * iw + x0] * (1.0 - fx) + src[y0 * iw + x1] * fx;
            let bot = src[y1 * iw + x0] * (1.0 - fx) + src[y1 * iw + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Upsample each cell of an `n×n` grid on its own, so no value crosses a
/// cell border. Falls back to a plain resize when the map does not split
/// evenly into cells.
pub fn upsample_grid(map: &Tensor, h: usize, w: usize, n: usize) -> Result<Tensor> {
    let (ih, iw) = map.hw()?;
    if n <= 1 || ih % n != 0 || iw % n != 0 || h % n != 0 || w % n != 0 {
        return upsample_bilinear(map, h, w);
    }
    let (ch, cw, oh, ow) = (ih / n, iw / n, h / n, w / n);
    let mut out = vec![0.0f32; h * w];
    for r in 0..n {
        for c in 0..n {
            let cell: Vec<f32> = (0..ch)
                .flat_map(|y| map.data()[(r * ch + y) * iw + c * cw..(r * ch + y) * iw + (c + 1) * cw].iter().copied())
                .collect();
            let up = upsample_bilinear(&Tensor::from_parts(vec![ch, cw], cell), oh, ow)?;
            for y in 0..oh {
                out[(r * oh + y) * w + c * ow..(r * oh + y) * w + (c + 1) * ow]
                    .copy_from_slice(&up.data()[y * ow..(y + 1) * ow]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

/// Normalized `K×K` Gaussian with σ = K/4, row-major.
pub fn gaussian_kernel(k: usize) -> Result<Vec<f64>> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::Config(format!("smoothing kernel size {k} must be odd")));
    }
    let sigma = k as f64 / 4.0;
    let r = (k / 2) as isize;
    let mut w: Vec<f64> = (-r..=r)
        .flat_map(|i| (-r..=r).map(move |j| (-((i * i + j * j) as f64) / (2.0 * sigma * sigma)).exp()))
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Ok(w)
}

/// Same-size 2-D convolution with the normalized Gaussian of size `k`,
/// zero padding.
pub fn smooth_gaussian(map: &Tensor, k: usize) -> Result<Tensor> {
    let kernel = gaussian_kernel(k)?;
    let (h, w) = map.hw()?;
    if k == 1 {
        return Ok(map.clone());
    }
    let r = (k / 2) as isize;
    let src = map.data();
    let mut out = vec![0.0f32; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0f64;
            for i in -r..=r {
                let yy = y + i;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for j in -r..=r {
                    let xx = x + j;
                    if xx < 0 || xx >= w as isize {
                        continue;
                    }
                    acc += kernel[((i + r) * k as isize + j + r) as usize] * src[(yy * w as isize + xx) as usize] as f64;
                }
            }
            out[(y * w as isize + x) as usize] = acc as f32;
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out))
}

fn abs_channel_sum(raw: &Tensor) -> Result<Tensor> {
    channel_sum(&raw.map(f32::abs))
}

fn grad(f: &Model, x: &Tensor, target: usize, relu: ReluBackward) -> Result<Tensor> {
    let trace = f.forward(x, true)?;
    f.input_gradient(&trace, target, relu)
}

pub fn gradient_attr(f: &Model, x: &Tensor, target: usize) -> Result<Tensor> {
    abs_channel_sum(&grad(f, x, target, ReluBackward::Standard)?)
}

pub fn guided_backprop_attr(f: &Model, x: &Tensor, target: usize) -> Result<Tensor> {
    abs_channel_sum(&grad(f, x, target, ReluBackward::Guided)?)
}

pub fn ixg_attr(f: &Model, x: &Tensor, target: usize) -> Result<Tensor> {
    let g = grad(f, x, target, ReluBackward::Standard)?;
    channel_sum(&x.zip_map(&g, |a, b| a * b)?)
}

pub fn intgrad_attr(f: &Model, x: &Tensor, target: usize, steps: usize, baseline: f32) -> Result<Tensor> {
    Ok(intgrad_multi(f, x, &[target], steps, baseline)?.remove(0))
}

/// Midpoint Riemann approximation along the straight path from the
/// constant baseline; one forward pass per step shared by all targets.
fn intgrad_multi(f: &Model, x: &Tensor, targets: &[usize], steps: usize, baseline: f32) -> Result<Vec<Tensor>> {
    if steps == 0 {
        return Err(Error::Config("intgrad steps must be at least 1".into()));
    }
    let diff = x.map(|v| v - baseline);
    let mut acc: Vec<Tensor> = targets.iter().map(|_| Tensor::zeros(x.shape())).collect();
    for k in 0..steps {
        let alpha = (k as f32 + 0.5) / steps as f32;
        let xk = diff.map(|d| baseline + alpha * d);
        let trace = f.forward(&xk, true)?;
        for (a, &t) in acc.iter_mut().zip(targets) {
            a.add_assign(&f.input_gradient(&trace, t, ReluBackward::Standard)?);
        }
    }
    let inv = 1.0 / steps as f32;
    acc.iter()
        .map(|a| channel_sum(&diff.zip_map(a, |d, g| d * g * inv)?))
        .collect()
}

fn noisy_inputs(x: &Tensor, n: usize, frac: f32, seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::Config("smoothgrad samples must be at least 1".into()));
    }
    let (lo, hi) = x.min_max();
    let std = frac * (hi - lo);
    Ok((0..n as u64)
        .map(|k| {
            if std == 0.0 {
                return x.clone();
            }
            let mut r = rng::stream(seed, &[rng::label_key("smoothgrad"), k]);
            let normal = Normal::new(0.0f32, std).expect("finite std");
            let data = x.data().iter().map(|&v| v + normal.sample(&mut r)).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        })
        .collect())
}

fn noise_base_map(f: &Model, x: &Tensor, trace_target: usize, base: NoiseBase) -> Result<Tensor> {
    match base {
        NoiseBase::Gradient => gradient_attr(f, x, trace_target),
        NoiseBase::GuidedBackprop => guided_backprop_attr(f, x, trace_target),
        NoiseBase::InputXGradient => ixg_attr(f, x, trace_target),
    }
}

pub fn smoothgrad_attr(
    f: &Model,
    x: &Tensor,
    target: usize,
    base: NoiseBase,
    n_samples: usize,
    noise_frac: f32,
    seed: u64,
) -> Result<Tensor> {
    let inputs = noisy_inputs(x, n_samples, noise_frac, seed)?;
    let mut acc: Option<Tensor> = None;
    for xi in &inputs {
        let m = noise_base_map(f, xi, target, base)?;
        match &mut acc {
            Some(a) => a.add_assign(&m),
            None => acc = Some(m),
        }
    }
    Ok(acc.unwrap().scale(1.0 / n_samples as f32))
}

fn cam(act: &Tensor, g: &Tensor, layer: bool) -> Result<Tensor> {
    let (c, h, w) = act.chw().map_err(|_| {
        Error::DimensionMismatch(format!("CAM methods need a spatial tap, got {:?}", act.shape()))
    })?;
    let mut out = vec![0.0f32; h * w];
    for ch in 0..c {
        let a = act.channel(ch);
        let gc = g.channel(ch);
        if layer {
            for ((o, &av), &gv) in out.iter_mut().zip(a).zip(gc) {
                *o += gv.max(0.0) * av;
            }
        } else {
            let alpha = gc.iter().sum::<f32>() / (h * w) as f32;
            for (o, &av) in out.iter_mut().zip(a) {
                *o += alpha * av;
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w], out.into_iter().map(|v| v.max(0.0)).collect()))
}

pub fn gradcam_attr(f: &Model, x: &Tensor, target: usize) -> Result<Tensor> {
    cam(x, &grad(f, x, target, ReluBackward::Standard)?, false)
}

pub fn layercam_attr(f: &Model, x: &Tensor, target: usize) -> Result<Tensor> {
    cam(x, &grad(f, x, target, ReluBackward::Standard)?, true)
}

/// Window positions `0, s, 2s, …` that fit inside `len`.
fn window_starts(len: usize, k: usize, s: usize) -> Vec<usize> {
    if k > len {
        return Vec::new();
    }
    (0..=len - k).step_by(s).collect()
}

/// Score drops of every occlusion window, in row-major window order:
/// `((top, left), [Δ per target])`.
pub fn occlusion_deltas(
    f: &Model,
    x: &Tensor,
    targets: &[usize],
    k: usize,
    stride: usize,
    baseline: f32,
) -> Result<Vec<((usize, usize), Vec<f32>)>> {
    let (c, h, w) = x.chw()?;
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(Error::Config(format!("occlusion window {k} / stride {stride} does not fit {h}×{w}")));
    }
    if stride > k {
        log::warn!("occlusion stride {stride} exceeds window {k}; uncovered positions get 0");
    }
    let base = f.logits(x)?;
    for &t in targets {
        if t >= base.len() {
            return Err(Error::TargetOutOfRange {
                target: t,
                outputs: base.len(),
            });
        }
    }
    let mut out = Vec::new();
    for &top in &window_starts(h, k, stride) {
        for &left in &window_starts(w, k, stride) {
            let mut xo = x.clone();
            let d = xo.data_mut();
            for ch in 0..c {
                for y in top..top + k {
                    d[(ch * h + y) * w + left..(ch * h + y) * w + left + k].fill(baseline);
                }
            }
            let y = f.logits(&xo)?;
            out.push(((top, left), targets.iter().map(|&t| base.data()[t] - y.data()[t]).collect()));
        }
    }
    Ok(out)
}

fn occlusion_multi(f: &Model, x: &Tensor, targets: &[usize], k: usize, stride: usize, baseline: f32) -> Result<Vec<Tensor>> {
    let (_, h, w) = x.chw()?;
    let deltas = occlusion_deltas(f, x, targets, k, stride, baseline)?;
    let mut cover = vec![0u32; h * w];
    for &((top, left), _) in &deltas {
        for y in top..top + k {
            for c in &mut cover[y * w + left..y * w + left + k] {
                *c += 1;
            }
        }
    }
    Ok((0..targets.len())
        .map(|ti| {
            let mut sum = vec![0.0f32; h * w];
            for ((top, left), d) in &deltas {
                for y in *top..top + k {
                    for s in &mut sum[y * w + left..y * w + left + k] {
                        *s += d[ti];
                    }
                }
            }
            let data = sum
                .iter()
                .zip(&cover)
                .map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f32 })
                .collect();
            Tensor::from_parts(vec![h, w], data)
        })
        .collect())
}

pub fn occlusion_attr(f: &Model, x: &Tensor, target: usize, k: usize, stride: usize, baseline: f32) -> Result<Tensor> {
    Ok(occlusion_multi(f, x, &[target], k, stride, baseline)?.remove(0))
}

/// One RISE mask of size `h×w`: an `grid×grid` Bernoulli(`p`) pattern,
/// bilinearly resized to `(h + cell)×(w + cell)` and cropped at a random
/// offset in `[0, cell)`.
pub fn rise_mask(h: usize, w: usize, grid: usize, p: f32, seed: u64, m: u64) -> Result<Tensor> {
    let mut r = rng::stream(seed, &[rng::label_key("rise"), m]);
    let cell_h = h.div_ceil(grid);
    let cell_w = w.div_ceil(grid);
    let coarse: Vec<f32> = (0..grid * grid).map(|_| if r.gen::<f32>() < p { 1.0 } else { 0.0 }).collect();
    let up = upsample_bilinear(&Tensor::from_parts(vec![grid, grid], coarse), h + cell_h, w + cell_w)?;
    let dy = r.gen_range(0..cell_h);
    let dx = r.gen_range(0..cell_w);
    let uw = w + cell_w;
    let data = (0..h)
        .flat_map(|y| up.data()[(y + dy) * uw + dx..(y + dy) * uw + dx + w].iter().copied())
        .collect();
    Ok(Tensor::from_parts(vec![h, w], data))
}

fn rise_multi(f: &Model, x: &Tensor, targets: &[usize], masks: usize, grid: usize, p: f32, seed: u64) -> Result<Vec<Tensor>> {
    if masks == 0 || grid == 0 || !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("invalid RISE parameters M={masks} h={grid} p={p}")));
    }
    let (c, h, w) = x.chw()?;
    let mut acc: Vec<Vec<f64>> = targets.iter().map(|_| vec![0.0; h * w]).collect();
    for m in 0..masks as u64 {
        let mask = rise_mask(h, w, grid, p, seed, m)?;
        let mut xm = x.clone();
        for ch in 0..c {
            for (v, &mv) in xm.data_mut()[ch * h * w..(ch + 1) * h * w].iter_mut().zip(mask.data()) {
                *v *= mv;
            }
        }
        let y = f.logits(&xm)?;
        for (a, &t) in acc.iter_mut().zip(targets) {
            let yt = *y.data().get(t).ok_or(Error::TargetOutOfRange {
                target: t,
                outputs: y.len(),
            })? as f64;
            for (av, &mv) in a.iter_mut().zip(mask.data()) {
                *av += mv as f64 * yt;
            }
        }
    }
    let norm = 1.0 / (masks as f64 * p as f64);
    Ok(acc
        .into_iter()
        .map(|a| Tensor::from_parts(vec![h, w], a.into_iter().map(|v| (v * norm) as f32).collect()))
        .collect())
}

pub fn rise_attr(f: &Model, x: &Tensor, target: usize, masks: usize, grid: usize, p: f32, seed: u64) -> Result<Tensor> {
    Ok(rise_multi(f, x, &[target], masks, grid, p, seed)?.remove(0))
}

/// Compute several methods for several targets on one tap input, sharing
/// forward passes and gradients. Result is indexed `[method][target]`.
pub fn attribute_targets(
    f: &Model,
    x: &Tensor,
    targets: &[usize],
    methods: &[Method],
    cfg: &MethodConfig,
    ctx: AttrContext,
) -> Result<Vec<Vec<Tensor>>> {
    cfg.validate()?;
    let needs = |pred: &dyn Fn(&Method) -> bool| methods.iter().any(pred);

    let grads: Option<Vec<Tensor>> = if needs(&|m| {
        matches!(
            m,
            Method::Gradient | Method::InputXGradient | Method::GradCam | Method::LayerCam | Method::SmoothedIxg(_)
        )
    }) {
        let trace = f.forward(x, true)?;
        Some(
            targets
                .iter()
                .map(|&t| f.input_gradient(&trace, t, ReluBackward::Standard))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };
    let ixg = |g: &Tensor| -> Result<Tensor> { channel_sum(&x.zip_map(g, |a, b| a * b)?) };
    let intgrad: Option<Vec<Tensor>> =
        if needs(&|m| matches!(m, Method::IntegratedGradients | Method::SmoothedIntGrad(_))) {
            Some(intgrad_multi(f, x, targets, cfg.intgrad_steps, cfg.intgrad_baseline)?)
        } else {
            None
        };

    let mut out = Vec::with_capacity(methods.len());
    for method in methods {
        let maps: Vec<Tensor> = match method {
            Method::Gradient => grads.as_ref().unwrap().iter().map(abs_channel_sum).collect::<Result<_>>()?,
            Method::InputXGradient => grads.as_ref().unwrap().iter().map(ixg).collect::<Result<_>>()?,
            Method::GradCam => grads.as_ref().unwrap().iter().map(|g| cam(x, g, false)).collect::<Result<_>>()?,
            Method::LayerCam => grads.as_ref().unwrap().iter().map(|g| cam(x, g, true)).collect::<Result<_>>()?,
            Method::SmoothedIxg(k) => {
                let k = k.unwrap_or(cfg.smooth_kernel);
                grads
                    .as_ref()
                    .unwrap()
                    .iter()
                    .map(|g| smooth_gaussian(&ixg(g)?, k))
                    .collect::<Result<_>>()?
            }
            Method::IntegratedGradients => intgrad.clone().unwrap(),
            Method::SmoothedIntGrad(k) => {
                let k = k.unwrap_or(cfg.smooth_kernel);
                intgrad
                    .as_ref()
                    .unwrap()
                    .iter()
                    .map(|m| smooth_gaussian(m, k))
                    .collect::<Result<_>>()?
            }
            Method::GuidedBackprop => {
                let trace = f.forward(x, true)?;
                targets
                    .iter()
                    .map(|&t| abs_channel_sum(&f.input_gradient(&trace, t, ReluBackward::Guided)?))
                    .collect::<Result<_>>()?
            }
            Method::SmoothGrad(base) => {
                let inputs = noisy_inputs(x, cfg.smoothgrad_samples, cfg.smoothgrad_noise_frac, ctx.seed)?;
                let mut acc: Vec<Tensor> = Vec::new();
                for xi in &inputs {
                    let trace = f.forward(xi, true)?;
                    for (ti, &t) in targets.iter().enumerate() {
                        let relu = if *base == NoiseBase::GuidedBackprop {
                            ReluBackward::Guided
                        } else {
                            ReluBackward::Standard
                        };
                        let g = f.input_gradient(&trace, t, relu)?;
                        let m = match base {
                            NoiseBase::InputXGradient => channel_sum(&xi.zip_map(&g, |a, b| a * b)?)?,
                            _ => abs_channel_sum(&g)?,
                        };
                        match acc.get_mut(ti) {
                            Some(a) => a.add_assign(&m),
                            None => acc.push(m),
                        }
                    }
                }
                let inv = 1.0 / inputs.len() as f32;
                acc.iter().map(|a| a.scale(inv)).collect()
            }
            Method::Occlusion => {
                let (k, s) = cfg.occlusion_window(ctx.at_input);
                occlusion_multi(f, x, targets, k, s, cfg.occlusion_baseline)?
            }
            Method::Rise => rise_multi(f, x, targets, cfg.rise_masks, cfg.rise_grid, cfg.rise_keep_prob, ctx.seed)?,
            Method::Lrp(preset) => {
                let config = preset.config(f, ctx.at_input)?;
                targets
                    .iter()
                    .map(|&t| lrp::lrp_attr(f, x, t, &config))
                    .collect::<Result<_>>()?
            }
        };
        for m in &maps {
            if !m.is_finite() {
                return Err(Error::InvalidTensor(format!("{method} produced non-finite values")));
            }
        }
        out.push(maps);
    }
    Ok(out)
}

/// Single method, single target.
pub fn attribute(f: &Model, x: &Tensor, target: usize, method: &Method, cfg: &MethodConfig, ctx: AttrContext) -> Result<Tensor> {
    Ok(attribute_targets(f, x, &[target], std::slice::from_ref(method), cfg, ctx)?
        .remove(0)
        .remove(0))
}

// ATMP files: b"ATMP" | u64 LE header length | JSON header | f32 LE payload.

pub const MAP_MAGIC: &[u8; 4] = b"ATMP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapHeader {
    pub method: String,
    pub tap: String,
    pub shape: Vec<usize>,
    pub sample_id: String,
}

pub fn map_to_bytes(values: &Tensor, header: &MapHeader) -> Result<Vec<u8>> {
    if header.shape != values.shape() {
        return Err(Error::DimensionMismatch(format!(
            "header shape {:?} vs map {:?}",
            header.shape,
            values.shape()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * values.len());
    out.extend_from_slice(MAP_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in values.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn map_from_bytes(bytes: &[u8]) -> Result<(MapHeader, Tensor)> {
    if bytes.len() < 4 || &bytes[..4] != MAP_MAGIC {
        return Err(Error::BadMagic {
            what: "attribution map",
            expected: "ATMP",
        });
    }
    if bytes.len() < 12 {
        return Err(Error::Truncated {
            what: "attribution map preamble",
            needed: 12,
            found: bytes.len(),
        });
    }
    let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let start = 12usize.saturating_add(hlen);
    if bytes.len() < start {
        return Err(Error::Truncated {
            what: "attribution map header",
            needed: start,
            found: bytes.len(),
        });
    }
    let header: MapHeader = serde_json::from_slice(&bytes[12..start])?;
    let n: usize = header.shape.iter().product();
    let needed = start + 4 * n;
    if bytes.len() != needed {
        return Err(Error::Truncated {
            what: "attribution map payload",
            needed,
            found: bytes.len(),
        });
    }
    let data = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Tensor::new(header.shape.clone(), data)?;
    Ok((header, values))
}

pub fn save_map(path: impl AsRef<Path>, values: &Tensor, header: &MapHeader) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, map_to_bytes(values, header)?).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: impl AsRef<Path>) -> Result<(MapHeader, Tensor)> {
    let path = path.as_ref();
    map_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for name in [
            "gradient",
            "guidedbp",
            "ixg",
            "intgrad",
            "smoothgrad",
            "smoothgrad:ixg",
            "gradcam",
            "layercam",
            "occlusion",
            "rise",
            "s-ixg",
            "s-ixg:17",
            "s-intgrad:5",
            "lrp-focus",
            "lrp-composite:0.25",
            "lrp-zplus",
        ] {
            let m: Method = name.parse().unwrap();
            assert_eq!(m.to_string(), name);
        }
        assert!("nope".parse::<Method>().is_err());
    }

    #[test]
    fn upsample_two_by_two_table() {
        // Half-pixel centres: output coordinates map to −0.25, 0.25, 0.75, 1.25
        // and are clamped to [0, 1].
        let m = Tensor::new(vec![2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let up = upsample_bilinear(&m, 4, 4).unwrap();
        let row = |r: f32| [r, r + 0.25, r + 0.75, r + 1.0];
        let expected: Vec<f32> = [0.0, 0.5, 1.5, 2.0].iter().flat_map(|&r| row(r)).collect();
        assert_eq!(up.data(), &expected[..]);
    }

    #[test]
    fn grid_upsampling_keeps_cells_apart() {
        let mut m = Tensor::zeros(&[4, 4]);
        m.data_mut()[0] = 1.0; // top-left cell only
        let up = upsample_grid(&m, 8, 8, 2).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if y >= 4 || x >= 4 {
                    assert_eq!(up.data()[y * 8 + x], 0.0);
                }
            }
        }
    }

    #[test]
    fn gaussian_kernel_center() {
        let k = gaussian_kernel(5).unwrap();
        let s: f64 = k.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        let sigma2 = 1.25f64 * 1.25;
        let norm: f64 = (-2..=2)
            .flat_map(|i: i32| (-2..=2).map(move |j: i32| (-((i * i + j * j) as f64) / (2.0 * sigma2)).exp()))
            .sum();
        assert!((k[12] - 1.0 / norm).abs() < 1e-12);
        assert!(gaussian_kernel(4).is_err());
    }

    #[test]
    fn map_file_round_trip() {
        let t = Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-7, -0.0]).unwrap();
        let h = MapHeader {
            method: "ixg".into(),
            tap: "input".into(),
            shape: vec![2, 3],
            sample_id: "7".into(),
        };
        let bytes = map_to_bytes(&t, &h).unwrap();
        let (h2, t2) = map_from_bytes(&bytes).unwrap();
        assert_eq!(h, h2);
        assert_eq!(t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), t2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(matches!(map_from_bytes(b""), Err(Error::BadMagic { .. })));
        assert!(matches!(map_from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
    }
}
