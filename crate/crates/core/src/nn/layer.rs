use serde::{Deserialize, Serialize};

use super::ops::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    /// `out×in×kh×kw`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn geom(&self) -> ConvGeom {
        let s = self.weight.shape();
        ConvGeom {
            kh: s[2],
            kw: s[3],
            stride: self.stride,
            padding: self.padding,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out×in`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Inference-mode batch normalization over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f32,
}

impl BatchNorm2d {
    pub fn identity(channels: usize, eps: f32) -> Self {
        BatchNorm2d {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            eps,
        }
    }

    /// Per-channel `(scale, shift)` so that `bn(x) = scale·x + shift`.
    pub fn affine(&self) -> (Vec<f32>, Vec<f32>) {
        let c = self.gamma.len();
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for i in 0..c {
            let s = self.gamma.data()[i] / (self.running_var.data()[i] + self.eps).sqrt();
            scale.push(s);
            shift.push(self.beta.data()[i] - self.running_mean.data()[i] * s);
        }
        (scale, shift)
    }
}

/// Average pooling over arbitrary spatial regions: every position of an
/// `H×W` map is assigned to one region, and the output holds the per-region,
/// per-channel mean, region-major (`out[r·C + c]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionPool {
    pub regions: usize,
    pub height: usize,
    pub width: usize,
    pub assignment: Vec<u32>,
}

impl RegionPool {
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.regions];
        for &r in &self.assignment {
            counts[r as usize] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv2d(Conv2d),
    Linear(Linear),
    ReLU,
    MaxPool2d { kernel: usize, stride: usize },
    AvgPool2d { kernel: usize, stride: usize },
    GlobalAvgPool,
    BatchNorm2d(BatchNorm2d),
    Flatten,
    RegionAvgPool(RegionPool),
}

/// How a ReLU routes gradients on the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ReluBackward {
    #[default]
    Standard,
    /// Pass gradient only where the forward input and the incoming gradient
    /// are both positive.
    Guided,
}

/// Parameter gradients of one layer, in the layer's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads(pub Vec<Vec<f32>>);

impl Layer {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d(_) => "conv2d",
            Layer::Linear(_) => "linear",
            Layer::ReLU => "relu",
            Layer::MaxPool2d { .. } => "maxpool2d",
            Layer::AvgPool2d { .. } => "avgpool2d",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::BatchNorm2d(_) => "batchnorm2d",
            Layer::Flatten => "flatten",
            Layer::RegionAvgPool(_) => "region_avg_pool",
        }
    }

    /// Whether the layer maps a C×H×W tensor to a C'×H'×W' tensor.
    pub fn is_spatial(&self) -> bool {
        !matches!(
            self,
            Layer::Linear(_) | Layer::GlobalAvgPool | Layer::Flatten | Layer::RegionAvgPool(_)
        )
    }

    /// `(kernel, stride, padding)` along one spatial axis, for receptive
    /// field arithmetic. `None` for non-spatial layers.
    pub fn spatial_geometry(&self) -> Option<(usize, usize, usize)> {
        match self {
            Layer::Conv2d(c) => Some((c.weight.shape()[2], c.stride, c.padding)),
            Layer::MaxPool2d { kernel, stride } | Layer::AvgPool2d { kernel, stride } => {
                Some((*kernel, *stride, 0))
            }
            Layer::ReLU | Layer::BatchNorm2d(_) => Some((1, 1, 0)),
            _ => None,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Trainable parameters in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&c.weight).chain(c.bias.as_ref()).collect(),
            Layer::Linear(l) => std::iter::once(&l.weight).chain(l.bias.as_ref()).collect(),
            Layer::BatchNorm2d(b) => vec![&b.gamma, &b.beta],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Conv2d(c) => std::iter::once(&mut c.weight).chain(c.bias.as_mut()).collect(),
            Layer::Linear(l) => std::iter::once(&mut l.weight).chain(l.bias.as_mut()).collect(),
            Layer::BatchNorm2d(b) => vec![&mut b.gamma, &mut b.beta],
            _ => Vec::new(),
        }
    }

    /// Validate parameter shapes against each other and the layer's own
    /// invariants.
    pub fn validate(&self, index: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidModel(format!("layer {index} ({}): {msg}", self.kind())));
        match self {
            Layer::Conv2d(c) => {
                if c.weight.ndim() != 4 {
                    return bad(format!("weight must be 4-D, got {:?}", c.weight.shape()));
                }
                if let Some(b) = &c.bias {
                    if b.shape() != [c.out_channels()] {
                        return bad(format!("bias shape {:?}", b.shape()));
                    }
                }
                if c.stride == 0 {
                    return bad("stride must be positive".into());
                }
            }
            Layer::Linear(l) => {
                if l.weight.ndim() != 2 {
                    return bad(format!("weight must be 2-D, got {:?}", l.weight.shape()));
                }
                if let Some(b) = &l.bias {
                    if b.shape() != [l.out_features()] {
                        return bad(format!("bias shape {:?}", b.shape()));
                    }
                }
            }
            Layer::BatchNorm2d(b) => {
                let c = b.gamma.len();
                if [&b.beta, &b.running_mean, &b.running_var].iter().any(|t| t.shape() != [c]) {
                    return bad("parameter lengths differ".into());
                }
                if b.running_var.data().iter().any(|&v| v < 0.0) {
                    return bad("running_var must be non-negative".into());
                }
                if b.eps <= 0.0 {
                    return bad("eps must be positive".into());
                }
            }
            Layer::MaxPool2d { kernel, stride } | Layer::AvgPool2d { kernel, stride } => {
                if *kernel == 0 || *stride == 0 {
                    return bad("kernel and stride must be positive".into());
                }
            }
            Layer::RegionAvgPool(p) => {
                if p.assignment.len() != p.height * p.width {
                    return bad("assignment length differs from map size".into());
                }
                if p.assignment.iter().any(|&r| r as usize >= p.regions) {
                    return bad("assignment references a missing region".into());
                }
                if p.counts().iter().any(|&c| c == 0) {
                    return bad("every region needs at least one position".into());
                }
            }
            Layer::ReLU | Layer::GlobalAvgPool | Layer::Flatten => {}
        }
        Ok(())
    }

    /// Output shape when evaluated on an `n×n` tiling: spatial layers see
    /// each tile separately and their outputs are stitched back together.
    pub fn output_shape_tiled(&self, input: &[usize], tiles: usize, index: usize) -> Result<Vec<usize>> {
        if tiles <= 1 || !self.is_spatial() || input.len() != 3 {
            return self.output_shape(input, index);
        }
        if input[1] % tiles != 0 || input[2] % tiles != 0 {
            return Err(Error::ShapeMismatch {
                layer: index,
                kind: self.kind(),
                expected: format!("spatial dims divisible by {tiles} tiles"),
                got: input.to_vec(),
            });
        }
        let tile = self.output_shape(&[input[0], input[1] / tiles, input[2] / tiles], index)?;
        Ok(vec![tile[0], tile[1] * tiles, tile[2] * tiles])
    }

    /// Output shape for a given input shape, or a structured error naming
    /// this layer.
    pub fn output_shape(&self, input: &[usize], index: usize) -> Result<Vec<usize>> {
        let mismatch = |expected: String| Error::ShapeMismatch {
            layer: index,
            kind: self.kind(),
            expected,
            got: input.to_vec(),
        };
        let chw = || match input {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(mismatch("C×H×W".into())),
        };
        match self {
            Layer::Conv2d(conv) => {
                let (c, h, w) = chw()?;
                if c != conv.in_channels() {
                    return Err(mismatch(format!("{} input channels", conv.in_channels())));
                }
                let (ho, wo) = conv
                    .geom()
                    .out_hw(h, w)
                    .ok_or_else(|| mismatch("spatial size at least the kernel".into()))?;
                Ok(vec![conv.out_channels(), ho, wo])
            }
            Layer::Linear(l) => {
                let n: usize = input.iter().product();
                if input.len() != 1 || n != l.in_features() {
                    return Err(mismatch(format!("[{}]", l.in_features())));
                }
                Ok(vec![l.out_features()])
            }
            Layer::ReLU => Ok(input.to_vec()),
            Layer::MaxPool2d { kernel, stride } | Layer::AvgPool2d { kernel, stride } => {
                let (c, h, w) = chw()?;
                let (ho, wo) = ops::pool_out_hw(h, w, *kernel, *stride)
                    .ok_or_else(|| mismatch(format!("spatial size at least {kernel}")))?;
                Ok(vec![c, ho, wo])
            }
            Layer::GlobalAvgPool => {
                let (c, _, _) = chw()?;
                Ok(vec![c])
            }
            Layer::BatchNorm2d(b) => {
                let (c, _, _) = chw()?;
                if c != b.gamma.len() {
                    return Err(mismatch(format!("{} channels", b.gamma.len())));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::RegionAvgPool(p) => {
                let (c, h, w) = chw()?;
                if (h, w) != (p.height, p.width) {
                    return Err(mismatch(format!("C×{}×{}", p.height, p.width)));
                }
                Ok(vec![p.regions * c])
            }
        }
    }

    /// Forward pass. `tiles > 1` evaluates spatially coupled layers on each
    /// tile of an `n×n` tiling independently.
    pub fn forward(&self, x: &Tensor, tiles: usize, index: usize) -> Result<Tensor> {
        let out_shape = self.output_shape_tiled(x.shape(), tiles, index)?;
        let y = match self {
            Layer::Conv2d(c) => ops::conv_forward(x, &c.weight, c.bias.as_ref(), c.geom(), tiles),
            Layer::Linear(l) => linear_forward(x.data(), l.weight.data(), l.bias.as_ref().map(|b| b.data()), l.out_features()),
            Layer::ReLU => x.map(|v| v.max(0.0)),
            Layer::MaxPool2d { kernel, stride } => ops::maxpool_forward(x, *kernel, *stride, tiles),
            Layer::AvgPool2d { kernel, stride } => ops::avgpool_forward(x, *kernel, *stride, tiles),
            Layer::GlobalAvgPool => {
                let (c, h, w) = x.chw()?;
                let inv = 1.0 / (h * w) as f32;
                Tensor::from_parts(vec![c], (0..c).map(|ch| x.channel(ch).iter().sum::<f32>() * inv).collect())
            }
            Layer::BatchNorm2d(b) => {
                let (c, h, w) = x.chw()?;
                let (scale, shift) = b.affine();
                let mut out = x.data().to_vec();
                for ch in 0..c {
                    for v in &mut out[ch * h * w..(ch + 1) * h * w] {
                        *v = *v * scale[ch] + shift[ch];
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), out)
            }
            Layer::Flatten => x.clone().reshape(&out_shape)?,
            Layer::RegionAvgPool(p) => region_pool_forward(x, p),
        };
        debug_assert_eq!(y.shape(), &out_shape[..]);
        Ok(y)
    }

    /// Gradient with respect to the layer input given the gradient with
    /// respect to its output. `x` is the forward input.
    pub fn backward(&self, x: &Tensor, gy: &Tensor, tiles: usize, relu: ReluBackward) -> Tensor {
        match self {
            Layer::Conv2d(c) => {
                let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                ops::conv_backward_input(gy, c.weight.data(), cin, (h, w), c.geom(), tiles)
            }
            Layer::Linear(l) => linear_backward_input(gy.data(), l.weight.data(), l.in_features(), x.shape()),
            Layer::ReLU => {
                let data = x
                    .data()
                    .iter()
                    .zip(gy.data())
                    .map(|(&xi, &g)| match relu {
                        ReluBackward::Standard if xi > 0.0 => g,
                        ReluBackward::Guided if xi > 0.0 && g > 0.0 => g,
                        _ => 0.0,
                    })
                    .collect();
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Layer::MaxPool2d { kernel, stride } => ops::maxpool_backward(x, gy, *kernel, *stride, tiles),
            Layer::AvgPool2d { kernel, stride } => ops::avgpool_backward(x.shape(), gy, *kernel, *stride, tiles),
            Layer::GlobalAvgPool => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let inv = 1.0 / (h * w) as f32;
                let mut gx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    gx.extend(std::iter::repeat(gy.data()[ch] * inv).take(h * w));
                }
                Tensor::from_parts(x.shape().to_vec(), gx)
            }
            Layer::BatchNorm2d(b) => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (scale, _) = b.affine();
                let mut gx = gy.data().to_vec();
                for ch in 0..c {
                    for v in &mut gx[ch * h * w..(ch + 1) * h * w] {
                        *v *= scale[ch];
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), gx)
            }
            Layer::Flatten => Tensor::from_parts(x.shape().to_vec(), gy.data().to_vec()),
            Layer::RegionAvgPool(p) => region_pool_backward(x.shape(), gy, p),
        }
    }

    /// Parameter gradients, or `None` for parameter-free layers.
    pub fn param_grads(&self, x: &Tensor, gy: &Tensor, tiles: usize) -> Option<ParamGrads> {
        match self {
            Layer::Conv2d(c) => {
                let mut dw = vec![0.0; c.weight.len()];
                let mut db = c.bias.as_ref().map(|b| vec![0.0; b.len()]);
                ops::conv_backward_params(x, gy, c.geom(), tiles, &mut dw, db.as_deref_mut());
                Some(ParamGrads(std::iter::once(dw).chain(db).collect()))
            }
            Layer::Linear(l) => {
                let (o, i) = (l.out_features(), l.in_features());
                let mut dw = vec![0.0; o * i];
                for (r, &g) in gy.data().iter().enumerate() {
                    for (d, &xv) in dw[r * i..(r + 1) * i].iter_mut().zip(x.data()) {
                        *d = g * xv;
                    }
                }
                let db = l.bias.as_ref().map(|_| gy.data().to_vec());
                Some(ParamGrads(std::iter::once(dw).chain(db).collect()))
            }
            Layer::BatchNorm2d(b) => {
                let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for ch in 0..c {
                    let denom = (b.running_var.data()[ch] + b.eps).sqrt();
                    let mean = b.running_mean.data()[ch];
                    let xs = &x.data()[ch * h * w..(ch + 1) * h * w];
                    let gs = &gy.data()[ch * h * w..(ch + 1) * h * w];
                    for (&xv, &g) in xs.iter().zip(gs) {
                        dgamma[ch] += g * (xv - mean) / denom;
                        dbeta[ch] += g;
                    }
                }
                Some(ParamGrads(vec![dgamma, dbeta]))
            }
            _ => None,
        }
    }
}

pub(crate) fn linear_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, out: usize) -> Tensor {
    let inp = x.len();
    let mut y = match bias {
        Some(b) => b.to_vec(),
        None => vec![0.0; out],
    };
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * inp..(o + 1) * inp];
        *yo += row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
    }
    Tensor::from_parts(vec![out], y)
}

pub(crate) fn linear_backward_input(gy: &[f32], w: &[f32], inp: usize, in_shape: &[usize]) -> Tensor {
    let mut gx = vec![0.0f32; inp];
    for (o, &g) in gy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        for (d, &wv) in gx.iter_mut().zip(&w[o * inp..(o + 1) * inp]) {
            *d += g * wv;
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

fn region_pool_forward(x: &Tensor, p: &RegionPool) -> Tensor {
    let c = x.shape()[0];
    let counts = p.counts();
    let mut out = vec![0.0f32; p.regions * c];
    for ch in 0..c {
        for (pos, &v) in x.channel(ch).iter().enumerate() {
            out[p.assignment[pos] as usize * c + ch] += v;
        }
    }
    for r in 0..p.regions {
        let inv = 1.0 / counts[r] as f32;
        for v in &mut out[r * c..(r + 1) * c] {
            *v *= inv;
        }
    }
    Tensor::from_parts(vec![p.regions * c], out)
}

fn region_pool_backward(in_shape: &[usize], gy: &Tensor, p: &RegionPool) -> Tensor {
    let c = in_shape[0];
    let plane = p.height * p.width;
    let counts = p.counts();
    let mut gx = vec![0.0f32; c * plane];
    for ch in 0..c {
        for pos in 0..plane {
            let r = p.assignment[pos] as usize;
            gx[ch * plane + pos] = gy.data()[r * c + ch] / counts[r] as f32;
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}
