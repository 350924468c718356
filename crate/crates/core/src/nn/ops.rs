//! Low-level kernels: im2col convolution on top of `sgemm`, pooling, and the
//! tiling wrapper used for fully disconnected grid evaluation.
//!
//! All kernels take and return flat row-major buffers. Shapes are validated
//! by the layer code that calls them.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

/// `c = alpha·op(a)·op(b) + beta·c` where `op` optionally transposes.
/// `a` is `m×k` after `op`, `b` is `k×n`, `c` is `m×n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(x: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize) -> Vec<f32> {
    let n = ho * wo;
    let mut cols = vec![0.0f32; c * g.kh * g.kw * n];
    let pad = g.padding as isize;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f32], c: usize, h: usize, w: usize, g: ConvGeom, ho: usize, wo: usize) -> Vec<f32> {
    let n = ho * wo;
    let mut x = vec![0.0f32; c * h * w];
    let pad = g.padding as isize;
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ch * g.kh + ky) * g.kw + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for (ox, &s) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            prow[ix as usize] += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// Convolution without tiling. `weight` is `O×C×kh×kw`.
fn conv_forward_plain(x: &Tensor, weight: &[f32], out_c: usize, bias: Option<&[f32]>, g: ConvGeom) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = g.out_hw(h, w).expect("conv geometry validated by caller");
    let n = ho * wo;
    let kdim = c * g.kh * g.kw;
    let mut out = vec![0.0f32; out_c * n];
    if let Some(b) = bias {
        for (o, &bo) in b.iter().enumerate() {
            out[o * n..(o + 1) * n].fill(bo);
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(out_c, kdim, n, weight, false, x.data(), false, beta, &mut out);
    } else {
        let cols = im2col(x.data(), c, h, w, g, ho, wo);
        gemm(out_c, kdim, n, weight, false, &cols, false, beta, &mut out);
    }
    Tensor::from_parts(vec![out_c, ho, wo], out)
}

fn conv_backward_input_plain(gy: &Tensor, weight: &[f32], in_c: usize, in_hw: (usize, usize), g: ConvGeom) -> Tensor {
    let (out_c, ho, wo) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let (h, w) = in_hw;
    let n = ho * wo;
    let kdim = in_c * g.kh * g.kw;
    let mut cols = vec![0.0f32; kdim * n];
    gemm(kdim, out_c, n, weight, true, gy.data(), false, 0.0, &mut cols);
    if g.is_pointwise() {
        return Tensor::from_parts(vec![in_c, h, w], cols);
    }
    Tensor::from_parts(vec![in_c, h, w], col2im(&cols, in_c, h, w, g, ho, wo))
}

/// Accumulates `dW += gy · cols(x)ᵀ` and `db += Σ gy`.
fn conv_backward_params_plain(x: &Tensor, gy: &Tensor, g: ConvGeom, dw: &mut [f32], db: Option<&mut [f32]>) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (out_c, ho, wo) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let n = ho * wo;
    let kdim = c * g.kh * g.kw;
    if g.is_pointwise() {
        gemm(out_c, n, kdim, gy.data(), false, x.data(), true, 1.0, dw);
    } else {
        let cols = im2col(x.data(), c, h, w, g, ho, wo);
        gemm(out_c, n, kdim, gy.data(), false, &cols, true, 1.0, dw);
    }
    if let Some(db) = db {
        for (o, d) in db.iter_mut().enumerate() {
            *d += gy.data()[o * n..(o + 1) * n].iter().sum::<f32>();
        }
    }
}

/// Run `op` independently on each tile of an `n×n` tiling and stitch the
/// results. With `n == 1` this is just `op(x)`.
pub fn tiled(x: &Tensor, n: usize, op: impl Fn(&Tensor) -> Tensor) -> Tensor {
    if n <= 1 {
        return op(x);
    }
    let outs: Vec<Tensor> = (0..n * n).map(|t| op(&x.tile(n, t / n, t % n))).collect();
    Tensor::stitch(&outs, n)
}

pub fn conv_forward(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, g: ConvGeom, tiles: usize) -> Tensor {
    let out_c = weight.shape()[0];
    tiled(x, tiles, |t| {
        conv_forward_plain(t, weight.data(), out_c, bias.map(|b| b.data()), g)
    })
}

/// Convolution with an explicit weight buffer (used by LRP rules that
/// convolve with modified weights).
pub fn conv_forward_with(x: &Tensor, weight: &[f32], out_c: usize, g: ConvGeom, tiles: usize) -> Tensor {
    tiled(x, tiles, |t| conv_forward_plain(t, weight, out_c, None, g))
}

pub fn conv_backward_input(gy: &Tensor, weight: &[f32], in_c: usize, in_hw: (usize, usize), g: ConvGeom, tiles: usize) -> Tensor {
    if tiles <= 1 {
        return conv_backward_input_plain(gy, weight, in_c, in_hw, g);
    }
    let tile_hw = (in_hw.0 / tiles, in_hw.1 / tiles);
    tiled(gy, tiles, |t| conv_backward_input_plain(t, weight, in_c, tile_hw, g))
}

pub fn conv_backward_params(x: &Tensor, gy: &Tensor, g: ConvGeom, tiles: usize, dw: &mut [f32], mut db: Option<&mut [f32]>) {
    if tiles <= 1 {
        conv_backward_params_plain(x, gy, g, dw, db);
        return;
    }
    for t in 0..tiles * tiles {
        let (r, c) = (t / tiles, t % tiles);
        conv_backward_params_plain(&x.tile(tiles, r, c), &gy.tile(tiles, r, c), g, dw, db.as_deref_mut());
    }
}

pub fn pool_out_hw(h: usize, w: usize, k: usize, s: usize) -> Option<(usize, usize)> {
    if h < k || w < k || k == 0 || s == 0 {
        return None;
    }
    Some(((h - k) / s + 1, (w - k) / s + 1))
}

/// Index (within the plane) of the first maximal element of each window,
/// row-major within the window.
fn maxpool_argmax(x: &Tensor, k: usize, s: usize) -> (Vec<usize>, usize, usize) {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = pool_out_hw(h, w, k, s).expect("pool geometry validated by caller");
    let mut idx = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = x.channel(ch);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = (oy * s) * w + ox * s;
                for ky in 0..k {
                    for kx in 0..k {
                        let p = (oy * s + ky) * w + ox * s + kx;
                        if plane[p] > plane[best] {
                            best = p;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    (idx, ho, wo)
}

fn maxpool_forward_plain(x: &Tensor, k: usize, s: usize) -> Tensor {
    let c = x.shape()[0];
    let (idx, ho, wo) = maxpool_argmax(x, k, s);
    let plane = x.shape()[1] * x.shape()[2];
    let out = idx
        .iter()
        .enumerate()
        .map(|(i, &p)| x.data()[(i / (ho * wo)) * plane + p])
        .collect();
    Tensor::from_parts(vec![c, ho, wo], out)
}

fn maxpool_backward_plain(x: &Tensor, gy: &Tensor, k: usize, s: usize) -> Tensor {
    let (idx, ho, wo) = maxpool_argmax(x, k, s);
    let plane = x.shape()[1] * x.shape()[2];
    let mut gx = vec![0.0f32; x.len()];
    for (i, &p) in idx.iter().enumerate() {
        gx[(i / (ho * wo)) * plane + p] += gy.data()[i];
    }
    Tensor::from_parts(x.shape().to_vec(), gx)
}

pub fn maxpool_forward(x: &Tensor, k: usize, s: usize, tiles: usize) -> Tensor {
    tiled(x, tiles, |t| maxpool_forward_plain(t, k, s))
}

pub fn maxpool_backward(x: &Tensor, gy: &Tensor, k: usize, s: usize, tiles: usize) -> Tensor {
    if tiles <= 1 {
        return maxpool_backward_plain(x, gy, k, s);
    }
    let parts: Vec<Tensor> = (0..tiles * tiles)
        .map(|t| {
            let (r, c) = (t / tiles, t % tiles);
            maxpool_backward_plain(&x.tile(tiles, r, c), &gy.tile(tiles, r, c), k, s)
        })
        .collect();
    Tensor::stitch(&parts, tiles)
}

fn avgpool_forward_plain(x: &Tensor, k: usize, s: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = pool_out_hw(h, w, k, s).expect("pool geometry validated by caller");
    let inv = 1.0 / (k * k) as f32;
    let mut out = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = x.channel(ch);
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f32;
                for ky in 0..k {
                    for kx in 0..k {
                        acc += plane[(oy * s + ky) * w + ox * s + kx];
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    Tensor::from_parts(vec![c, ho, wo], out)
}

fn avgpool_backward_plain(in_shape: &[usize], gy: &Tensor, k: usize, s: usize) -> Tensor {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (gy.shape()[1], gy.shape()[2]);
    let inv = 1.0 / (k * k) as f32;
    let mut gx = vec![0.0f32; c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = gy.data()[(ch * ho + oy) * wo + ox] * inv;
                for ky in 0..k {
                    for kx in 0..k {
                        gx[ch * h * w + (oy * s + ky) * w + ox * s + kx] += g;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

pub fn avgpool_forward(x: &Tensor, k: usize, s: usize, tiles: usize) -> Tensor {
    tiled(x, tiles, |t| avgpool_forward_plain(t, k, s))
}

pub fn avgpool_backward(in_shape: &[usize], gy: &Tensor, k: usize, s: usize, tiles: usize) -> Tensor {
    if tiles <= 1 {
        return avgpool_backward_plain(in_shape, gy, k, s);
    }
    let tile_shape = [in_shape[0], in_shape[1] / tiles, in_shape[2] / tiles];
    tiled(gy, tiles, |t| avgpool_backward_plain(&tile_shape, t, k, s))
}
