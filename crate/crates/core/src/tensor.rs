//! Dense row-major `f32` tensors.
//!
//! Every value flowing through the pipeline (images, activations, gradients,
//! relevances, attribution maps) is a [`Tensor`]. Spatial tensors are laid out
//! as `C×H×W`; maps are `H×W`; vectors are `[N]`. There is no batch axis:
//! batching is a loop over samples.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} has a zero dimension"
            )));
        }
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::InvalidTensor(format!(
                "shape {shape:?} needs {len} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Internal constructor for shapes already known to be consistent.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar_vec(values: &[f32]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// `(C, H, W)` of a rank-3 tensor.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::InvalidTensor(format!(
                "expected C×H×W tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// `(H, W)` of a rank-2 tensor.
    pub fn hw(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [h, w] => Ok((h, w)),
            _ => Err(Error::InvalidTensor(format!(
                "expected H×W map, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::InvalidTensor(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::InvalidTensor(format!(
                "elementwise shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, c: f32) -> Self {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Sum with `f64` accumulation.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    /// Slice channel `c` of a C×H×W tensor as a flat `H·W` slice.
    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.shape[1] * self.shape[2];
        &self.data[c * plane..(c + 1) * plane]
    }

    /// Copy the `(row, col)` tile of an `n×n` tiling of a C×H×W tensor.
    pub fn tile(&self, n: usize, row: usize, col: usize) -> Self {
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        let (th, tw) = (h / n, w / n);
        let mut out = Vec::with_capacity(c * th * tw);
        for ch in 0..c {
            for y in 0..th {
                let start = ch * h * w + (row * th + y) * w + col * tw;
                out.extend_from_slice(&self.data[start..start + tw]);
            }
        }
        Tensor::from_parts(vec![c, th, tw], out)
    }

    /// Inverse of [`Tensor::tile`]: assemble `n×n` equally-sized C×h×w tiles
    /// (row-major) into one C×(n·h)×(n·w) tensor.
    pub fn stitch(tiles: &[Tensor], n: usize) -> Self {
        let (c, th, tw) = (tiles[0].shape[0], tiles[0].shape[1], tiles[0].shape[2]);
        let (h, w) = (th * n, tw * n);
        let mut data = vec![0.0; c * h * w];
        for (t, tile) in tiles.iter().enumerate() {
            let (row, col) = (t / n, t % n);
            for ch in 0..c {
                for y in 0..th {
                    let dst = ch * h * w + (row * th + y) * w + col * tw;
                    let src = ch * th * tw + y * tw;
                    data[dst..dst + tw].copy_from_slice(&tile.data[src..src + tw]);
                }
            }
        }
        Tensor::from_parts(vec![c, h, w], data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn tile_stitch_round_trip() {
        let data: Vec<f32> = (0..2 * 8 * 8).map(|v| v as f32).collect();
        let t = Tensor::new(vec![2, 8, 8], data).unwrap();
        let tiles: Vec<_> = (0..4).map(|i| t.tile(2, i / 2, i % 2)).collect();
        assert_eq!(tiles[1].shape(), &[2, 4, 4]);
        assert_eq!(tiles[1].data()[0], 4.0);
        assert_eq!(Tensor::stitch(&tiles, 2), t);
    }
}
