//! Datasets: a procedural shape dataset and the CIFAR-10 binary format.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::model::Model;
use crate::nn::train::probabilities;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `C×H×W`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    pub id: u64,
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_CLASSES: [&str; 10] = [
    "airplane",
    "automobile",
    "bird",
    "cat",
    "deer",
    "dog",
    "frog",
    "horse",
    "ship",
    "truck",
];

const SHAPES: usize = 5;
const PALETTE: [[f32; 3]; 3] = [[0.95, 0.55, 0.10], [0.20, 0.45, 0.95], [0.85, 0.15, 0.75]];

/// Largest class count for which every class gets a distinct (shape, colour).
pub const MAX_SYNTHETIC_CLASSES: usize = SHAPES * PALETTE.len();

fn inside(shape: usize, u: f32, v: f32) -> bool {
    match shape {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        // upward triangle
        2 => (-0.9..=0.8).contains(&v) && u.abs() <= (v + 0.9) * 0.55,
        3 => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
        _ => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
    }
}

/// Render one synthetic image. Class `k` is shape `k % 5` in colour
/// `k / 5`, drawn at a random position and scale over a striped, noisy
/// background.
pub fn synthetic_image(label: usize, size: usize, seed: u64, index: u64) -> LabeledImage {
    let mut r = rng::stream(seed, &[rng::label_key("synthetic"), index]);
    let shape = label % SHAPES;
    let base = PALETTE[label / SHAPES];
    let color: Vec<f32> = base
        .iter()
        .map(|&c| (c + r.gen_range(-0.08f32..0.08)).clamp(0.0, 1.0))
        .collect();

    let s = size as f32;
    let radius = s * r.gen_range(0.18f32..0.34);
    let cx = r.gen_range(radius..s - radius);
    let cy = r.gen_range(radius..s - radius);

    let level = r.gen_range(0.25f32..0.55);
    let tint: Vec<f32> = (0..3).map(|_| r.gen_range(-0.06f32..0.06)).collect();
    let angle = r.gen_range(0.0f32..std::f32::consts::PI);
    let freq = r.gen_range(0.25f32..0.9);
    let phase = r.gen_range(0.0f32..std::f32::consts::TAU);
    let (sa, ca) = angle.sin_cos();

    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for y in 0..size {
        for x in 0..size {
            let stripe = 0.08 * ((x as f32 * ca + y as f32 * sa) * freq + phase).sin();
            // 2×2 supersampled coverage
            let mut cover = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let u = (x as f32 + ox - cx) / radius;
                let v = (y as f32 + oy - cy) / radius;
                if inside(shape, u, v) {
                    cover += 0.25;
                }
            }
            for c in 0..3 {
                let noise = r.gen_range(-0.05f32..0.05);
                let bg = level + tint[c] + stripe + noise;
                let val = cover * color[c] + (1.0 - cover) * bg;
                data[c * plane + y * size + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    LabeledImage {
        pixels: Tensor::from_parts(vec![3, size, size], data),
        label,
        id: index,
    }
}

/// `count` images with labels cycling through the classes, so every class
/// appears `count / num_classes` times (±1). Image `i` depends only on
/// `(seed, first_id + i)`.
pub fn gen_synthetic(num_classes: usize, size: usize, count: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    gen_synthetic_range(num_classes, size, 0, count, seed)
}

/// As [`gen_synthetic`], for ids `first_id .. first_id + count`.
pub fn gen_synthetic_range(
    num_classes: usize,
    size: usize,
    first_id: u64,
    count: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if num_classes == 0 || num_classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::Config(format!(
            "synthetic data supports 1..={MAX_SYNTHETIC_CLASSES} classes, got {num_classes}"
        )));
    }
    if size < 8 {
        return Err(Error::Config(format!("synthetic image size {size} is below 8")));
    }
    Ok((0..count as u64)
        .into_par_iter()
        .map(|i| {
            let id = first_id + i;
            synthetic_image((id % num_classes as u64) as usize, size, seed, id)
        })
        .collect())
}

/// Parse CIFAR-10 binary records (one label byte, then R, G and B planes of
/// 32×32 bytes). Any positive whole number of records is accepted.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "CIFAR-10 file size {} is not a positive multiple of {CIFAR_RECORD}",
            bytes.len()
        )));
    }
    bytes
        .chunks_exact(CIFAR_RECORD)
        .enumerate()
        .map(|(i, rec)| {
            let label = rec[0] as usize;
            if label > 9 {
                return Err(Error::Dataset(format!("record {i}: label byte {label} > 9")));
            }
            let data = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
            Ok(LabeledImage {
                pixels: Tensor::from_parts(vec![3, 32, 32], data),
                label,
                id: i as u64,
            })
        })
        .collect()
}

pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Vec<LabeledImage>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Inverse of [`parse_cifar10`] for one image.
pub fn cifar_record(img: &LabeledImage) -> Result<Vec<u8>> {
    if img.pixels.shape() != [3, 32, 32] || img.label > 9 {
        return Err(Error::Dataset("not a CIFAR-10 shaped image".into()));
    }
    let mut out = Vec::with_capacity(CIFAR_RECORD);
    out.push(img.label as u8);
    out.extend(img.pixels.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    Ok(out)
}

/// Keep images the model classifies correctly with softmax probability of
/// the true class at least `threshold`. Input order is preserved.
pub fn filter_confident(model: &Model, images: &[LabeledImage], threshold: f64) -> Result<Vec<LabeledImage>> {
    let keep: Vec<bool> = images
        .par_iter()
        .map(|img| {
            let logits = model.logits(&img.pixels)?;
            let p = probabilities(&logits);
            Ok(logits.argmax() == img.label && p[img.label] >= threshold)
        })
        .collect::<Result<_>>()?;
    Ok(images
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(img, _)| img.clone())
        .collect())
}
