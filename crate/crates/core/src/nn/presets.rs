//! Small VGG-style architectures and a reproducible train-or-load cache.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::io::{load_model, save_model};
use super::layer::{BatchNorm2d, Conv2d, Layer, Linear};
use super::model::{Model, TAP_FINAL, TAP_INPUT, TAP_MID};
use super::train::{accuracy, train_sgd, TrainConfig, TrainReport};
use crate::data::gen_synthetic_range;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    #[serde(rename = "tinyvgg-plain")]
    TinyVggPlain,
    #[serde(rename = "tinyvgg-bn")]
    TinyVggBn,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::TinyVggPlain => "tinyvgg-plain",
            Arch::TinyVggBn => "tinyvgg-bn",
        }
    }
}

impl FromStr for Arch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tinyvgg-plain" => Ok(Arch::TinyVggPlain),
            "tinyvgg-bn" => Ok(Arch::TinyVggBn),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    /// Output channels of the eight convolutions.
    pub widths: [usize; 8],
    pub classes: usize,
    /// Input side length; must be divisible by 8.
    pub size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            widths: [8, 8, 16, 16, 32, 32, 32, 32],
            classes: 10,
            size: 32,
        }
    }
}

fn he_uniform(r: &mut impl Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n = shape.iter().product();
    Tensor::from_parts(shape, (0..n).map(|_| r.gen_range(-bound..bound)).collect())
}

/// Eight 3×3 convolutions in four stages (three followed by 2×2 max
/// pooling), then global average pooling and a linear classifier.
///
/// `tinyvgg-plain` has no bias terms anywhere. `tinyvgg-bn` follows each
/// convolution with BatchNorm and gives the classifier a bias.
///
/// Taps: `input`, `mid` (after the fourth convolution's ReLU) and `final`
/// (after the last convolution's ReLU, where the head starts).
pub fn build(arch: Arch, cfg: &ArchConfig, seed: u64) -> Result<Model> {
    if cfg.size % 8 != 0 || cfg.size == 0 || cfg.classes == 0 || cfg.widths.contains(&0) {
        return Err(Error::Config(format!("invalid architecture config {cfg:?}")));
    }
    let bn = arch == Arch::TinyVggBn;
    let mut r = rng::stream(seed, &[rng::label_key("init"), rng::label_key(arch.name())]);
    let mut layers = Vec::new();
    let mut taps = BTreeMap::new();
    taps.insert(TAP_INPUT.to_string(), 0);
    let mut in_c = 3;
    for (i, &out_c) in cfg.widths.iter().enumerate() {
        layers.push(Layer::Conv2d(Conv2d {
            weight: he_uniform(&mut r, vec![out_c, in_c, 3, 3], in_c * 9),
            bias: None,
            stride: 1,
            padding: 1,
        }));
        if bn {
            layers.push(Layer::BatchNorm2d(BatchNorm2d::identity(out_c, 1e-5)));
        }
        layers.push(Layer::ReLU);
        if i == 3 {
            taps.insert(TAP_MID.to_string(), layers.len());
        }
        if i % 2 == 1 && i < 6 {
            layers.push(Layer::MaxPool2d { kernel: 2, stride: 2 });
        }
        in_c = out_c;
    }
    let head_start = layers.len();
    taps.insert(TAP_FINAL.to_string(), head_start);
    layers.push(Layer::GlobalAvgPool);
    layers.push(Layer::Linear(Linear {
        weight: he_uniform(&mut r, vec![cfg.classes, in_c], in_c),
        bias: bn.then(|| Tensor::zeros(&[cfg.classes])),
    }));
    Model::new(layers, taps, head_start, vec![3, cfg.size, cfg.size])
}

/// Everything that determines a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub arch: Arch,
    pub arch_config: ArchConfig,
    pub data_seed: u64,
    pub train_count: usize,
    pub val_count: usize,
    pub init_seed: u64,
    pub train: TrainConfig,
}

impl Recipe {
    pub fn new(arch: Arch) -> Self {
        Recipe {
            arch,
            arch_config: ArchConfig::default(),
            data_seed: 0,
            train_count: 5000,
            val_count: 1000,
            init_seed: 0,
            train: TrainConfig::default(),
        }
    }

    /// Short stable key for cache file names.
    pub fn key(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("recipe serializes");
        let digest = hex::encode(Sha256::digest(json));
        format!("{}-{}", self.arch.name(), &digest[..16])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainedMetrics {
    pub recipe: Recipe,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub report: TrainReport,
}

/// Train a model from a recipe on synthetic data. Validation images use
/// ids after the training range.
pub fn train_recipe(recipe: &Recipe) -> Result<(Model, TrainedMetrics)> {
    let ac = &recipe.arch_config;
    let model = build(recipe.arch, ac, recipe.init_seed)?;
    let train = gen_synthetic_range(ac.classes, ac.size, 0, recipe.train_count, recipe.data_seed)?;
    let val = gen_synthetic_range(ac.classes, ac.size, recipe.train_count as u64, recipe.val_count, recipe.data_seed)?;
    let (model, report) = train_sgd(&model, &train, &recipe.train)?;
    let val_accuracy = accuracy(&model, &val)?;
    let metrics = TrainedMetrics {
        recipe: recipe.clone(),
        train_accuracy: report.final_accuracy,
        val_accuracy,
        report,
    };
    Ok((model, metrics))
}

pub fn cache_paths(recipe: &Recipe, dir: &Path) -> (PathBuf, PathBuf) {
    let key = recipe.key();
    (dir.join(format!("{key}.atev")), dir.join(format!("{key}.json")))
}

/// Load the model for `recipe` from `dir`, training and storing it first
/// if it is not there yet.
pub fn load_or_train(recipe: &Recipe, dir: impl AsRef<Path>) -> Result<(Model, TrainedMetrics)> {
    let dir = dir.as_ref();
    let (weights, metrics_path) = cache_paths(recipe, dir);
    if weights.exists() && metrics_path.exists() {
        let model = load_model(&weights)?;
        let text = std::fs::read(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
        return Ok((model, serde_json::from_slice(&text)?));
    }
    log::info!("training {} into {}", recipe.key(), dir.display());
    let (model, metrics) = train_recipe(recipe)?;
    save_model(&model, &weights)?;
    let tmp = metrics_path.with_extension("json.tmp");
    std::fs::write(&tmp, serde_json::to_vec_pretty(&metrics)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, &metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    Ok((model, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::merge::merge_batchnorm;

    #[test]
    fn taps_line_up_across_variants() {
        let plain = build(Arch::TinyVggPlain, &ArchConfig::default(), 1).unwrap();
        assert_eq!(plain.taps[TAP_MID], 9);
        assert_eq!(plain.taps[TAP_FINAL], 19);
        assert_eq!(plain.head_start, 19);
        let shapes = plain.shapes(&[3, 32, 32]).unwrap();
        assert_eq!(shapes[9], vec![16, 16, 16]);
        assert_eq!(shapes[19], vec![32, 4, 4]);

        let bn = build(Arch::TinyVggBn, &ArchConfig::default(), 1).unwrap();
        let merged = merge_batchnorm(&bn).unwrap();
        assert_eq!(merged.taps, plain.taps);
        assert_eq!(merged.head_start, plain.head_start);
    }

    #[test]
    fn plain_is_bias_free() {
        let m = build(Arch::TinyVggPlain, &ArchConfig::default(), 0).unwrap();
        for l in &m.layers {
            match l {
                Layer::Conv2d(c) => assert!(c.bias.is_none()),
                Layer::Linear(c) => assert!(c.bias.is_none()),
                _ => {}
            }
        }
    }
}
