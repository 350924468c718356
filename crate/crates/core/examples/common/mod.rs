//! Model and grid pool shared by the examples. The preset is trained into
//! `target/models` on first use.
#![allow(dead_code)]

use attreval::cli::{evaluation_pool, RunConfig};
use attreval::data::LabeledImage;
use attreval::grids::{build_grids, GridSample, Setting};
use attreval::nn::merge::merge_batchnorm;
use attreval::nn::model::Model;
use attreval::nn::presets::{load_or_train, Arch, Recipe};

pub const MODELS_DIR: &str = "target/models";

pub fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
}

/// Trained preset with BatchNorm folded, and its confidently classified
/// pool images.
pub fn setup(arch: Arch) -> attreval::Result<(Model, Vec<LabeledImage>)> {
    let (model, _) = load_or_train(&Recipe::new(arch), MODELS_DIR)?;
    let model = merge_batchnorm(&model)?;
    let pool = evaluation_pool(&model, &RunConfig::default())?;
    Ok((model, pool))
}

pub fn grids(pool: &[LabeledImage], setting: Setting, count: usize) -> attreval::Result<Vec<GridSample>> {
    build_grids(pool, 2, count, setting, 0)
}

/// Grid count from the first command-line argument.
pub fn count_arg(default: usize) -> usize {
    std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(default)
}
