//! Sequential CNN engine.

pub mod io;
pub mod layer;
pub mod merge;
pub mod model;
pub mod ops;
pub mod presets;
pub mod train;

pub use io::{load_model, model_hash, save_model};
pub use layer::{BatchNorm2d, Conv2d, Layer, Linear, RegionPool, ReluBackward};
pub use merge::merge_batchnorm;
pub use model::{ForwardTrace, Model, TAP_FINAL, TAP_INPUT, TAP_MID};
pub use presets::{build, load_or_train, Arch, ArchConfig, Recipe};
pub use train::{train_sgd, TrainConfig, TrainReport};
