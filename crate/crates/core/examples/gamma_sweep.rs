//! GridPG localization of the LRP γ-rule configuration for a range of γ,
//! with γ = ∞ standing for the z⁺ (Focus) configuration.
//!
//! ```text
//! cargo run --release --example gamma_sweep -- [grids]
//! ```

mod common;

use attreval::attribution::MethodConfig;
use attreval::grids::Setting;
use attreval::lrp::{gamma_sweep, write_gamma_table};
use attreval::nn::model::{TAP_FINAL, TAP_INPUT, TAP_MID};
use attreval::nn::presets::Arch;

fn main() -> attreval::Result<()> {
    common::init_logging();
    let (model, pool) = common::setup(Arch::TinyVggPlain)?;
    let grids = common::grids(&pool, Setting::GridPG, common::count_arg(30))?;
    let taps = [TAP_INPUT, TAP_MID, TAP_FINAL].map(String::from);
    let gammas = [0.0, 0.01, 0.05, 0.1, 0.25, 1.0, f32::INFINITY];
    let (rows, _) = gamma_sweep(&model, &grids, &gammas, &taps, &MethodConfig::default(), 0)?;
    write_gamma_table(&rows, std::io::stdout().lock())
}
