//! Spearman correlation of per-sample localization between methods and
//! taps on GridPG.
//!
//! ```text
//! cargo run --release --example correlate_methods -- [grids]
//! ```

mod common;

use attreval::analysis::{correlation_matrix, series_from_records};
use attreval::attribution::{Method, MethodConfig};
use attreval::grids::{run_campaign, Campaign, Setting};
use attreval::nn::model::{TAP_FINAL, TAP_INPUT};
use attreval::nn::presets::Arch;

fn main() -> attreval::Result<()> {
    common::init_logging();
    let (model, pool) = common::setup(Arch::TinyVggPlain)?;
    let grids = common::grids(&pool, Setting::GridPG, common::count_arg(50))?;
    let campaign = Campaign {
        methods: vec![
            Method::IntegratedGradients,
            Method::SmoothedIntGrad(None),
            Method::GradCam,
        ],
        taps: vec![TAP_INPUT.into(), TAP_FINAL.into()],
        settings: vec![Setting::GridPG],
        config: MethodConfig::default(),
        seed: 0,
        keep_maps: false,
    };
    let result = run_campaign(&model, &campaign, &[(Setting::GridPG, grids)])?;
    let matrix = correlation_matrix(&series_from_records(&result.records))?;
    matrix.write_csv(std::io::stdout().lock())?;
    Ok(())
}
