//! Localization of several attribution methods at the input, middle and
//! final tap on GridPG and DiFull.
//!
//! ```text
//! cargo run --release --example evaluate_methods -- [grids]
//! ```

mod common;

use attreval::analysis::summarize;
use attreval::attribution::{Method, MethodConfig};
use attreval::grids::{run_campaign, Campaign, Setting};
use attreval::nn::model::{TAP_FINAL, TAP_INPUT, TAP_MID};
use attreval::nn::presets::Arch;

fn main() -> attreval::Result<()> {
    common::init_logging();
    let (model, pool) = common::setup(Arch::TinyVggPlain)?;
    let count = common::count_arg(20);
    let settings = [Setting::GridPG, Setting::DiFull];
    let grids = settings
        .iter()
        .map(|&s| Ok((s, common::grids(&pool, s, count)?)))
        .collect::<attreval::Result<Vec<_>>>()?;
    let methods = ["gradient", "guidedbp", "ixg", "intgrad", "gradcam", "layercam", "lrp-focus"]
        .iter()
        .map(|m| m.parse())
        .collect::<attreval::Result<Vec<Method>>>()?;
    let campaign = Campaign {
        methods,
        taps: vec![TAP_INPUT.into(), TAP_MID.into(), TAP_FINAL.into()],
        settings: settings.to_vec(),
        config: MethodConfig::default(),
        seed: 0,
        keep_maps: false,
    };
    let result = run_campaign(&model, &campaign, &grids)?;
    println!("{:<8} {:<10} {:<6} {:>7} {:>7} {:>7}", "setting", "method", "tap", "q1", "median", "mean");
    for row in summarize(&result.records)?.rows {
        println!(
            "{:<8} {:<10} {:<6} {:>7.3} {:>7.3} {:>7.3}",
            row.setting.to_string(),
            row.method,
            row.tap,
            row.quartiles.q1,
            row.quartiles.median,
            row.mean
        );
    }
    Ok(())
}
