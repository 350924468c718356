//! Two functionally identical DiFull models that the z⁺ rule explains
//! very differently.
//!
//! ```text
//! cargo run --release --example implinv_demo -- [grids]
//! ```

mod common;

use attreval::attribution::MethodConfig;
use attreval::cli::implinv_experiment;
use attreval::grids::Setting;
use attreval::nn::presets::Arch;

fn main() -> attreval::Result<()> {
    common::init_logging();
    let (model, pool) = common::setup(Arch::TinyVggPlain)?;
    let grids = common::grids(&pool, Setting::DiFull, common::count_arg(30))?;
    let (report, before, after) = implinv_experiment(&model, &grids, 2, &MethodConfig::default(), 0)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    let cell_share = |r: &attreval::grids::CampaignResult| {
        r.records.iter().filter(|x| x.score >= 0.99).count() as f64 / r.records.len() as f64
    };
    println!(
        "share of maps with ≥ 99% of positive relevance in the target cell: {:.2} -> {:.2}",
        cell_share(&before),
        cell_share(&after)
    );
    Ok(())
}
