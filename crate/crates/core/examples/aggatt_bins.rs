//! Bin Grad-CAM maps by localization, average each bin and write the six
//! heatmaps plus an index.
//!
//! ```text
//! cargo run --release --example aggatt_bins -- [grids] [out_dir]
//! ```

mod common;

use attreval::aggatt::{sort_and_bin, write_outputs, RenderMode};
use attreval::attribution::{Method, MethodConfig};
use attreval::grids::{run_campaign, Campaign, Setting};
use attreval::nn::model::TAP_FINAL;
use attreval::nn::presets::Arch;

fn main() -> attreval::Result<()> {
    common::init_logging();
    let (model, pool) = common::setup(Arch::TinyVggPlain)?;
    let out = std::env::args().nth(2).unwrap_or_else(|| "target/aggatt".into());
    let setting = Setting::DiFull;
    let grids = common::grids(&pool, setting, common::count_arg(100))?;
    let campaign = Campaign {
        methods: vec![Method::GradCam],
        taps: vec![TAP_FINAL.into()],
        settings: vec![setting],
        config: MethodConfig::default(),
        seed: 0,
        keep_maps: true,
    };
    let result = run_campaign(&model, &campaign, &[(setting, grids)])?;
    let binned = sort_and_bin(&result.records, &result.maps)?;
    for (i, bin) in binned.bins.iter().enumerate() {
        let exemplar = binned.median_exemplars[i].as_ref().map(|m| (m.sample_id, m.target_cell));
        println!(
            "bin {i} [{:>3}%, {:>3}%): {:>3} maps, median exemplar {exemplar:?}",
            binned.bin_edges[i],
            binned.bin_edges[i + 1],
            bin.len()
        );
    }
    let index = write_outputs(
        &binned,
        std::path::Path::new(&out),
        "difull_gradcam_final",
        ("gradcam", TAP_FINAL, setting.name()),
        RenderMode::Positive,
    )?;
    println!("normalizer {}, written to {out}", index.normalizer);
    Ok(())
}
