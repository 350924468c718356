//! Mean GridPG localization of Input×Gradient and Grad-CAM at every depth
//! of the network.
//!
//! ```text
//! cargo run --release --example depth_sweep -- [grids]
//! ```

mod common;

use attreval::attribution::{Method, MethodConfig};
use attreval::cli::resolve_taps;
use attreval::grids::{run_campaign, Campaign, Setting};
use attreval::nn::presets::Arch;

fn main() -> attreval::Result<()> {
    common::init_logging();
    let (model, pool) = common::setup(Arch::TinyVggPlain)?;
    let grids = common::grids(&pool, Setting::GridPG, common::count_arg(20))?;
    let campaign = Campaign {
        methods: vec![Method::InputXGradient, Method::GradCam],
        taps: resolve_taps(&model, &["all".to_string()])?,
        settings: vec![Setting::GridPG],
        config: MethodConfig::default(),
        seed: 0,
        keep_maps: false,
    };
    let result = run_campaign(&model, &campaign, &[(Setting::GridPG, grids)])?;
    println!("{:<6} {:>8} {:>8}", "tap", "ixg", "gradcam");
    for tap in &campaign.taps {
        let mean = |method: &str| {
            let s: Vec<f64> = result
                .records
                .iter()
                .filter(|r| r.method == method && r.tap == *tap)
                .map(|r| r.score)
                .collect();
            s.iter().sum::<f64>() / s.len() as f64
        };
        println!("{tap:<6} {:>8.3} {:>8.3}", mean("ixg"), mean("gradcam"));
    }
    Ok(())
}
