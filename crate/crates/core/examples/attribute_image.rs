//! Every attribution method on one image, rendered as diverging heatmaps.
//!
//! ```text
//! cargo run --release --example attribute_image -- [pool_index] [out_dir]
//! ```

mod common;

use attreval::aggatt::{render_heatmap, RenderMode};
use attreval::attribution::{attribute, upsample_bilinear, AttrContext, Method, MethodConfig};
use attreval::nn::presets::Arch;

fn main() -> attreval::Result<()> {
    common::init_logging();
    let (model, pool) = common::setup(Arch::TinyVggPlain)?;
    let idx = common::count_arg(0);
    let out = std::path::PathBuf::from(std::env::args().nth(2).unwrap_or_else(|| "target/attributions".into()));
    std::fs::create_dir_all(&out).map_err(|e| attreval::Error::io(&out, e))?;
    let img = &pool[idx % pool.len()];
    let (_, h, w) = img.pixels.chw()?;
    let methods = [
        "gradient", "guidedbp", "ixg", "intgrad", "smoothgrad", "gradcam", "layercam", "occlusion", "rise", "s-ixg",
        "lrp-focus", "lrp-composite:0.25",
    ];
    println!("image {} (class {})", img.id, img.label);
    for name in methods {
        let method: Method = name.parse()?;
        let map = attribute(&model, &img.pixels, img.label, &method, &MethodConfig::default(), AttrContext {
            seed: img.id,
            at_input: true,
        })?;
        let map = upsample_bilinear(&map, h, w)?;
        let norm = map.max_abs().max(f32::MIN_POSITIVE);
        let path = out.join(format!("{}.ppm", name.replace(':', "_")));
        std::fs::write(&path, render_heatmap(&map, norm, RenderMode::Diverging)?).map_err(|e| attreval::Error::io(&path, e))?;
        println!("{name:<20} sum {:>10.4}  max |v| {norm:.4e}", map.sum());
    }
    println!("heatmaps in {}", out.display());
    Ok(())
}
