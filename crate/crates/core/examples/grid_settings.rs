//! Build GridPG, DiFull and DiPart grids and show how far each setting lets
//! a cell's logit depend on the other cells.
//!
//! ```text
//! cargo run --release --example grid_settings
//! ```

mod common;

use attreval::grids::{Setting, SettingModel};
use attreval::nn::presets::Arch;
use attreval::nn::layer::ReluBackward;

fn main() -> attreval::Result<()> {
    common::init_logging();
    let (model, pool) = common::setup(Arch::TinyVggPlain)?;
    for setting in Setting::ALL {
        let grid = &common::grids(&pool, setting, 1)?[0];
        let sm = SettingModel::new(&model, setting, grid.n)?;
        let target = sm.target_index(0, grid.labels[0]);
        let trace = sm.model.forward(&grid.composite, true)?;
        let grad = sm.model.input_gradient(&trace, target, ReluBackward::Standard)?;
        let (c, h, w) = grad.chw()?;
        // largest gradient magnitude per cell, for the top-left target
        let mut per_cell = [0.0f32; 4];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let cell = (y / (h / 2)) * 2 + x / (w / 2);
                    let v = grad.data()[(ch * h + y) * w + x].abs();
                    per_cell[cell] = per_cell[cell].max(v);
                }
            }
        }
        println!(
            "{setting:<7} labels {:?} targets {:?}  max |∂logit/∂x| per cell {:.2e} {:.2e} {:.2e} {:.2e}",
            grid.labels, grid.targets, per_cell[0], per_cell[1], per_cell[2], per_cell[3]
        );
    }
    Ok(())
}
