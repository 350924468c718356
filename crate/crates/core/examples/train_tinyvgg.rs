//! Train a tinyvgg model on the synthetic shapes and report accuracy.
//!
//! ```text
//! cargo run --release --example train_tinyvgg -- [plain|bn] [train_count] [epochs] [out_dir] [lr]
//! ```

use std::time::Instant;

use attreval::nn::presets::{load_or_train, Arch, Recipe};

fn main() -> attreval::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arch = match args.first().map(String::as_str) {
        Some("bn") => Arch::TinyVggBn,
        _ => Arch::TinyVggPlain,
    };
    let mut recipe = Recipe::new(arch);
    if let Some(n) = args.get(1).and_then(|s| s.parse().ok()) {
        recipe.train_count = n;
    }
    if let Some(e) = args.get(2).and_then(|s| s.parse().ok()) {
        recipe.train.epochs = e;
    }
    if let Some(lr) = args.get(4).and_then(|s| s.parse().ok()) {
        recipe.train.lr = lr;
    }
    let dir = args.get(3).cloned().unwrap_or_else(|| "target/models".into());
    let start = Instant::now();
    let (model, metrics) = load_or_train(&recipe, &dir)?;
    println!(
        "{}: {} params, train acc {:.4}, val acc {:.4} ({:.1}s)",
        recipe.key(),
        model.num_params(),
        metrics.train_accuracy,
        metrics.val_accuracy,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
