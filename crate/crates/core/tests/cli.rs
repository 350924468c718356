//! The `attreval` command line, run in-process.

use std::path::{Path, PathBuf};

use attreval::cli::{main_with_args, resolve, Cli, RunConfig};
use attreval::nn::io::load_model;
use attreval::nn::presets::{build, Arch, ArchConfig};
use clap::Parser;

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("attreval").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Train a small BN model briefly into `dir` and return its path. It
/// classifies about half of the pool correctly, enough for grids.
fn quick_model(dir: &Path) -> PathBuf {
    let out = dir.join("train");
    let code = run(&[
        "train", "--arch", "tinyvgg-bn", "--epochs", "3", "--train-count", "1000", "--lr", "0.05", "--seed", "3",
        "--out", p(&out),
    ]);
    assert_eq!(code, 0);
    out.join("model.atev")
}

fn eval_args<'a>(model: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec![
        "--model",
        p(model),
        "--methods",
        "gradient,ixg,gradcam",
        "--taps",
        "input,final",
        "--settings",
        "gridpg,difull",
        "--grids",
        "4",
        "--pool-count",
        "200",
        "--confidence",
        "0",
        "--out",
        p(out),
    ]
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]), 0);
    assert_eq!(run(&["--version"]), 0);
    assert_eq!(run(&["evaluate", "--help"]), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&[]), 1);
    assert_eq!(run(&["frobnicate"]), 1);
    assert_eq!(run(&["evaluate", "--methods", "nonsense"]), 1);
    assert_eq!(run(&["evaluate", "--model", "/nonexistent/model.atev"]), 1);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(run(&["evaluate", "--config", p(&cfg)]), 1);
    let out = dir.path().join("out");
    assert_eq!(run(&["evaluate", "--workers", "0", "--out", p(&out)]), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // no records.csv to read
    assert_eq!(run(&["correlate", "--out", p(&out)]), 2);
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let args = ["train", "--epochs", "1", "--train-count", "64", "--lr", "1e30", "--out", p(&out)];
    assert_eq!(run(&args), 2);
}

#[test]
fn mismatched_series_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    let csv = "sample_id,method,tap,setting,target_cell,score,numerator\n\
               1,ixg,input,gridpg,0,0.5,1\n\
               2,ixg,input,gridpg,0,0.7,1\n\
               1,gradcam,final,gridpg,0,0.2,1\n\
               3,gradcam,final,gridpg,0,0.9,1\n";
    std::fs::write(out.join("records.csv"), csv).unwrap();
    assert_eq!(run(&["correlate", "--out", p(&out)]), 2);
}

#[test]
fn training_hash_is_pinned() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let args = [
        "train", "--arch", "tinyvgg-plain", "--data", "synthetic", "--seed", "7", "--train-count", "200", "--epochs",
        "1", "--out", p(&out),
    ];
    assert_eq!(run(&args), 0);
    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("metrics.json")).unwrap()).unwrap();
    // x86-64 reference value; a different GEMM kernel may round differently
    assert_eq!(
        metrics["model_hash"],
        "c87a94b75d459875e2fb6e7f8f27351b4351ed0842fbc5e62d92b88b56dea4c8"
    );
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let with_seed = dir.path().join("seeded.toml");
    std::fs::write(&with_seed, "seed = 5\n").unwrap();
    let without = dir.path().join("plain.toml");
    std::fs::write(&without, "workers = 2\n").unwrap();
    let seed = |args: &[&str], env: Option<&str>| {
        let cli = Cli::try_parse_from(std::iter::once("attreval").chain(args.iter().copied())).unwrap();
        resolve(cli, env).unwrap().0.seed
    };
    assert_eq!(seed(&["correlate"], None), 0);
    assert_eq!(seed(&["correlate"], Some("7")), 7);
    assert_eq!(seed(&["correlate", "--config", p(&with_seed)], Some("7")), 5);
    assert_eq!(seed(&["correlate", "--config", p(&without)], Some("7")), 7);
    assert_eq!(seed(&["correlate", "--config", p(&with_seed), "--seed", "9"], Some("7")), 9);
    let cli = Cli::try_parse_from(["attreval", "correlate"]).unwrap();
    assert!(resolve(cli, Some("seven")).is_err());
}

#[test]
fn shipped_config_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/default.toml");
    let cli = Cli::try_parse_from(["attreval", "evaluate", "--config", p(&path)]).unwrap();
    let (cfg, _) = resolve(cli, None).unwrap();
    assert_eq!(cfg.evaluate.grids, 200);
    assert_ne!(cfg, RunConfig::default());
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = run(&[
        "train", "--arch", "tinyvgg-bn", "--epochs", "0", "--train-count", "32", "--seed", "4", "--out", p(&out),
    ]);
    assert_eq!(code, 0);
    let saved = load_model(out.join("model.atev")).unwrap();
    assert_eq!(saved, build(Arch::TinyVggBn, &ArchConfig::default(), 4).unwrap());
    assert!(out.join("metrics.json").exists());
    assert!(out.join("run_config.toml").exists());
}

#[test]
fn training_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = quick_model(&dir.path().join("a"));
    let b = quick_model(&dir.path().join("b"));
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn cached_rerun_matches_fresh_run() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_model(dir.path());
    let cache = dir.path().join("cache");
    let outs: Vec<PathBuf> = ["cold", "warm", "fresh"].iter().map(|n| dir.path().join(n)).collect();
    for (i, out) in outs.iter().enumerate() {
        let mut args = vec!["evaluate"];
        args.extend(eval_args(&model, out));
        if i < 2 {
            args.extend(["--cache-dir", p(&cache)]);
        } else {
            args.push("--no-cache");
        }
        assert_eq!(run(&args), 0);
    }
    let records: Vec<Vec<u8>> = outs.iter().map(|o| std::fs::read(o.join("records.csv")).unwrap()).collect();
    assert_eq!(records[0], records[1]);
    assert_eq!(records[0], records[2]);
    // 4 GridPG grids × 4 cells + 4 DiFull grids × 2 targets, per method and tap
    let lines = String::from_utf8(records[0].clone()).unwrap().lines().count();
    assert_eq!(lines, 1 + (16 + 8) * 3 * 2);
    assert!(std::fs::read_dir(&cache).unwrap().count() > 0);
}

#[test]
fn evaluate_aggatt_correlate_implinv_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let model = quick_model(dir.path());
    let out = dir.path().join("out");
    for cmd in ["evaluate", "aggatt"] {
        let mut args = vec![cmd, "--no-cache"];
        args.extend(eval_args(&model, &out));
        assert_eq!(run(&args), 0, "{cmd}");
    }
    assert_eq!(run(&["correlate", "--out", p(&out)]), 0);
    let mut args = vec!["implinv", "--no-cache"];
    args.extend(eval_args(&model, &out));
    assert_eq!(run(&args), 0);
    for f in [
        "records.csv",
        "records.jsonl",
        "summary.csv",
        "summary.json",
        "correlation_gridpg.csv",
        "correlation_difull.csv",
        "implinv.json",
        "implinv_original.ppm",
        "aggatt/gridpg_gradcam_final_index.json",
        "aggatt/difull_ixg_input_bin3.ppm",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let ppm = std::fs::read(out.join("aggatt/gridpg_gradcam_final_bin2.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
    let corr = std::fs::read_to_string(out.join("correlation_gridpg.csv")).unwrap();
    assert_eq!(corr.lines().count(), 1 + 6);
    // no grids, no records: a warning, not an error
    let empty = dir.path().join("empty");
    let mut args = vec!["aggatt", "--no-cache"];
    args.extend(eval_args(&model, &empty).into_iter().map(|a| if a == "4" { "0" } else { a }));
    assert_eq!(run(&args), 0);
}
