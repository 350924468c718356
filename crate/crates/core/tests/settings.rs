//! Grid construction and the three settings on small untrained models.

use std::collections::{BTreeMap, BTreeSet};

use attreval::attribution::{
    gradient_attr, guided_backprop_attr, ixg_attr, smoothgrad_attr, Method, MethodConfig, NoiseBase,
};
use attreval::data::LabeledImage;
use attreval::grids::{build_grids, run_campaign, Campaign, Setting, SettingModel};
use attreval::lrp::{gamma_sweep, LrpPreset};
use attreval::nn::layer::{Conv2d, Layer, Linear, ReluBackward};
use attreval::nn::model::Model;
use attreval::nn::presets::{build, Arch, ArchConfig};
use attreval::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZE: usize = 16;

fn small_cfg() -> ArchConfig {
    ArchConfig {
        widths: [4, 4, 6, 6, 8, 8, 8, 8],
        classes: 5,
        size: SIZE,
    }
}

fn plain() -> Model {
    build(Arch::TinyVggPlain, &small_cfg(), 11).unwrap()
}

fn random_image(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.gen_range(0.0f32..1.0)).collect()).unwrap()
}

/// Four random images per class.
fn pool() -> Vec<LabeledImage> {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    (0..20)
        .map(|i| LabeledImage {
            pixels: random_image(&mut r, &[3, SIZE, SIZE]),
            label: i % 5,
            id: i as u64,
        })
        .collect()
}

fn grid(setting: Setting, i: usize) -> attreval::grids::GridSample {
    build_grids(&pool(), 2, i + 1, setting, 9).unwrap().remove(i)
}

/// Input gradient of one setting-model output.
fn input_grad(sm: &SettingModel, x: &Tensor, target: usize) -> Tensor {
    let trace = sm.model.forward(x, true).unwrap();
    sm.model.input_gradient(&trace, target, ReluBackward::Standard).unwrap()
}

/// Largest |v| over the pixels of cell `cell` of a `C×2s×2s` tensor.
fn cell_max(t: &Tensor, cell: usize) -> f32 {
    let (c, h, w) = t.chw().unwrap();
    let (s, oy, ox) = (h / 2, (cell / 2) * (h / 2), (cell % 2) * (w / 2));
    let mut m = 0.0f32;
    for ch in 0..c {
        for y in oy..oy + s {
            for x in ox..ox + s {
                m = m.max(t.data()[(ch * h + y) * w + x].abs());
            }
        }
    }
    m
}

#[test]
fn gridpg_cells_have_distinct_classes() {
    for g in build_grids(&pool(), 2, 50, Setting::GridPG, 1).unwrap() {
        assert_eq!(g.labels.iter().collect::<BTreeSet<_>>().len(), 4);
        assert_eq!(g.targets, vec![0, 1, 2, 3]);
    }
}

#[test]
fn difull_repeats_the_corner_class() {
    for g in build_grids(&pool(), 2, 50, Setting::DiFull, 1).unwrap() {
        assert_eq!(g.labels[0], g.labels[3]);
        assert_ne!(g.image_ids[0], g.image_ids[3]);
        assert_eq!(g.labels.iter().collect::<BTreeSet<_>>().len(), 3);
        assert_eq!(g.targets, vec![0, 3]);
    }
}

#[test]
fn grid_depends_only_on_seed_setting_and_index() {
    let short = build_grids(&pool(), 2, 3, Setting::GridPG, 4).unwrap();
    let long = build_grids(&pool(), 2, 10, Setting::GridPG, 4).unwrap();
    assert_eq!(short[..], long[..3]);
    let other = build_grids(&pool(), 2, 3, Setting::GridPG, 5).unwrap();
    assert_ne!(short, other);
}

#[test]
fn too_few_classes_is_an_error() {
    let few: Vec<LabeledImage> = pool().into_iter().filter(|s| s.label < 3).collect();
    assert!(build_grids(&few, 2, 1, Setting::GridPG, 0).is_err());
    // three classes suffice when one of them repeats
    assert!(build_grids(&few, 2, 1, Setting::DiFull, 0).is_ok());
}

#[test]
fn five_hundred_gridpg_grids_give_two_thousand_records() {
    let model = build(
        Arch::TinyVggPlain,
        &ArchConfig {
            widths: [2; 8],
            ..small_cfg()
        },
        1,
    )
    .unwrap();
    let grids = build_grids(&pool(), 2, 500, Setting::GridPG, 2).unwrap();
    let campaign = Campaign {
        methods: vec![Method::Gradient],
        taps: vec!["final".into()],
        settings: vec![Setting::GridPG],
        config: MethodConfig::default(),
        seed: 0,
        keep_maps: false,
    };
    let result = run_campaign(&model, &campaign, &[(Setting::GridPG, grids)]).unwrap();
    assert!(result.failures.is_empty());
    assert_eq!(result.records.len(), 2000);
}

#[test]
fn one_cell_gridpg_is_the_plain_forward() {
    let model = plain();
    let img = &pool()[3];
    let g = build_grids(&pool(), 1, 1, Setting::GridPG, 0).unwrap().remove(0);
    let sm = SettingModel::new(&model, Setting::GridPG, 1).unwrap();
    assert_eq!(sm.outputs(&img.pixels).unwrap().data(), model.logits(&img.pixels).unwrap().data());
    assert_eq!(g.composite.shape(), img.pixels.shape());
}

#[test]
fn identical_cells_give_the_same_logits_for_every_cell() {
    let model = plain();
    let img = &pool()[0].pixels;
    let composite = attreval::grids::compose(&[img, img, img, img], 2).unwrap();
    let sm = SettingModel::new(&model, Setting::GridPG, 2).unwrap();
    let out = sm.outputs(&composite).unwrap();
    let pooled = sm.model.logits(&composite).unwrap();
    for cell in 0..4 {
        assert_eq!(&out.data()[cell * 5..(cell + 1) * 5], pooled.data());
    }
}

#[test]
fn difull_cell_logits_equal_each_cell_alone() {
    let model = plain();
    let g = grid(Setting::DiFull, 0);
    let sm = SettingModel::new(&model, Setting::DiFull, 2).unwrap();
    let out = sm.outputs(&g.composite).unwrap();
    let p = pool();
    for (cell, id) in g.image_ids.iter().enumerate() {
        let alone = model.logits(&p[*id as usize].pixels).unwrap();
        let row = &out.data()[cell * 5..(cell + 1) * 5];
        for (a, b) in row.iter().zip(alone.data()) {
            assert!((a - b).abs() <= 1e-5 * b.abs().max(1.0), "cell {cell}: {a} vs {b}");
        }
    }
    // same class in both corners, different images: different logits
    assert_ne!(out.data()[..5], out.data()[15..]);
}

#[test]
fn difull_cross_cell_gradient_is_exactly_zero() {
    let model = plain();
    let sm = SettingModel::new(&model, Setting::DiFull, 2).unwrap();
    for i in 0..5 {
        let g = grid(Setting::DiFull, i);
        let gr = input_grad(&sm, &g.composite, sm.target_index(0, g.labels[0]));
        assert!(cell_max(&gr, 0) > 0.0);
        for cell in 1..4 {
            assert_eq!(cell_max(&gr, cell), 0.0, "grid {i} cell {cell}");
        }
    }
}

#[test]
fn gridpg_far_cell_gradient_is_nonzero() {
    let model = plain();
    let sm = SettingModel::new(&model, Setting::GridPG, 2).unwrap();
    let g = grid(Setting::GridPG, 0);
    let gr = input_grad(&sm, &g.composite, sm.target_index(0, g.labels[0]));
    assert!(cell_max(&gr, 3) > 0.0);
}

/// Two padded 3×3 convs (receptive field 5), global pooling, linear head.
fn shallow_model() -> Model {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut conv = |cin: usize| Conv2d {
        weight: Tensor::new(vec![4, cin, 3, 3], (0..36 * cin).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap(),
        bias: None,
        stride: 1,
        padding: 1,
    };
    let (c1, c2) = (conv(3), conv(4));
    let head = Linear {
        weight: Tensor::new(vec![5, 4], (0..20).map(|i| if i % 2 == 0 { 1.0 } else { -0.5 }).collect()).unwrap(),
        bias: None,
    };
    let layers = vec![
        Layer::Conv2d(c1),
        Layer::ReLU,
        Layer::Conv2d(c2),
        Layer::ReLU,
        Layer::GlobalAvgPool,
        Layer::Linear(head),
    ];
    let taps = BTreeMap::from([("input".to_string(), 0), ("final".to_string(), 4)]);
    Model::new(layers, taps, 4, vec![3, SIZE, SIZE]).unwrap()
}

#[test]
fn dipart_gradient_stays_in_the_overlap_band() {
    let model = shallow_model();
    let sm = SettingModel::new(&model, Setting::DiPart, 2).unwrap();
    let g = grid(Setting::DiPart, 0);
    let gr = input_grad(&sm, &g.composite, sm.target_index(0, g.labels[0]));
    let (c, h, w) = gr.chw().unwrap();
    let mut max_reach = 0usize;
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                if gr.data()[(ch * h + y) * w + x] == 0.0 || (y < h / 2 && x < w / 2) {
                    continue;
                }
                // distance past the cell-0 border into another cell
                let reach = (y + 1).saturating_sub(h / 2).max((x + 1).saturating_sub(w / 2));
                max_reach = max_reach.max(reach);
            }
        }
    }
    // positions owned by cell 0 see at most 2 pixels across the border
    assert!(max_reach > 0, "no leakage at all");
    assert!(max_reach <= 2, "leakage reaches {max_reach} pixels deep");
}

/// Per-pixel model: 1×1 conv, ReLU, global pooling, linear head.
fn pointwise_model() -> Model {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let conv = Conv2d {
        weight: Tensor::new(vec![4, 3, 1, 1], (0..12).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap(),
        bias: None,
        stride: 1,
        padding: 0,
    };
    let head = Linear {
        weight: Tensor::new(vec![5, 4], (0..20).map(|_| r.gen_range(-1.0f32..1.0)).collect()).unwrap(),
        bias: None,
    };
    let layers = vec![Layer::Conv2d(conv), Layer::ReLU, Layer::GlobalAvgPool, Layer::Linear(head)];
    let taps = BTreeMap::from([("input".to_string(), 0), ("final".to_string(), 2)]);
    Model::new(layers, taps, 2, vec![3, SIZE, SIZE]).unwrap()
}

#[test]
fn pointwise_receptive_field_makes_dipart_equal_difull() {
    let model = pointwise_model();
    let full = SettingModel::new(&model, Setting::DiFull, 2).unwrap();
    let part = SettingModel::new(&model, Setting::DiPart, 2).unwrap();
    for i in 0..4 {
        let g = grid(Setting::DiFull, i);
        let a = full.outputs(&g.composite).unwrap();
        let b = part.outputs(&g.composite).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() <= 1e-6 * p.abs().max(1.0));
        }
    }
}

#[test]
fn gamma_infinity_is_the_focus_configuration() {
    let model = plain();
    let grids = build_grids(&pool(), 2, 3, Setting::GridPG, 3).unwrap();
    let taps = vec!["input".to_string(), "final".to_string()];
    let cfg = MethodConfig::default();
    let (rows, swept) = gamma_sweep(&model, &grids, &[f32::INFINITY], &taps, &cfg, 0).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.gamma.is_infinite() && r.count == 12));
    let campaign = Campaign {
        methods: vec![Method::Lrp(LrpPreset::Focus)],
        taps,
        settings: vec![Setting::GridPG],
        config: cfg,
        seed: 0,
        keep_maps: false,
    };
    let direct = run_campaign(&model, &campaign, &[(Setting::GridPG, grids)]).unwrap();
    assert_eq!(swept.records, direct.records);
}

/// x (1×1×2) → 1×1 conv (w=1) → ReLU → mean → linear [3, −2].
fn single_relu_toy() -> Model {
    let conv = Conv2d {
        weight: Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
        bias: None,
        stride: 1,
        padding: 0,
    };
    let head = Linear {
        weight: Tensor::new(vec![2, 1], vec![3.0, -2.0]).unwrap(),
        bias: None,
    };
    let layers = vec![Layer::Conv2d(conv), Layer::ReLU, Layer::GlobalAvgPool, Layer::Linear(head)];
    let taps = BTreeMap::from([("input".to_string(), 0), ("final".to_string(), 2)]);
    Model::new(layers, taps, 2, vec![1, 1, 2]).unwrap()
}

#[test]
fn guided_backprop_single_relu_by_hand() {
    let model = single_relu_toy();
    let x = Tensor::new(vec![1, 1, 2], vec![0.5, -0.3]).unwrap();
    // class 0: ∂y/∂x = 3·½·[x>0], incoming gradient positive
    assert_eq!(guided_backprop_attr(&model, &x, 0).unwrap().data(), &[1.5, 0.0]);
    assert_eq!(gradient_attr(&model, &x, 0).unwrap().data(), &[1.5, 0.0]);
    // class 1: incoming gradient −1 is blocked by the guided rule
    assert_eq!(guided_backprop_attr(&model, &x, 1).unwrap().data(), &[0.0, 0.0]);
    assert_eq!(gradient_attr(&model, &x, 1).unwrap().data(), &[1.0, 0.0]);
}

#[test]
fn ixg_sums_to_the_logit_on_a_bias_free_cnn() {
    let model = plain();
    let mut r = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5 {
        let x = random_image(&mut r, &[3, SIZE, SIZE]);
        let y = model.logits(&x).unwrap();
        for k in 0..5 {
            let total = ixg_attr(&model, &x, k).unwrap().sum();
            let logit = y.data()[k] as f64;
            assert!((total - logit).abs() <= 1e-3 * logit.abs().max(1e-3), "{total} vs {logit}");
        }
    }
}

#[test]
fn smoothgrad_variance_shrinks_with_more_samples() {
    let model = plain();
    let x = random_image(&mut ChaCha8Rng::seed_from_u64(2), &[3, SIZE, SIZE]);
    // mean squared difference between maps from disjoint seed sets
    let spread = |n: usize| -> f64 {
        let maps: Vec<Tensor> = (0..6)
            .map(|s| smoothgrad_attr(&model, &x, 1, NoiseBase::Gradient, n, 0.2, 1000 + s).unwrap())
            .collect();
        let mut acc = 0.0;
        for pair in maps.chunks(2) {
            acc += pair[0].zip_map(&pair[1], |a, b| (a - b) * (a - b)).unwrap().sum();
        }
        acc
    };
    let (few, many) = (spread(4), spread(64));
    assert!(many < few / 4.0, "n=4: {few}, n=64: {many}");
}
