//! Finite-difference checks of every backward kernel.

use std::collections::BTreeMap;

use attreval::nn::layer::{Layer, Linear};
use attreval::nn::model::Model;
use attreval::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

mod common;

use common::fdcheck::{self, Errors, TOL};

fn assert_small(errors: Errors) {
    for (name, err) in errors {
        assert!(err < TOL, "{name}: rel err {err}");
    }
}

#[test]
fn conv2d_gradients() {
    assert_small(fdcheck::conv2d());
}

#[test]
fn tiled_conv2d_gradients() {
    assert_small(fdcheck::tiled_conv2d());
}

#[test]
fn linear_gradients() {
    assert_small(fdcheck::linear());
}

#[test]
fn relu_and_pool_gradients() {
    assert_small(fdcheck::relu_and_pool());
}

#[test]
fn batchnorm_gradients() {
    assert_small(fdcheck::batchnorm());
}

#[test]
fn region_pool_gradients() {
    assert_small(fdcheck::region_pool());
}

#[test]
fn forward_matches_index_loop_oracle() {
    for seed in 0..3 {
        let model = fdcheck::three_layer_cnn(seed);
        let mut r = ChaCha8Rng::seed_from_u64(50 + seed);
        let x = fdcheck::rand_tensor(&mut r, &[3, 8, 8]);
        let fast = model.logits(&x).unwrap();
        let slow = common::model_forward(&model, &common::Arr::from_tensor(&x));
        for (a, b) in fast.data().iter().zip(&slow.data) {
            assert!((*a as f64 - b).abs() <= 1e-5 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn three_layer_cnn_input_gradient() {
    assert_small(fdcheck::three_layer_cnn_input());
}

#[test]
fn tinyvgg_input_gradient() {
    assert_small(fdcheck::tinyvgg_input());
}

#[test]
fn linear_model_gradient_is_weight() {
    let w = vec![0.5, -2.0, 3.0];
    let layer = Layer::Linear(Linear {
        weight: Tensor::new(vec![1, 3], w.clone()).unwrap(),
        bias: None,
    });
    let model = Model::new(vec![layer], BTreeMap::new(), 0, vec![3]).unwrap();
    let x = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
    let trace = model.forward(&x, true).unwrap();
    let g = model.backward_gradient(&trace, 0).unwrap();
    assert_eq!(g[0].data(), &w[..]);
}
