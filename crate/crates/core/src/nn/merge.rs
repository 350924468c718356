use super::layer::Layer;
use super::model::Model;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fold every inference-mode `BatchNorm2d` into the `Conv2d` or `Linear`
/// directly before it. Tap indices are shifted to account for the removed
/// layers.
pub fn merge_batchnorm(model: &Model) -> Result<Model> {
    if !model.layers.iter().any(|l| matches!(l, Layer::BatchNorm2d(_))) {
        return Ok(model.clone());
    }
    let mut layers: Vec<Layer> = Vec::with_capacity(model.layers.len());
    let mut removed_before = vec![0usize; model.layers.len() + 1];
    let mut removed = 0;
    for (i, layer) in model.layers.iter().enumerate() {
        removed_before[i] = removed;
        let Layer::BatchNorm2d(bn) = layer else {
            layers.push(layer.clone());
            continue;
        };
        let (scale, shift) = bn.affine();
        match layers.last_mut() {
            Some(Layer::Conv2d(conv)) => {
                let per_out = conv.weight.len() / conv.out_channels();
                fold(&mut conv.weight, &mut conv.bias, &scale, &shift, per_out);
            }
            Some(Layer::Linear(lin)) => {
                let per_out = lin.in_features();
                fold(&mut lin.weight, &mut lin.bias, &scale, &shift, per_out);
            }
            _ => {
                return Err(Error::InvalidModel(format!(
                    "batchnorm at layer {i} has no directly preceding conv2d or linear layer"
                )))
            }
        }
        removed += 1;
    }
    removed_before[model.layers.len()] = removed;
    let remap = |idx: usize| idx - removed_before[idx];
    let merged = Model {
        layers,
        taps: model.taps.iter().map(|(k, &v)| (k.clone(), remap(v))).collect(),
        head_start: remap(model.head_start),
        input_shape: model.input_shape.clone(),
        tiles: model.tiles,
    };
    merged.validate()?;
    Ok(merged)
}

fn fold(weight: &mut Tensor, bias: &mut Option<Tensor>, scale: &[f32], shift: &[f32], per_out: usize) {
    for (o, &s) in scale.iter().enumerate() {
        for w in &mut weight.data_mut()[o * per_out..(o + 1) * per_out] {
            *w *= s;
        }
    }
    let old = bias.take();
    let new: Vec<f32> = (0..scale.len())
        .map(|o| old.as_ref().map_or(0.0, |b| b.data()[o]) * scale[o] + shift[o])
        .collect();
    *bias = Some(Tensor::from_parts(vec![scale.len()], new));
}
