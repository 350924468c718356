use std::collections::BTreeMap;

use super::layer::{Layer, ReluBackward};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TAP_INPUT: &str = "input";
pub const TAP_MID: &str = "mid";
pub const TAP_FINAL: &str = "final";

/// A sequential network with named tap points.
///
/// A tap `t` names the boundary *before* layer `t`: tap 0 is the model
/// input, tap `head_start` is the output of the last spatial layer. Layers
/// from `head_start` on form the classification head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub taps: BTreeMap<String, usize>,
    pub head_start: usize,
    /// Nominal input shape (`C×H×W` for image models). Spatial dims are
    /// advisory: the convolutional part accepts any size that fits.
    pub input_shape: Vec<usize>,
    /// `n > 1` evaluates spatially coupled layers independently on each
    /// tile of an `n×n` partition of the feature map.
    pub tiles: usize,
}

/// Activations recorded by [`Model::forward`]: `activations[i]` is the
/// input of layer `i` and `activations[i + 1]` its output.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub activations: Vec<Tensor>,
    captured: bool,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.activations.last().expect("trace is never empty")
    }

    pub fn is_captured(&self) -> bool {
        self.captured
    }

    pub fn input(&self, layer: usize) -> &Tensor {
        &self.activations[layer]
    }
}

impl Model {
    pub fn new(layers: Vec<Layer>, taps: BTreeMap<String, usize>, head_start: usize, input_shape: Vec<usize>) -> Result<Self> {
        let model = Model {
            layers,
            taps,
            head_start,
            input_shape,
            tiles: 1,
        };
        model.validate()?;
        Ok(model)
    }

    /// Structural checks that do not need data: parameter shapes, tap
    /// bounds, and shape compatibility of consecutive layers for the
    /// nominal input.
    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate(i)?;
        }
        if self.head_start > self.layers.len() {
            return Err(Error::InvalidModel(format!(
                "head_start {} beyond {} layers",
                self.head_start,
                self.layers.len()
            )));
        }
        for (name, &idx) in &self.taps {
            if idx > self.head_start {
                return Err(Error::InvalidModel(format!(
                    "tap `{name}` at {idx} lies inside the head (starts at {})",
                    self.head_start
                )));
            }
        }
        if self.tiles == 0 {
            return Err(Error::InvalidModel("tiles must be at least 1".into()));
        }
        self.shapes(&self.input_shape)?;
        Ok(())
    }

    /// Shapes of every activation for a given input shape (`len + 1` entries).
    pub fn shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![input.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer.output_shape_tiled(shapes.last().unwrap(), self.tiles, i)?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn num_outputs(&self) -> Result<usize> {
        Ok(self.shapes(&self.input_shape)?.last().unwrap().iter().product())
    }

    pub fn tap_index(&self, name: &str) -> Result<usize> {
        if let Some(&i) = self.taps.get(name) {
            return Ok(i);
        }
        match name.parse::<usize>() {
            Ok(i) if i <= self.head_start => Ok(i),
            _ => Err(Error::UnknownTap(name.to_string())),
        }
    }

    /// Tap indices for an "all layers" sweep: the input plus every
    /// post-activation boundary in the backbone.
    pub fn all_depth_taps(&self) -> Vec<usize> {
        let mut taps = vec![0];
        for i in 1..=self.head_start {
            if matches!(self.layers[i - 1], Layer::ReLU) {
                taps.push(i);
            }
        }
        taps
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(Layer::num_params).sum()
    }

    pub fn forward(&self, input: &Tensor, capture: bool) -> Result<ForwardTrace> {
        self.check_input(input)?;
        let mut activations = vec![input.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(activations.last().unwrap(), self.tiles, i)?;
            if capture {
                activations.push(y);
            } else {
                activations[0] = y;
            }
        }
        Ok(ForwardTrace {
            activations,
            captured: capture,
        })
    }

    /// Convenience: logits only.
    pub fn logits(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input, false)?.activations.pop().unwrap())
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let expected_rank = self.input_shape.len();
        let channel_ok = match (input.shape(), &self.input_shape[..]) {
            ([c, _, _], [ec, _, _]) => c == ec,
            (s, e) => s == e,
        };
        if input.ndim() != expected_rank || !channel_ok {
            return Err(Error::ShapeMismatch {
                layer: 0,
                kind: "input",
                expected: format!("{:?}", self.input_shape),
                got: input.shape().to_vec(),
            });
        }
        if !input.is_finite() {
            return Err(Error::InvalidTensor("input contains non-finite values".into()));
        }
        Ok(())
    }

    /// `∂y_target/∂(input of layer i)` for every layer `i`.
    pub fn backward_gradient(&self, trace: &ForwardTrace, target: usize) -> Result<Vec<Tensor>> {
        let seed = self.one_hot_seed(trace, target)?;
        self.backward_from(trace, seed, ReluBackward::Standard)
    }

    pub(crate) fn one_hot_seed(&self, trace: &ForwardTrace, target: usize) -> Result<Tensor> {
        let out = trace.logits();
        if target >= out.len() {
            return Err(Error::TargetOutOfRange {
                target,
                outputs: out.len(),
            });
        }
        let mut seed = Tensor::zeros(out.shape());
        seed.data_mut()[target] = 1.0;
        Ok(seed)
    }

    /// Backpropagate an arbitrary output gradient. Returns gradients with
    /// respect to each layer input (`layers.len()` entries).
    pub fn backward_from(&self, trace: &ForwardTrace, seed: Tensor, relu: ReluBackward) -> Result<Vec<Tensor>> {
        if !trace.captured && !self.layers.is_empty() {
            return Err(Error::InvalidModel(
                "backward needs a trace recorded with capture=true".into(),
            ));
        }
        let n = self.layers.len();
        let mut grads: Vec<Tensor> = Vec::with_capacity(n);
        let mut g = seed;
        for i in (0..n).rev() {
            g = self.layers[i].backward(&trace.activations[i], &g, self.tiles, relu);
            grads.push(g.clone());
        }
        grads.reverse();
        Ok(grads)
    }

    /// Input gradient only, skipping the per-layer copies.
    pub fn input_gradient(&self, trace: &ForwardTrace, target: usize, relu: ReluBackward) -> Result<Tensor> {
        let mut g = self.one_hot_seed(trace, target)?;
        if !trace.captured && !self.layers.is_empty() {
            return Err(Error::InvalidModel(
                "backward needs a trace recorded with capture=true".into(),
            ));
        }
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(&trace.activations[i], &g, self.tiles, relu);
        }
        Ok(g)
    }

    /// Split into `(f_pre, f_explain)` at a tap so that
    /// `f_explain(f_pre(x)) == model(x)` bit for bit.
    pub fn split(&self, tap: &str) -> Result<(Model, Model)> {
        let at = self.tap_index(tap)?;
        let shapes = self.shapes(&self.input_shape)?;
        let pre_taps = self
            .taps
            .iter()
            .filter(|(_, &i)| i <= at)
            .map(|(k, &i)| (k.clone(), i))
            .collect();
        let explain_taps = self
            .taps
            .iter()
            .filter(|(_, &i)| i >= at)
            .map(|(k, &i)| (k.clone(), i - at))
            .collect();
        let pre = Model {
            layers: self.layers[..at].to_vec(),
            taps: pre_taps,
            head_start: at,
            input_shape: self.input_shape.clone(),
            tiles: self.tiles,
        };
        let explain = Model {
            layers: self.layers[at..].to_vec(),
            taps: explain_taps,
            head_start: self.head_start - at,
            input_shape: shapes[at].clone(),
            tiles: self.tiles,
        };
        Ok((pre, explain))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layer::{Conv2d, Linear};

    fn tiny() -> Model {
        let conv = Conv2d {
            weight: Tensor::new(vec![2, 1, 1, 1], vec![1.0, -1.0]).unwrap(),
            bias: None,
            stride: 1,
            padding: 0,
        };
        let lin = Linear {
            weight: Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
            bias: None,
        };
        let mut taps = BTreeMap::new();
        taps.insert(TAP_INPUT.to_string(), 0);
        taps.insert(TAP_FINAL.to_string(), 2);
        Model::new(
            vec![Layer::Conv2d(conv), Layer::ReLU, Layer::GlobalAvgPool, Layer::Linear(lin)],
            taps,
            2,
            vec![1, 2, 2],
        )
        .unwrap()
    }

    #[test]
    fn relu_forward() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(Layer::ReLU.forward(&x, 1, 0).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let m = tiny();
        let bad = Tensor::zeros(&[3, 2, 2]);
        match m.forward(&bad, false) {
            Err(Error::ShapeMismatch { layer: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn target_out_of_range() {
        let m = tiny();
        let t = m.forward(&Tensor::zeros(&[1, 2, 2]), true).unwrap();
        assert!(matches!(
            m.backward_gradient(&t, 5),
            Err(Error::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn split_at_input_is_whole_model() {
        let m = tiny();
        let (pre, explain) = m.split(TAP_INPUT).unwrap();
        assert!(pre.layers.is_empty());
        assert_eq!(explain.layers, m.layers);
        assert!(matches!(m.split("nope"), Err(Error::UnknownTap(_))));
    }

    #[test]
    fn tap_inside_head_rejected() {
        let mut m = tiny();
        m.taps.insert("bad".into(), 3);
        assert!(m.validate().is_err());
    }
}
