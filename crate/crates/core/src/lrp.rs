//! Layer-wise relevance propagation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attribution::channel_sum;
use crate::error::{Error, Result};
use crate::nn::layer::{Layer, Linear, ReluBackward};
use crate::nn::model::Model;
use crate::nn::ops;
use crate::tensor::Tensor;

/// Stabilizer of the γ-rule denominator. The ε-configuration uses the same
/// value so that γ = 0 reproduces it exactly.
pub const GAMMA_STABILIZER: f32 = 1e-6;
/// ε of the dense layers in the named presets.
pub const DENSE_EPSILON: f32 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    /// Denominator `z + ε·sign(z)`, `sign(0) = +1`.
    Epsilon(f32),
    /// Generalized γ-rule: contributions agreeing in sign with the output
    /// are boosted by γ.
    Gamma(f32),
    /// Only positive contributions `(a·w)⁺`.
    ZPlus,
    /// Bounded input rule for the pixel layer.
    ZB { lower: f32, upper: f32 },
    /// Relevance passes through unchanged (shape-preserving layers only).
    Passthrough,
}

/// One rule per layer of the explained model. Rules on layers without
/// parameters are ignored: ReLU passes relevance on, max pooling routes it
/// to the winner and average pools split it proportionally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrpConfig {
    pub rules: Vec<Rule>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrpPreset {
    /// z^B on the pixel layer, z⁺ on the other convolutions, ε = 0.25 on
    /// dense layers.
    Focus,
    /// Like `Focus` with the γ-rule on convolutions. γ = ∞ is `Focus`.
    Composite(f32),
    /// Like `Focus` with ε on convolutions.
    Epsilon(f32),
    /// z⁺ on every parameterized layer.
    ZPlus,
}

impl fmt::Display for LrpPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LrpPreset::Focus => f.write_str("focus"),
            LrpPreset::Composite(g) => write!(f, "composite:{g}"),
            LrpPreset::Epsilon(e) => write!(f, "epsilon:{e}"),
            LrpPreset::ZPlus => f.write_str("zplus"),
        }
    }
}

impl FromStr for LrpPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n.to_string(), Some(a.to_string())),
            None => (s.clone(), None),
        };
        let num = |a: &Option<String>, default: Option<f32>| -> Result<f32> {
            match a.as_deref() {
                Some("inf") | Some("infinity") | Some("∞") => Ok(f32::INFINITY),
                Some(v) => v.parse::<f32>().map_err(|_| Error::Config(format!("bad LRP parameter in `{s}`"))),
                None => default.ok_or_else(|| Error::Config(format!("`{name}` needs a parameter"))),
            }
        };
        match name.as_str() {
            "focus" => Ok(LrpPreset::Focus),
            "zplus" | "z+" => Ok(LrpPreset::ZPlus),
            "composite" => {
                let g = num(&arg, Some(0.25))?;
                if g.is_infinite() && g > 0.0 {
                    Ok(LrpPreset::Focus)
                } else if g >= 0.0 {
                    Ok(LrpPreset::Composite(g))
                } else {
                    Err(Error::Config(format!("γ must be ≥ 0, got {g}")))
                }
            }
            "epsilon" => {
                let e = num(&arg, Some(GAMMA_STABILIZER))?;
                if e > 0.0 && e.is_finite() {
                    Ok(LrpPreset::Epsilon(e))
                } else {
                    Err(Error::Config(format!("ε must be > 0, got {e}")))
                }
            }
            _ => Err(Error::Config(format!("unknown LRP preset `{s}`"))),
        }
    }
}

impl LrpPreset {
    /// Rule assignment for an explained model. `at_input` allows z^B on
    /// the first convolution (pixel bounds 0 and 1).
    pub fn config(&self, f: &Model, at_input: bool) -> Result<LrpConfig> {
        let first_param = f.layers.iter().position(|l| l.num_params() > 0);
        let rules = f
            .layers
            .iter()
            .enumerate()
            .map(|(i, layer)| match layer {
                Layer::Conv2d(_) => {
                    let pixel = at_input && Some(i) == first_param;
                    match self {
                        LrpPreset::ZPlus => Rule::ZPlus,
                        _ if pixel => Rule::ZB { lower: 0.0, upper: 1.0 },
                        LrpPreset::Focus => Rule::ZPlus,
                        LrpPreset::Composite(g) => Rule::Gamma(*g),
                        LrpPreset::Epsilon(e) => Rule::Epsilon(*e),
                    }
                }
                Layer::Linear(_) => match self {
                    LrpPreset::ZPlus => Rule::ZPlus,
                    _ => Rule::Epsilon(DENSE_EPSILON),
                },
                _ => Rule::Passthrough,
            })
            .collect();
        Ok(LrpConfig { rules })
    }
}

/// Weight-sharing linear map (`Conv2d` or `Linear`) with substitutable
/// weights.
struct Affine<'a> {
    layer: &'a Layer,
    tiles: usize,
}

impl Affine<'_> {
    fn weights(&self) -> &[f32] {
        match self.layer {
            Layer::Conv2d(c) => c.weight.data(),
            Layer::Linear(l) => l.weight.data(),
            _ => unreachable!(),
        }
    }

    fn bias(&self) -> Option<&[f32]> {
        match self.layer {
            Layer::Conv2d(c) => c.bias.as_ref().map(|b| b.data()),
            Layer::Linear(l) => l.bias.as_ref().map(|b| b.data()),
            _ => unreachable!(),
        }
    }

    /// `W·a` without bias.
    fn fwd(&self, w: &[f32], a: &Tensor) -> Tensor {
        match self.layer {
            Layer::Conv2d(c) => ops::conv_forward_with(a, w, c.out_channels(), c.geom(), self.tiles),
            Layer::Linear(l) => crate::nn::layer::linear_forward(a.data(), w, None, l.out_features()),
            _ => unreachable!(),
        }
    }

    /// `Wᵀ·s`, shaped like the layer input `like`.
    fn bwd(&self, w: &[f32], s: &Tensor, like: &Tensor) -> Tensor {
        match self.layer {
            Layer::Conv2d(c) => {
                let sh = like.shape();
                ops::conv_backward_input(s, w, c.in_channels(), (sh[1], sh[2]), c.geom(), self.tiles)
            }
            Layer::Linear(Linear { .. }) => {
                crate::nn::layer::linear_backward_input(s.data(), w, like.len(), like.shape())
            }
            _ => unreachable!(),
        }
    }

    fn add_bias(&self, z: &mut Tensor, select: impl Fn(f32) -> f32) {
        let Some(b) = self.bias() else { return };
        let per = z.len() / b.len();
        for (o, &bv) in b.iter().enumerate() {
            let v = select(bv);
            for x in &mut z.data_mut()[o * per..(o + 1) * per] {
                *x += v;
            }
        }
    }
}

fn pos(v: f32) -> f32 {
    v.max(0.0)
}

fn neg(v: f32) -> f32 {
    v.min(0.0)
}

fn sign1(v: f32) -> f32 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn split_weights(w: &[f32]) -> (Vec<f32>, Vec<f32>) {
    (w.iter().copied().map(pos).collect(), w.iter().copied().map(neg).collect())
}

fn zip3(a: &Tensor, b: &Tensor, c: &Tensor, f: impl Fn(f32, f32, f32) -> f32) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((&x, &y), &z)| f(x, y, z))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn affine_rule(op: &Affine, rule: Rule, a: &Tensor, r: &Tensor) -> Result<Tensor> {
    let w = op.weights();
    match rule {
        Rule::Epsilon(eps) => {
            let mut z = op.fwd(w, a);
            op.add_bias(&mut z, |b| b);
            let s = z.zip_map(r, |z, r| r / (z + eps * sign1(z)))?;
            a.zip_map(&op.bwd(w, &s, a), |a, g| a * g)
        }
        Rule::ZPlus => {
            let (wp, wn) = split_weights(w);
            let ap = a.map(pos);
            let an = a.map(neg);
            let mut z = op.fwd(&wp, &ap);
            z.add_assign(&op.fwd(&wn, &an));
            let s = z.zip_map(r, |z, r| if z > 0.0 { r / z } else { 0.0 })?;
            let gp = op.bwd(&wp, &s, a);
            let gn = op.bwd(&wn, &s, a);
            Ok(zip3(a, &gp, &gn, |a, gp, gn| pos(a) * gp + neg(a) * gn))
        }
        Rule::Gamma(gamma) => {
            let mut z = op.fwd(w, a);
            op.add_bias(&mut z, |b| b);
            if gamma == 0.0 {
                let s = z.zip_map(r, |z, r| r / (z + GAMMA_STABILIZER * sign1(z)))?;
                return a.zip_map(&op.bwd(w, &s, a), |a, g| a * g);
            }
            let (wp, wn) = split_weights(w);
            let ap = a.map(pos);
            let an = a.map(neg);
            // positive part: a⁺W⁺ + a⁻W⁻ + b⁺, negative part: a⁺W⁻ + a⁻W⁺ + b⁻
            let mut zp = op.fwd(&wp, &ap);
            zp.add_assign(&op.fwd(&wn, &an));
            op.add_bias(&mut zp, pos);
            let mut zn = op.fwd(&wn, &ap);
            zn.add_assign(&op.fwd(&wp, &an));
            op.add_bias(&mut zn, neg);
            let zg = zip3(&z, &zp, &zn, |z, zp, zn| {
                let boost = if z > 0.0 {
                    zp
                } else if z < 0.0 {
                    zn
                } else {
                    0.0
                };
                z + gamma * boost
            });
            let s = zg.zip_map(r, |z, r| r / (z + GAMMA_STABILIZER * sign1(z)))?;
            let sp = zip3(&z, &s, &s, |z, s, _| if z > 0.0 { s } else { 0.0 });
            let sn = zip3(&z, &s, &s, |z, s, _| if z < 0.0 { s } else { 0.0 });
            let plain = op.bwd(w, &s, a);
            let pp = op.bwd(&wp, &sp, a);
            let np = op.bwd(&wn, &sp, a);
            let pn = op.bwd(&wp, &sn, a);
            let nn = op.bwd(&wn, &sn, a);
            let data = (0..a.len())
                .map(|i| {
                    let av = a.data()[i];
                    let boosted = pos(av) * (pp.data()[i] + nn.data()[i]) + neg(av) * (np.data()[i] + pn.data()[i]);
                    av * plain.data()[i] + gamma * boosted
                })
                .collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Rule::ZB { lower, upper } => {
            let (wp, wn) = split_weights(w);
            let l = Tensor::full(a.shape(), lower);
            let h = Tensor::full(a.shape(), upper);
            let mut z = op.fwd(w, a);
            let zl = op.fwd(&wp, &l);
            let zh = op.fwd(&wn, &h);
            for ((zv, &lv), &hv) in z.data_mut().iter_mut().zip(zl.data()).zip(zh.data()) {
                *zv -= lv + hv;
            }
            let s = z.zip_map(r, |z, r| r / (z + GAMMA_STABILIZER * sign1(z)))?;
            let g = op.bwd(w, &s, a);
            let gp = op.bwd(&wp, &s, a);
            let gn = op.bwd(&wn, &s, a);
            let data = (0..a.len())
                .map(|i| a.data()[i] * g.data()[i] - lower * gp.data()[i] - upper * gn.data()[i])
                .collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Rule::Passthrough => Err(Error::Lrp(format!("{} layer needs a propagation rule", op.layer.kind()))),
    }
}

fn check(f: &Model, config: &LrpConfig) -> Result<()> {
    if config.rules.len() != f.layers.len() {
        return Err(Error::Lrp(format!(
            "config has {} rules for {} layers",
            config.rules.len(),
            f.layers.len()
        )));
    }
    let first_param = f.layers.iter().position(|l| l.num_params() > 0);
    for (i, (layer, rule)) in f.layers.iter().zip(&config.rules).enumerate() {
        match (layer, rule) {
            (Layer::BatchNorm2d(_), _) => {
                return Err(Error::Lrp(format!("layer {i}: merge BatchNorm before running LRP")))
            }
            (Layer::Conv2d(_) | Layer::Linear(_), Rule::Passthrough) => {
                return Err(Error::Lrp(format!("layer {i} ({}) has no rule", layer.kind())))
            }
            (_, Rule::ZB { .. }) if Some(i) != first_param => {
                return Err(Error::Lrp(format!("layer {i}: z^B is only valid on the first layer")))
            }
            (_, Rule::Epsilon(e)) if !(*e > 0.0) => return Err(Error::Lrp(format!("layer {i}: ε must be > 0"))),
            (_, Rule::Gamma(g)) if !(*g >= 0.0) => return Err(Error::Lrp(format!("layer {i}: γ must be ≥ 0"))),
            _ => {}
        }
    }
    Ok(())
}

/// Relevance at the input of every layer, plus the initial output
/// relevance as the last entry (`layers.len() + 1` tensors).
pub fn lrp_relevances(f: &Model, x: &Tensor, target: usize, config: &LrpConfig) -> Result<Vec<Tensor>> {
    check(f, config)?;
    let trace = f.forward(x, true)?;
    let logits = trace.logits();
    if target >= logits.len() {
        return Err(Error::TargetOutOfRange {
            target,
            outputs: logits.len(),
        });
    }
    let mut r = Tensor::zeros(logits.shape());
    r.data_mut()[target] = logits.data()[target];
    let mut out = vec![r.clone()];
    for i in (0..f.layers.len()).rev() {
        let layer = &f.layers[i];
        let a = trace.input(i);
        r = match layer {
            Layer::Conv2d(_) | Layer::Linear(_) => affine_rule(&Affine { layer, tiles: f.tiles }, config.rules[i], a, &r)?,
            Layer::ReLU | Layer::Flatten | Layer::MaxPool2d { .. } => {
                layer.backward(a, &r, f.tiles, ReluBackward::Standard)
            }
            Layer::AvgPool2d { .. } | Layer::GlobalAvgPool | Layer::RegionAvgPool(_) => {
                let z = trace.input(i + 1);
                let s = z.zip_map(&r, |z, r| if z != 0.0 { r / z } else { 0.0 })?;
                a.zip_map(&layer.backward(a, &s, f.tiles, ReluBackward::Standard), |a, g| a * g)?
            }
            Layer::BatchNorm2d(_) => unreachable!("rejected by check"),
        };
        out.push(r.clone());
    }
    out.reverse();
    Ok(out)
}

/// Channel-summed relevance at the input of `f`.
pub fn lrp_attr(f: &Model, x: &Tensor, target: usize, config: &LrpConfig) -> Result<Tensor> {
    let rel = lrp_relevances(f, x, target, config)?;
    channel_sum(&rel[0])
}

/// Insert, after the region pooling of a per-cell head, a linear layer
/// that for each head passes its own cell's features through unchanged and
/// adds two neurons holding `+S` and `−S`, with `S` the sum of all other
/// cells' features. Both extra neurons feed the head's classifier with
/// weight 1, so the logits are unchanged while the z⁺-rule routes
/// relevance into the other cells.
pub fn implinv_transform(model: &Model) -> Result<Model> {
    let n = model.layers.len();
    let bad = |m: &str| Error::InvalidModel(format!("implementation-invariance transform: {m}"));
    if n < 2 {
        return Err(bad("model too short"));
    }
    let (Layer::RegionAvgPool(pool), Layer::Linear(head)) = (&model.layers[n - 2], &model.layers[n - 1]) else {
        return Err(bad("expected a region pooling layer followed by a linear head"));
    };
    let regions = pool.regions;
    let feat_total = head.in_features();
    if feat_total % regions != 0 || head.out_features() % regions != 0 {
        return Err(bad("head size does not split into regions"));
    }
    let c = feat_total / regions;
    let k = head.out_features() / regions;
    // the head must be block diagonal
    let hw = head.weight.data();
    for o in 0..head.out_features() {
        for i in 0..feat_total {
            if o / k != i / c && hw[o * feat_total + i] != 0.0 {
                return Err(bad("linear head is not block diagonal over regions"));
            }
        }
    }

    let width = c + 2;
    let mut w1 = vec![0.0f32; regions * width * feat_total];
    for r in 0..regions {
        for j in 0..c {
            w1[(r * width + j) * feat_total + r * c + j] = 1.0;
        }
        for other in (0..regions).filter(|&o| o != r) {
            for j in 0..c {
                w1[(r * width + c) * feat_total + other * c + j] = 1.0;
                w1[(r * width + c + 1) * feat_total + other * c + j] = -1.0;
            }
        }
    }
    let mut w2 = vec![0.0f32; regions * k * regions * width];
    for r in 0..regions {
        for cls in 0..k {
            let row = (r * k + cls) * regions * width;
            for j in 0..c {
                w2[row + r * width + j] = hw[(r * k + cls) * feat_total + r * c + j];
            }
            w2[row + r * width + c] = 1.0;
            w2[row + r * width + c + 1] = 1.0;
        }
    }
    let mut layers = model.layers[..n - 1].to_vec();
    layers.push(Layer::Linear(Linear {
        weight: Tensor::new(vec![regions * width, feat_total], w1)?,
        bias: None,
    }));
    layers.push(Layer::Linear(Linear {
        weight: Tensor::new(vec![regions * k, regions * width], w2)?,
        bias: head.bias.clone(),
    }));
    let out = Model {
        layers,
        taps: model.taps.clone(),
        head_start: model.head_start,
        input_shape: model.input_shape.clone(),
        tiles: model.tiles,
    };
    out.validate()?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    /// `inf` stands for the Focus configuration.
    pub gamma: f32,
    pub tap: String,
    pub count: usize,
    pub mean: f64,
    pub quartiles: crate::analysis::Quartiles,
}

pub const GAMMA_TABLE_HEADER: &str = "gamma,tap,count,mean,min,q1,median,q3,max";

/// Localization of the Composite configuration over a range of γ on GridPG
/// grids. Rows are ordered by γ, then tap.
pub fn gamma_sweep(
    model: &Model,
    grids: &[crate::grids::GridSample],
    gammas: &[f32],
    taps: &[String],
    config: &crate::attribution::MethodConfig,
    seed: u64,
) -> Result<(Vec<GammaRow>, crate::grids::CampaignResult)> {
    use crate::attribution::Method;
    use crate::grids::{run_campaign, Campaign, Setting};
    let methods: Vec<Method> = gammas
        .iter()
        .map(|&g| {
            if g.is_infinite() && g > 0.0 {
                Ok(Method::Lrp(LrpPreset::Focus))
            } else if g >= 0.0 {
                Ok(Method::Lrp(LrpPreset::Composite(g)))
            } else {
                Err(Error::Config(format!("γ must be ≥ 0, got {g}")))
            }
        })
        .collect::<Result<_>>()?;
    let campaign = Campaign {
        methods: methods.clone(),
        taps: taps.to_vec(),
        settings: vec![Setting::GridPG],
        config: config.clone(),
        seed,
        keep_maps: false,
    };
    let result = run_campaign(model, &campaign, &[(Setting::GridPG, grids.to_vec())])?;
    let mut rows = Vec::new();
    for (&gamma, method) in gammas.iter().zip(&methods) {
        let name = method.to_string();
        for tap in taps {
            let scores: Vec<f64> = result
                .records
                .iter()
                .filter(|r| r.method == name && r.tap == *tap)
                .map(|r| r.score)
                .collect();
            if scores.is_empty() {
                continue;
            }
            rows.push(GammaRow {
                gamma,
                tap: tap.clone(),
                count: scores.len(),
                mean: scores.iter().sum::<f64>() / scores.len() as f64,
                quartiles: crate::analysis::quartiles(&scores)?,
            });
        }
    }
    Ok((rows, result))
}

pub fn write_gamma_table(rows: &[GammaRow], mut out: impl std::io::Write) -> Result<()> {
    let io = |e| Error::io("<gamma table>", e);
    writeln!(out, "{GAMMA_TABLE_HEADER}").map_err(io)?;
    for r in rows {
        let q = &r.quartiles;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.gamma, r.tap, r.count, r.mean, q.min, q.q1, q.median, q.q3, q.max
        )
        .map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn linear_model(w: Vec<f32>, out: usize, inp: usize) -> Model {
        let lin = Linear {
            weight: Tensor::new(vec![out, inp], w).unwrap(),
            bias: None,
        };
        Model::new(vec![Layer::Linear(lin)], BTreeMap::new(), 0, vec![inp]).unwrap()
    }

    #[test]
    fn zplus_single_positive_contributor_takes_all() {
        let m = linear_model(vec![2.0, -1.0, 0.5], 1, 3);
        let x = Tensor::new(vec![3], vec![1.0, 1.0, -1.0]).unwrap();
        let cfg = LrpConfig { rules: vec![Rule::ZPlus] };
        let r = lrp_relevances(&m, &x, 0, &cfg).unwrap();
        let y = 2.0 - 1.0 - 0.5;
        assert_eq!(r[0].data(), &[y, 0.0, 0.0]);
    }

    #[test]
    fn epsilon_limit_is_input_times_gradient() {
        let m = linear_model(vec![0.3, -0.7, 1.1, 0.2], 1, 4);
        let x = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let cfg = LrpConfig { rules: vec![Rule::Epsilon(1e-9)] };
        let r = lrp_relevances(&m, &x, 0, &cfg).unwrap();
        for ((rv, xv), wv) in r[0].data().iter().zip(x.data()).zip([0.3, -0.7, 1.1, 0.2]) {
            assert!((rv - xv * wv).abs() < 1e-4 * (xv * wv).abs().max(1e-3));
        }
    }

    #[test]
    fn preset_names() {
        assert_eq!("composite:inf".parse::<LrpPreset>().unwrap(), LrpPreset::Focus);
        assert_eq!("composite:0.1".parse::<LrpPreset>().unwrap(), LrpPreset::Composite(0.1));
        assert!("composite:-1".parse::<LrpPreset>().is_err());
        assert!("epsilon:0".parse::<LrpPreset>().is_err());
    }
}
