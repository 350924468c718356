//! Grid evaluation settings and the localization score.
//!
//! An `n×n` grid of images is classified in one of three ways:
//!
//! * `GridPG`: the backbone sees the whole composite and the class logit is
//!   the classifier applied at every position, averaged over the whole map.
//! * `DiFull`: every cell goes through the backbone on its own and has its
//!   own pooled classifier, so cells cannot influence each other.
//! * `DiPart`: the backbone sees the whole composite, but each cell's
//!   classifier only pools positions whose receptive field is centred on
//!   that cell.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_targets, upsample_grid, AttrContext, Method, MethodConfig};
use crate::data::LabeledImage;
use crate::error::{Error, Result};
use crate::nn::layer::{Layer, Linear, RegionPool};
use crate::nn::model::{Model, TAP_INPUT};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    GridPG,
    DiFull,
    DiPart,
}

impl Setting {
    pub const ALL: [Setting; 3] = [Setting::GridPG, Setting::DiFull, Setting::DiPart];

    pub fn name(self) -> &'static str {
        match self {
            Setting::GridPG => "gridpg",
            Setting::DiFull => "difull",
            Setting::DiPart => "dipart",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gridpg" => Ok(Setting::GridPG),
            "difull" => Ok(Setting::DiFull),
            "dipart" => Ok(Setting::DiPart),
            other => Err(Error::Config(format!("unknown setting `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSample {
    pub id: u64,
    pub n: usize,
    pub setting: Setting,
    /// `C×(n·h)×(n·w)`.
    pub composite: Tensor,
    /// Row-major cell labels and source image ids.
    pub labels: Vec<usize>,
    pub image_ids: Vec<u64>,
    /// Cells that are explained: all of them for GridPG, the top-left and
    /// bottom-right cell otherwise.
    pub targets: Vec<usize>,
}

impl GridSample {
    pub fn cell_size(&self) -> (usize, usize) {
        (self.composite.shape()[1] / self.n, self.composite.shape()[2] / self.n)
    }
}

/// Tile `n×n` images into one composite.
pub fn compose(cells: &[&Tensor], n: usize) -> Result<Tensor> {
    if cells.len() != n * n || n == 0 {
        return Err(Error::DimensionMismatch(format!("{} cells for a {n}×{n} grid", cells.len())));
    }
    let (c, h, w) = cells[0].chw()?;
    if cells.iter().any(|t| t.shape() != [c, h, w]) {
        return Err(Error::DimensionMismatch("grid cells differ in shape".into()));
    }
    let (hh, ww) = (h * n, w * n);
    let mut out = vec![0.0f32; c * hh * ww];
    for (idx, cell) in cells.iter().enumerate() {
        let (r, col) = (idx / n, idx % n);
        for ch in 0..c {
            for y in 0..h {
                let dst = (ch * hh + r * h + y) * ww + col * w;
                out[dst..dst + w].copy_from_slice(&cell.data()[(ch * h + y) * w..(ch * h + y + 1) * w]);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, hh, ww], out))
}

/// Sample `count` grids from a pool of (confidently classified) images.
///
/// GridPG grids hold `n²` distinct classes. DiFull and DiPart grids repeat
/// the top-left class in the bottom-right cell (with a different image) and
/// use distinct classes elsewhere. Grid `i` depends only on `(seed,
/// setting, i)` and the pool.
pub fn build_grids(pool: &[LabeledImage], n: usize, count: usize, setting: Setting, seed: u64) -> Result<Vec<GridSample>> {
    if n == 0 {
        return Err(Error::Config("grid size n must be ≥ 1".into()));
    }
    let classes = pool.iter().map(|s| s.label).max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in pool.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let available: Vec<usize> = (0..classes).filter(|&c| !by_class[c].is_empty()).collect();
    let repeatable: Vec<usize> = (0..classes).filter(|&c| by_class[c].len() >= 2).collect();
    let cells = n * n;
    let distinct_needed = if setting == Setting::GridPG || cells == 1 { cells } else { cells - 1 };
    if available.len() < distinct_needed {
        return Err(Error::InsufficientClasses {
            needed: distinct_needed,
            available: available.len(),
        });
    }
    if setting != Setting::GridPG && cells > 1 && repeatable.is_empty() {
        return Err(Error::InsufficientClasses {
            needed: 1,
            available: 0,
        });
    }

    (0..count as u64)
        .into_par_iter()
        .map(|gi| {
            let mut r = rng::stream(seed, &[rng::label_key("grid"), rng::label_key(setting.name()), gi]);
            let mut picks: Vec<usize> = Vec::with_capacity(cells);
            if setting == Setting::GridPG || cells == 1 {
                let chosen: Vec<usize> = available.choose_multiple(&mut r, cells).copied().collect();
                for c in chosen {
                    picks.push(by_class[c][r.gen_range(0..by_class[c].len())]);
                }
            } else {
                let repeat = *repeatable.choose(&mut r).unwrap();
                let others: Vec<usize> = available
                    .iter()
                    .copied()
                    .filter(|&c| c != repeat)
                    .collect::<Vec<_>>()
                    .choose_multiple(&mut r, cells - 2)
                    .copied()
                    .collect();
                let pair: Vec<usize> = by_class[repeat].choose_multiple(&mut r, 2).copied().collect();
                picks.push(pair[0]);
                for c in others {
                    picks.push(by_class[c][r.gen_range(0..by_class[c].len())]);
                }
                picks.push(pair[1]);
            }
            let tensors: Vec<&Tensor> = picks.iter().map(|&i| &pool[i].pixels).collect();
            let targets = if setting == Setting::GridPG {
                (0..cells).collect()
            } else if cells == 1 {
                vec![0]
            } else {
                vec![0, cells - 1]
            };
            Ok(GridSample {
                id: gi,
                n,
                setting,
                composite: compose(&tensors, n)?,
                labels: picks.iter().map(|&i| pool[i].label).collect(),
                image_ids: picks.iter().map(|&i| pool[i].id).collect(),
                targets,
            })
        })
        .collect()
}

/// Input-space receptive-field centre of each position along one axis of
/// the map after `layers`.
pub fn rf_centers(layers: &[Layer], out_len: usize) -> Result<Vec<f64>> {
    let mut geo = Vec::new();
    for l in layers {
        match l.spatial_geometry() {
            Some(g) => geo.push(g),
            None => {
                return Err(Error::InvalidModel(format!(
                    "receptive fields need spatial layers, found {}",
                    l.kind()
                )))
            }
        }
    }
    Ok((0..out_len)
        .map(|i| {
            let mut c = i as f64;
            for &(k, s, p) in geo.iter().rev() {
                c = c * s as f64 - p as f64 + (k as f64 - 1.0) / 2.0;
            }
            c
        })
        .collect())
}

/// Cell index of an input coordinate: the number of cell borders strictly
/// below it, so points on a border go to the earlier cell.
fn cell_of(x: f64, cell: usize, n: usize) -> usize {
    (1..n).filter(|&c| (c * cell) as f64 - 0.5 < x).count()
}

/// A base model rearranged for one setting.
#[derive(Clone, Debug, PartialEq)]
pub struct SettingModel {
    pub setting: Setting,
    pub n: usize,
    pub classes: usize,
    pub model: Model,
}

impl SettingModel {
    /// `base` must end in `[GlobalAvgPool, Linear]` right at `head_start`;
    /// its nominal input is one cell.
    pub fn new(base: &Model, setting: Setting, n: usize) -> Result<Self> {
        let hs = base.head_start;
        let head = match &base.layers[hs..] {
            [Layer::GlobalAvgPool, Layer::Linear(l)] => l.clone(),
            _ => {
                return Err(Error::InvalidModel(
                    "grid settings need a [global_avg_pool, linear] head".into(),
                ))
            }
        };
        let (c, h, w) = match base.input_shape[..] {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::InvalidModel("grid settings need image inputs".into())),
        };
        let classes = head.out_features();
        let input_shape = vec![c, h * n, w * n];
        let model = match setting {
            Setting::GridPG => Model {
                input_shape,
                ..base.clone()
            },
            Setting::DiFull | Setting::DiPart => {
                let mut grid_model = Model {
                    layers: base.layers[..hs].to_vec(),
                    taps: base.taps.clone(),
                    head_start: hs,
                    input_shape: input_shape.clone(),
                    tiles: if setting == Setting::DiFull { n } else { 1 },
                };
                let shapes = grid_model.shapes(&input_shape)?;
                let (feat_c, fh, fw) = match shapes[hs][..] {
                    [a, b, d] => (a, b, d),
                    _ => return Err(Error::InvalidModel("backbone output is not C×H×W".into())),
                };
                let assignment: Vec<u32> = if setting == Setting::DiFull {
                    if fh % n != 0 || fw % n != 0 {
                        return Err(Error::InvalidModel(format!("feature map {fh}×{fw} does not tile into {n}×{n}")));
                    }
                    (0..fh * fw)
                        .map(|p| ((p / fw) / (fh / n) * n + (p % fw) / (fw / n)) as u32)
                        .collect()
                } else {
                    let ys = rf_centers(&base.layers[..hs], fh)?;
                    let xs = rf_centers(&base.layers[..hs], fw)?;
                    (0..fh * fw)
                        .map(|p| (cell_of(ys[p / fw], h, n) * n + cell_of(xs[p % fw], w, n)) as u32)
                        .collect()
                };
                let pool = RegionPool {
                    regions: n * n,
                    height: fh,
                    width: fw,
                    assignment,
                };
                if pool.counts().contains(&0) {
                    return Err(Error::InvalidModel("a grid cell owns no feature-map position".into()));
                }
                let regions = n * n;
                let mut wd = vec![0.0f32; regions * classes * regions * feat_c];
                for r in 0..regions {
                    for k in 0..classes {
                        let row = (r * classes + k) * regions * feat_c + r * feat_c;
                        wd[row..row + feat_c].copy_from_slice(&head.weight.data()[k * feat_c..(k + 1) * feat_c]);
                    }
                }
                let bias = head
                    .bias
                    .as_ref()
                    .map(|b| Tensor::from_parts(vec![regions * classes], b.data().repeat(regions)));
                grid_model.layers.push(Layer::RegionAvgPool(pool));
                grid_model.layers.push(Layer::Linear(Linear {
                    weight: Tensor::new(vec![regions * classes, regions * feat_c], wd)?,
                    bias,
                }));
                grid_model
            }
        };
        model.validate()?;
        Ok(SettingModel {
            setting,
            n,
            classes,
            model,
        })
    }

    /// Output index explained for a cell showing `class`.
    pub fn target_index(&self, cell: usize, class: usize) -> usize {
        match self.setting {
            Setting::GridPG => class,
            _ => cell * self.classes + class,
        }
    }

    /// Per-cell logits, `n²×classes`. GridPG repeats the pooled logits for
    /// every cell.
    pub fn outputs(&self, composite: &Tensor) -> Result<Tensor> {
        let y = self.model.logits(composite)?;
        let cells = self.n * self.n;
        let data = match self.setting {
            Setting::GridPG => y.data().repeat(cells),
            _ => y.into_data(),
        };
        Tensor::new(vec![cells, self.classes], data)
    }
}

fn eval_setting(model: &Model, grid: &GridSample, setting: Setting) -> Result<Tensor> {
    SettingModel::new(model, setting, grid.n)?.outputs(&grid.composite)
}

pub fn eval_gridpg(model: &Model, grid: &GridSample) -> Result<Tensor> {
    eval_setting(model, grid, Setting::GridPG)
}

pub fn eval_difull(model: &Model, grid: &GridSample) -> Result<Tensor> {
    eval_setting(model, grid, Setting::DiFull)
}

pub fn eval_dipart(model: &Model, grid: &GridSample) -> Result<Tensor> {
    eval_setting(model, grid, Setting::DiPart)
}

/// Share of positive attribution inside the target cell, and that
/// positive mass. The score is 0 when there is no positive attribution.
pub fn localization_score(map: &Tensor, n: usize, target_cell: usize) -> Result<(f64, f64)> {
    let (h, w) = map.hw()?;
    if n == 0 || h % n != 0 || w % n != 0 || target_cell >= n * n {
        return Err(Error::DimensionMismatch(format!(
            "map {h}×{w} cannot hold cell {target_cell} of a {n}×{n} grid"
        )));
    }
    let (ch, cw) = (h / n, w / n);
    let (tr, tc) = (target_cell / n, target_cell % n);
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for y in 0..h {
        let row_in = y / ch == tr;
        for x in 0..w {
            let v = map.data()[y * w + x];
            if v > 0.0 {
                total += v as f64;
                if row_in && x / cw == tc {
                    inside += v as f64;
                }
            }
        }
    }
    let score = if total > 0.0 { inside / total } else { 0.0 };
    Ok((score, inside))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub sample_id: u64,
    pub method: String,
    pub tap: String,
    pub setting: Setting,
    pub target_cell: usize,
    pub score: f64,
    pub numerator: f64,
}

pub const RECORDS_HEADER: &str = "sample_id,method,tap,setting,target_cell,score,numerator";

pub fn write_records_csv(records: &[LocalizationRecord], mut out: impl Write) -> Result<()> {
    let io = |e| Error::io("<records csv>", e);
    writeln!(out, "{RECORDS_HEADER}").map_err(io)?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.sample_id, r.method, r.tap, r.setting, r.target_cell, r.score, r.numerator
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn read_records_csv(input: impl BufRead) -> Result<Vec<LocalizationRecord>> {
    let mut lines = input.lines();
    let bad = |m: String| Error::Config(format!("records csv: {m}"));
    match lines.next() {
        Some(Ok(h)) if h.trim() == RECORDS_HEADER => {}
        Some(Ok(h)) => return Err(bad(format!("unexpected header `{h}`"))),
        Some(Err(e)) => return Err(Error::io("<records csv>", e)),
        None => return Ok(Vec::new()),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io("<records csv>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("line {}: expected 7 fields", i + 2)));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("line {}: bad number `{s}`", i + 2)));
        out.push(LocalizationRecord {
            sample_id: f[0].parse().map_err(|_| bad(format!("line {}: bad sample id", i + 2)))?,
            method: f[1].to_string(),
            tap: f[2].to_string(),
            setting: f[3].parse()?,
            target_cell: f[4].parse().map_err(|_| bad(format!("line {}: bad target cell", i + 2)))?,
            score: num(f[5])?,
            numerator: num(f[6])?,
        });
    }
    Ok(out)
}

pub fn write_records_jsonl(records: &[LocalizationRecord], mut out: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io("<records jsonl>", e))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Campaign {
    pub methods: Vec<Method>,
    /// Tap names or layer indices.
    pub taps: Vec<String>,
    pub settings: Vec<Setting>,
    pub config: MethodConfig,
    pub seed: u64,
    /// Keep the upsampled maps alongside the records.
    pub keep_maps: bool,
}

#[derive(Clone, Debug, Default)]
pub struct CampaignResult {
    pub records: Vec<LocalizationRecord>,
    /// Upsampled maps, parallel to `records`, when requested.
    pub maps: Vec<Tensor>,
    /// `(setting, sample id, message)` of samples that failed.
    pub failures: Vec<(Setting, u64, String)>,
}

/// Seed for the stochastic methods on one sample.
pub fn sample_seed(seed: u64, sample_id: u64) -> u64 {
    rng::derive_seed(seed, &[rng::label_key("attr"), sample_id])
}

/// A setting model split at every campaign tap.
pub struct PreparedSetting {
    pub model: SettingModel,
    /// `(tap name, is input tap, pre-processing part, explained part)`.
    pub splits: Vec<(String, bool, Model, Model)>,
}

impl PreparedSetting {
    pub fn new(base: &Model, setting: Setting, n: usize, taps: &[String]) -> Result<Self> {
        Self::from_setting_model(SettingModel::new(base, setting, n)?, taps)
    }

    pub fn from_setting_model(sm: SettingModel, taps: &[String]) -> Result<Self> {
        let input = sm.model.tap_index(TAP_INPUT).unwrap_or(0);
        let splits = taps
            .iter()
            .map(|tap| {
                let idx = sm.model.tap_index(tap)?;
                let (pre, explain) = sm.model.split(tap)?;
                Ok((tap.clone(), idx == input, pre, explain))
            })
            .collect::<Result<_>>()?;
        Ok(PreparedSetting { model: sm, splits })
    }

    /// Records and upsampled maps of one grid, ordered by (method, tap,
    /// target).
    pub fn evaluate_grid(&self, campaign: &Campaign, grid: &GridSample) -> Result<Vec<(LocalizationRecord, Tensor)>> {
        let sm = &self.model;
        let (_, hh, ww) = grid.composite.chw()?;
        let targets: Vec<usize> = grid
            .targets
            .iter()
            .map(|&cell| sm.target_index(cell, grid.labels[cell]))
            .collect();
        let ctx_seed = sample_seed(campaign.seed, grid.id);
        // per_tap[tap][method][target]
        let mut per_tap = Vec::with_capacity(self.splits.len());
        for (_, at_input, pre, explain) in &self.splits {
            let tap_input = pre.logits(&grid.composite)?;
            per_tap.push(attribute_targets(
                explain,
                &tap_input,
                &targets,
                &campaign.methods,
                &campaign.config,
                AttrContext {
                    seed: ctx_seed,
                    at_input: *at_input,
                },
            )?);
        }
        let mut out = Vec::new();
        for (mi, method) in campaign.methods.iter().enumerate() {
            for ((tap, ..), maps) in self.splits.iter().zip(&per_tap) {
                for (&cell, map) in grid.targets.iter().zip(&maps[mi]) {
                    let up = upsample_grid(map, hh, ww, grid.n)?;
                    let (score, numerator) = localization_score(&up, grid.n, cell)?;
                    let rec = LocalizationRecord {
                        sample_id: grid.id,
                        method: method.to_string(),
                        tap: tap.clone(),
                        setting: sm.setting,
                        target_cell: cell,
                        score,
                        numerator,
                    };
                    out.push((rec, up));
                }
            }
        }
        Ok(out)
    }
}

/// Order campaign output by (setting, method, tap, grid, target). `per_grid`
/// holds each grid's output in grid order.
pub fn merge_grid_outputs(
    campaign: &Campaign,
    per_grid: Vec<Vec<(LocalizationRecord, Tensor)>>,
    result: &mut CampaignResult,
) {
    let mut recs: Vec<(usize, usize, LocalizationRecord, Tensor)> = Vec::new();
    for unit in per_grid {
        for (rec, map) in unit {
            let mi = campaign.methods.iter().position(|m| m.to_string() == rec.method).unwrap_or(0);
            let ti = campaign.taps.iter().position(|t| *t == rec.tap).unwrap_or(0);
            recs.push((mi, ti, rec, map));
        }
    }
    // stable: grid order and target order are preserved within a key
    recs.sort_by_key(|(mi, ti, _, _)| (*mi, *ti));
    for (_, _, rec, map) in recs {
        result.records.push(rec);
        if campaign.keep_maps {
            result.maps.push(map);
        }
    }
}

/// Attribute and score every (method, tap, setting, grid, target). Grids
/// run in parallel; output order is fixed by (setting, method, tap, grid,
/// target) regardless of scheduling. A failing grid is reported and the
/// rest continue.
pub fn run_campaign(model: &Model, campaign: &Campaign, grids: &[(Setting, Vec<GridSample>)]) -> Result<CampaignResult> {
    campaign.config.validate()?;
    let mut result = CampaignResult::default();
    for &setting in &campaign.settings {
        let Some((_, setting_grids)) = grids.iter().find(|(s, _)| *s == setting) else {
            return Err(Error::Config(format!("no grids supplied for {setting}")));
        };
        let Some(first) = setting_grids.first() else { continue };
        let prepared = PreparedSetting::new(model, setting, first.n, &campaign.taps)?;
        let units: Vec<Result<Vec<(LocalizationRecord, Tensor)>>> = setting_grids
            .par_iter()
            .map(|grid| prepared.evaluate_grid(campaign, grid))
            .collect();
        let mut ok = Vec::with_capacity(units.len());
        for (grid, unit) in setting_grids.iter().zip(units) {
            match unit {
                Ok(u) => ok.push(u),
                Err(e) => {
                    log::warn!("{setting} sample {} failed: {e}", grid.id);
                    result.failures.push((setting, grid.id, e.to_string()));
                }
            }
        }
        merge_grid_outputs(campaign, ok, &mut result);
    }
    Ok(result)
}
