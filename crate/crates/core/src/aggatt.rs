//! Aggregate attribution maps: sort maps by localization score, split them
//! into percentile bins, average each bin and render the averages.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::LocalizationRecord;
use crate::tensor::Tensor;

/// Percentile edges of the six bins.
pub const BIN_EDGES: [u32; 7] = [0, 2, 5, 50, 95, 98, 100];
pub const NUM_BINS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinMember {
    pub sample_id: u64,
    pub target_cell: usize,
    pub score: f64,
    pub numerator: f64,
    /// Position of the member's record and map in the caller's input.
    #[serde(skip)]
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct AggAttResult {
    pub bin_edges: [u32; 7],
    /// Members of each bin, best localized first.
    pub bins: Vec<Vec<BinMember>>,
    pub aggregates: Vec<Tensor>,
    pub normalizer: f32,
    pub median_exemplars: Vec<Option<BinMember>>,
}

/// Start index of every bin for `n` sorted items, rounding each percentile
/// boundary to the nearest index (halves round up).
pub fn bin_bounds(n: usize) -> [usize; 7] {
    BIN_EDGES.map(|p| (p as usize * n + 50) / 100)
}

fn order(a: &BinMember, b: &BinMember) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(b.numerator.total_cmp(&a.numerator))
        .then(a.sample_id.cmp(&b.sample_id))
        .then(a.target_cell.cmp(&b.target_cell))
}

/// Sort by score (descending), then positive mass inside the target cell
/// (descending), then sample id and target cell, and cut into bins.
pub fn sort_records(records: &[LocalizationRecord]) -> Result<Vec<Vec<BinMember>>> {
    if records.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut members: Vec<BinMember> = records
        .iter()
        .enumerate()
        .map(|(index, r)| BinMember {
            sample_id: r.sample_id,
            target_cell: r.target_cell,
            score: r.score,
            numerator: r.numerator,
            index,
        })
        .collect();
    members.sort_by(order);
    let b = bin_bounds(members.len());
    Ok((0..NUM_BINS).map(|i| members[b[i]..b[i + 1]].to_vec()).collect())
}

/// Bin the records and average the maps of every bin. `maps[i]` belongs to
/// `records[i]`.
pub fn sort_and_bin(records: &[LocalizationRecord], maps: &[Tensor]) -> Result<AggAttResult> {
    if records.len() != maps.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} records but {} maps",
            records.len(),
            maps.len()
        )));
    }
    let bins = sort_records(records)?;
    let (aggregates, normalizer) = aggregate(&bins, maps)?;
    let median_exemplars = bins.iter().map(|b| median_exemplar(b).cloned()).collect();
    Ok(AggAttResult {
        bin_edges: BIN_EDGES,
        bins,
        aggregates,
        normalizer,
        median_exemplars,
    })
}

/// Elementwise mean of each bin and the largest absolute value over all
/// means. An empty bin gives a zero map.
pub fn aggregate(bins: &[Vec<BinMember>], maps: &[Tensor]) -> Result<(Vec<Tensor>, f32)> {
    let shape = maps.first().ok_or(Error::EmptyRecords)?.shape().to_vec();
    if let Some(m) = maps.iter().find(|m| m.shape() != shape.as_slice()) {
        return Err(Error::DimensionMismatch(format!(
            "maps differ in shape: {shape:?} vs {:?}",
            m.shape()
        )));
    }
    let aggregates: Vec<Tensor> = bins
        .par_iter()
        .map(|bin| {
            let mut acc = vec![0.0f64; maps[0].len()];
            for m in bin {
                for (a, &v) in acc.iter_mut().zip(maps[m.index].data()) {
                    *a += v as f64;
                }
            }
            let k = bin.len().max(1) as f64;
            Tensor::new(shape.clone(), acc.into_iter().map(|a| (a / k) as f32).collect())
        })
        .collect::<Result<_>>()?;
    let normalizer = aggregates.iter().map(Tensor::max_abs).fold(0.0, f32::max);
    Ok((aggregates, normalizer))
}

pub fn median_exemplar(bin: &[BinMember]) -> Option<&BinMember> {
    if bin.is_empty() {
        None
    } else {
        bin.get((bin.len() - 1) / 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderMode {
    /// `[0, normalizer]` on a white-to-green ramp; negatives clip to white.
    Positive,
    /// `[-normalizer, normalizer]` on red-white-green.
    Diverging,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(RenderMode::Positive),
            "diverging" => Ok(RenderMode::Diverging),
            _ => Err(Error::Config(format!("unknown render mode `{s}`"))),
        }
    }
}

fn channel(v: f32) -> u8 {
    (255.0 * v).round().clamp(0.0, 255.0) as u8
}

/// RGB colour of value `v` relative to `normalizer`.
pub fn color(v: f32, normalizer: f32, mode: RenderMode) -> [u8; 3] {
    let t = if normalizer > 0.0 { v / normalizer } else { 0.0 };
    let t = match mode {
        RenderMode::Positive => t.clamp(0.0, 1.0),
        RenderMode::Diverging => t.clamp(-1.0, 1.0),
    };
    if t >= 0.0 {
        let fade = channel(1.0 - t);
        [fade, 255, fade]
    } else {
        let fade = channel(1.0 + t);
        [255, fade, fade]
    }
}

/// Binary PPM (P6) bytes for an `H×W` map.
pub fn render_heatmap(map: &Tensor, normalizer: f32, mode: RenderMode) -> Result<Vec<u8>> {
    let (h, w) = map.hw()?;
    if !(normalizer > 0.0) && map.data().iter().any(|&v| v != 0.0) {
        return Err(Error::Render(format!("normalizer {normalizer} for a nonzero map")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for &v in map.data() {
        out.extend_from_slice(&color(v, normalizer, mode));
    }
    Ok(out)
}

/// Mid-gray image standing in for an empty bin.
pub fn render_placeholder(h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P6\n# empty bin\n{w} {h}\n255\n").into_bytes();
    out.resize(out.len() + 3 * h * w, 128);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinIndex {
    pub percentiles: [u32; 2],
    pub image: String,
    pub members: Vec<BinMember>,
    pub exemplar: Option<BinMember>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggAttIndex {
    pub version: u32,
    pub method: String,
    pub tap: String,
    pub setting: String,
    pub mode: RenderMode,
    pub normalizer: f32,
    pub bins: Vec<BinIndex>,
}

/// Write the six images as `<stem>_bin<i>.ppm` and `<stem>_index.json`
/// into `dir`.
pub fn write_outputs(
    result: &AggAttResult,
    dir: &Path,
    stem: &str,
    (method, tap, setting): (&str, &str, &str),
    mode: RenderMode,
) -> Result<AggAttIndex> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let images: Vec<Vec<u8>> = result
        .bins
        .par_iter()
        .zip(&result.aggregates)
        .map(|(bin, agg)| {
            if bin.is_empty() {
                let (h, w) = agg.hw()?;
                Ok(render_placeholder(h, w))
            } else {
                render_heatmap(agg, result.normalizer, mode)
            }
        })
        .collect::<Result<_>>()?;
    let mut bins = Vec::new();
    for (i, bytes) in images.iter().enumerate() {
        let image = format!("{stem}_bin{i}.ppm");
        let path = dir.join(&image);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        bins.push(BinIndex {
            percentiles: [result.bin_edges[i], result.bin_edges[i + 1]],
            image,
            members: result.bins[i].clone(),
            exemplar: result.median_exemplars[i].clone(),
        });
    }
    let index = AggAttIndex {
        version: 1,
        method: method.to_string(),
        tap: tap.to_string(),
        setting: setting.to_string(),
        mode,
        normalizer: result.normalizer,
        bins,
    };
    let path = dir.join(format!("{stem}_index.json"));
    let mut json = serde_json::to_vec_pretty(&index)?;
    json.push(b'\n');
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grids::Setting;

    fn rec(id: u64, score: f64, numerator: f64) -> LocalizationRecord {
        LocalizationRecord {
            sample_id: id,
            method: "ixg".into(),
            tap: "input".into(),
            setting: Setting::GridPG,
            target_cell: 0,
            score,
            numerator,
        }
    }

    fn sizes(n: usize) -> Vec<usize> {
        let b = bin_bounds(n);
        (0..NUM_BINS).map(|i| b[i + 1] - b[i]).collect()
    }

    #[test]
    fn bin_sizes() {
        assert_eq!(sizes(100), [2, 3, 45, 45, 3, 2]);
        assert_eq!(sizes(6), [0, 0, 3, 3, 0, 0]);
        assert_eq!(sizes(1).iter().sum::<usize>(), 1);
    }

    #[test]
    fn ties_fall_back_to_numerator_then_id() {
        let recs = vec![rec(5, 0.5, 1.0), rec(1, 0.5, 3.0), rec(2, 0.5, 1.0), rec(0, 0.9, 0.1)];
        let bins = sort_records(&recs).unwrap();
        let ids: Vec<u64> = bins.concat().iter().map(|m| m.sample_id).collect();
        assert_eq!(ids, [0, 1, 2, 5]);
    }

    #[test]
    fn median_positions() {
        let bin: Vec<BinMember> = (0..45)
            .map(|i| BinMember {
                sample_id: i,
                target_cell: 0,
                score: 0.0,
                numerator: 0.0,
                index: 0,
            })
            .collect();
        assert_eq!(median_exemplar(&bin[..1]).unwrap().sample_id, 0);
        assert_eq!(median_exemplar(&bin[..3]).unwrap().sample_id, 1);
        assert_eq!(median_exemplar(&bin).unwrap().sample_id, 22);
        assert!(median_exemplar(&bin[..0]).is_none());
    }

    #[test]
    fn opposite_maps_cancel() {
        let a = Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        let recs: Vec<_> = (0..6).map(|i| rec(i, 0.5, 1.0)).collect();
        let maps: Vec<_> = (0..6).map(|i| if i % 2 == 0 { a.clone() } else { a.scale(-1.0) }).collect();
        let r = sort_and_bin(&recs, &maps).unwrap();
        // ids 0,1,2 land in bin 2 and ids 3,4,5 in bin 3
        assert_eq!(r.aggregates[2].data(), a.scale(1.0 / 3.0).data());
        assert!(r.aggregates[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(r.normalizer, 1.0);
        let single = sort_and_bin(&recs[..1], &maps[..1]).unwrap();
        let occupied = single.bins.iter().position(|b| !b.is_empty()).unwrap();
        assert_eq!(single.aggregates[occupied], a);
    }

    #[test]
    fn render_endpoints_and_header() {
        let mut m = Tensor::zeros(&[64, 64]);
        let zero = render_heatmap(&m, 0.0, RenderMode::Diverging).unwrap();
        assert!(zero.starts_with(b"P6\n64 64\n255\n"));
        assert_eq!(zero.len(), 13 + 12288);
        assert!(zero[13..].iter().all(|&b| b == 255));
        m.data_mut()[0] = 2.0;
        m.data_mut()[1] = -2.0;
        m.data_mut()[2] = 1.0;
        let img = render_heatmap(&m, 2.0, RenderMode::Diverging).unwrap();
        assert_eq!(&img[13..22], &[0, 255, 0, 255, 0, 0, 128, 255, 128]);
        let pos = render_heatmap(&m, 2.0, RenderMode::Positive).unwrap();
        assert_eq!(&pos[16..19], &[255, 255, 255]);
        assert!(render_heatmap(&m, 0.0, RenderMode::Positive).is_err());
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(sort_and_bin(&[], &[]), Err(Error::EmptyRecords)));
    }
}
