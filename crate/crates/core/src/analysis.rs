//! Statistics over localization records: rank correlations between
//! method/tap pairs and per-group quartile summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grids::{LocalizationRecord, Setting};

/// A record is identified by its grid and target cell.
pub type SampleKey = (u64, usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSeries {
    pub method: String,
    pub tap: String,
    pub setting: Setting,
    pub scores: Vec<(SampleKey, f64)>,
}

impl ScoreSeries {
    pub fn label(&self) -> String {
        format!("{}@{}", self.method, self.tap)
    }

    fn values(&self) -> Vec<f64> {
        self.scores.iter().map(|&(_, s)| s).collect()
    }
}

/// Group records by (method, tap, setting) in order of first appearance.
pub fn series_from_records(records: &[LocalizationRecord]) -> Vec<ScoreSeries> {
    let mut out: Vec<ScoreSeries> = Vec::new();
    for r in records {
        let pos = out
            .iter()
            .position(|s| s.method == r.method && s.tap == r.tap && s.setting == r.setting);
        let series = match pos {
            Some(p) => &mut out[p],
            None => {
                out.push(ScoreSeries {
                    method: r.method.clone(),
                    tap: r.tap.clone(),
                    setting: r.setting,
                    scores: Vec::new(),
                });
                out.last_mut().unwrap()
            }
        };
        series.scores.push(((r.sample_id, r.target_cell), r.score));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Correlation {
    Value(f64),
    /// One of the series has no rank variance, e.g. every score is 1.0.
    Degenerate,
}

impl Correlation {
    pub fn value(self) -> Option<f64> {
        match self {
            Correlation::Value(v) => Some(v),
            Correlation::Degenerate => None,
        }
    }
}

impl fmt::Display for Correlation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Correlation::Value(v) => write!(f, "{v}"),
            Correlation::Degenerate => f.write_str("degenerate"),
        }
    }
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Correlation {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        Correlation::Degenerate
    } else {
        Correlation::Value((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
    }
}

fn aligned(s: &ScoreSeries) -> Result<BTreeMap<SampleKey, f64>> {
    let map: BTreeMap<SampleKey, f64> = s.scores.iter().copied().collect();
    if map.len() != s.scores.len() {
        return Err(Error::Config(format!("series `{}` repeats a sample id", s.label())));
    }
    Ok(map)
}

/// Spearman correlation of two series over the same samples.
pub fn spearman(a: &ScoreSeries, b: &ScoreSeries) -> Result<Correlation> {
    let (ma, mb) = (aligned(a)?, aligned(b)?);
    if !ma.keys().eq(mb.keys()) {
        return Err(Error::MismatchedIds {
            a: a.label(),
            b: b.label(),
        });
    }
    if ma.is_empty() {
        return Ok(Correlation::Degenerate);
    }
    let va: Vec<f64> = ma.into_values().collect();
    let vb: Vec<f64> = mb.into_values().collect();
    Ok(pearson(&average_ranks(&va), &average_ranks(&vb)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Quantile `p` of sorted data by linear interpolation between order
/// statistics: position `p·(n−1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() {
        return Err(Error::EmptyRecords);
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(Quartiles {
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    })
}

pub fn median(values: &[f64]) -> Result<f64> {
    quartiles(values).map(|q| q.median)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<Correlation>>,
}

/// All pairwise correlations; the lower triangle mirrors the upper one.
pub fn correlation_matrix(series: &[ScoreSeries]) -> Result<CorrelationMatrix> {
    let n = series.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect();
    let rhos: Vec<Correlation> = pairs
        .par_iter()
        .map(|&(i, j)| spearman(&series[i], &series[j]))
        .collect::<Result<_>>()?;
    let mut values = vec![vec![Correlation::Degenerate; n]; n];
    for (&(i, j), rho) in pairs.iter().zip(rhos) {
        values[i][j] = rho;
        values[j][i] = rho;
    }
    Ok(CorrelationMatrix {
        labels: series.iter().map(ScoreSeries::label).collect(),
        values,
    })
}

impl CorrelationMatrix {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<correlation csv>", e);
        write!(out, "series").map_err(io)?;
        for l in &self.labels {
            write!(out, ",{l}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
        for (l, row) in self.labels.iter().zip(&self.values) {
            write!(out, "{l}").map_err(io)?;
            for v in row {
                write!(out, ",{v}").map_err(io)?;
            }
            writeln!(out).map_err(io)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub tap: String,
    pub setting: Setting,
    pub count: usize,
    pub mean: f64,
    #[serde(flatten)]
    pub quartiles: Quartiles,
    /// Share of scores exactly equal to 1.
    pub frac_one: f64,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: u32,
    pub rows: Vec<SummaryRow>,
}

pub const SUMMARY_HEADER: &str = "method,tap,setting,count,mean,min,q1,median,q3,max,frac_one";

/// Per (method, tap, setting) summary in order of first appearance.
pub fn summarize(records: &[LocalizationRecord]) -> Result<Report> {
    if records.is_empty() {
        log::warn!("no records to summarize");
    }
    let rows = series_from_records(records)
        .into_iter()
        .map(|s| {
            let v = s.values();
            Ok(SummaryRow {
                count: v.len(),
                mean: v.iter().sum::<f64>() / v.len() as f64,
                quartiles: quartiles(&v)?,
                frac_one: v.iter().filter(|&&x| x == 1.0).count() as f64 / v.len() as f64,
                method: s.method,
                tap: s.tap,
                setting: s.setting,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Report {
        version: REPORT_VERSION,
        rows,
    })
}

impl Report {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let io = |e| Error::io("<summary csv>", e);
        writeln!(out, "{SUMMARY_HEADER}").map_err(io)?;
        for r in &self.rows {
            let q = &r.quartiles;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.method, r.tap, r.setting, r.count, r.mean, q.min, q.q1, q.median, q.q3, q.max, r.frac_one
            )
            .map_err(io)?;
        }
        Ok(())
    }

    pub fn read_csv(input: impl BufRead) -> Result<Report> {
        let bad = |m: String| Error::Config(format!("summary csv: {m}"));
        let mut lines = input.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == SUMMARY_HEADER => {}
            Some(Ok(h)) => return Err(bad(format!("unexpected header `{h}`"))),
            Some(Err(e)) => return Err(Error::io("<summary csv>", e)),
            None => return Err(bad("missing header".into())),
        }
        let mut rows = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io("<summary csv>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad(format!("expected 11 fields in `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
            rows.push(SummaryRow {
                method: f[0].to_string(),
                tap: f[1].to_string(),
                setting: f[2].parse()?,
                count: f[3].parse().map_err(|_| bad(format!("bad count `{}`", f[3])))?,
                mean: num(f[4])?,
                quartiles: Quartiles {
                    min: num(f[5])?,
                    q1: num(f[6])?,
                    median: num(f[7])?,
                    q3: num(f[8])?,
                    max: num(f[9])?,
                },
                frac_one: num(f[10])?,
            });
        }
        Ok(Report {
            version: REPORT_VERSION,
            rows,
        })
    }
}

/// Write `summary.csv` and `summary.json` into `dir`.
pub fn emit_report(records: &[LocalizationRecord], dir: &std::path::Path) -> Result<Report> {
    let report = summarize(records)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let path = dir.join("summary.csv");
    std::fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    let path = dir.join("summary.json");
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
