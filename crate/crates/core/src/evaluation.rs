//! Error metrics, multi-run comparison tables, trend lines and image export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::doe::{IMAGE_HEIGHT, IMAGE_WIDTH};
use crate::error::{Error, Result};
use crate::trainers::{TrainReport, Variant};

/// Sum of squared pixel differences. Symmetric, no ½ factor.
pub fn ssd_error(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "ssd_error",
            left: vec![pred.len()],
            right: vec![truth.len()],
        });
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Mean over pairs of `ssd_error / pixel_count`.
pub fn mean_ssd<'a, I>(pairs: I) -> Result<f64>
where
    I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
{
    let mut total = 0.0;
    let mut n = 0usize;
    for (pred, truth) in pairs {
        if truth.is_empty() {
            return Err(Error::Config("cannot score an empty image".into()));
        }
        total += ssd_error(pred, truth)? / truth.len() as f64;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("mean_ssd needs at least one case".into()));
    }
    Ok(total / n as f64)
}

/// Ordinary least-squares line through `(x, y)` points: `(slope, intercept)`.
pub fn fit_trend(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::Config("trend fit needs at least two points".into()));
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    if sxx == 0.0 {
        return Err(Error::Config("trend fit needs at least two distinct x values".into()));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub variant: Variant,
    pub runs: usize,
    pub final_iteration: usize,
    /// `None` for the nearest-neighbour baseline.
    pub train: Option<MeanStd>,
    pub test: MeanStd,
    /// Min and max wall time in seconds, when timings were supplied.
    pub wall_time: Option<(f64, f64)>,
}

impl ComparisonRow {
    pub fn single_run(&self) -> bool {
        self.runs == 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
}

/// Groups reports by variant and aggregates their final checkpoints.
///
/// `wall_times` pairs with `reports` by position; pass an empty slice to omit timings.
pub fn build_comparison(reports: &[TrainReport], wall_times: &[f64]) -> Result<ComparisonTable> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to compare".into()));
    }
    if !wall_times.is_empty() && wall_times.len() != reports.len() {
        return Err(Error::Config("wall times must pair one-to-one with reports".into()));
    }
    // Sorted within each group so the result does not depend on input order.
    let mut groups: BTreeMap<Variant, Vec<(u64, f64, Option<f64>, usize, Option<f64>)>> = BTreeMap::new();
    for (i, r) in reports.iter().enumerate() {
        let last = r
            .checkpoints
            .last()
            .ok_or_else(|| Error::Config(format!("report for seed {} has no checkpoints", r.seed)))?;
        groups.entry(r.variant).or_default().push((
            r.seed,
            last.test_ssd,
            last.train_ssd,
            last.iteration,
            wall_times.get(i).copied(),
        ));
    }
    let rows = groups
        .into_iter()
        .map(|(variant, mut runs)| {
            let opt = |x: Option<f64>| x.map_or(f64::NEG_INFINITY, |v| v);
            runs.sort_by(|a, b| {
                a.0.cmp(&b.0)
                    .then(a.1.total_cmp(&b.1))
                    .then(opt(a.2).total_cmp(&opt(b.2)))
                    .then(a.3.cmp(&b.3))
                    .then(opt(a.4).total_cmp(&opt(b.4)))
            });
            let test: Vec<f64> = runs.iter().map(|r| r.1).collect();
            let train: Vec<f64> = runs.iter().filter_map(|r| r.2).collect();
            let times: Vec<f64> = runs.iter().filter_map(|r| r.4).collect();
            ComparisonRow {
                variant,
                runs: runs.len(),
                final_iteration: runs.iter().map(|r| r.3).max().unwrap_or(0),
                train: if variant == Variant::AeKnn {
                    None
                } else {
                    MeanStd::of(&train)
                },
                test: MeanStd::of(&test).expect("group is non-empty"),
                wall_time: (!times.is_empty()).then(|| {
                    (
                        times.iter().copied().fold(f64::INFINITY, f64::min),
                        times.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    )
                }),
            }
        })
        .collect();
    Ok(ComparisonTable { rows })
}

impl ComparisonTable {
    pub fn row(&self, variant: Variant) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// CSV with a header row and one row per variant. Missing values are `-`.
    pub fn to_csv(&self, include_time: bool) -> String {
        let mut out = String::from("variant,runs,final_iteration,train_mean,train_std,test_mean,test_std");
        if include_time {
            out.push_str(",time_min_s,time_max_s");
        }
        out.push('\n');
        for r in &self.rows {
            let (tm, ts) = match r.train {
                Some(t) => (format!("{:.6}", t.mean), format!("{:.6}", t.std)),
                None => ("-".into(), "-".into()),
            };
            let _ = write!(
                out,
                "{},{},{},{tm},{ts},{:.6},{:.6}",
                r.variant, r.runs, r.final_iteration, r.test.mean, r.test.std
            );
            if include_time {
                match r.wall_time {
                    Some((lo, hi)) => {
                        let _ = write!(out, ",{lo:.1},{hi:.1}");
                    }
                    None => out.push_str(",-,-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// `(iteration, error)` points across runs of one variant, with their OLS line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSeries {
    pub variant: Variant,
    pub split: String,
    pub points: Vec<(f64, f64)>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
}

/// Train and test scatter series per variant from every checkpoint after iteration 0.
pub fn scatter_series(reports: &[TrainReport]) -> Vec<ScatterSeries> {
    let mut by_variant: BTreeMap<Variant, (Vec<(f64, f64)>, Vec<(f64, f64)>)> = BTreeMap::new();
    let mut sorted: Vec<&TrainReport> = reports.iter().collect();
    sorted.sort_by_key(|r| (r.variant, r.seed));
    for r in sorted {
        let entry = by_variant.entry(r.variant).or_default();
        for c in r.checkpoints.iter().filter(|c| c.iteration > 0) {
            if let Some(t) = c.train_ssd {
                entry.0.push((c.iteration as f64, t));
            }
            entry.1.push((c.iteration as f64, c.test_ssd));
        }
    }
    let mut out = Vec::new();
    for (variant, (train, test)) in by_variant {
        for (split, points) in [("train", train), ("test", test)] {
            if points.is_empty() {
                continue;
            }
            let fit = fit_trend(&points).ok();
            out.push(ScatterSeries {
                variant,
                split: split.to_string(),
                slope: fit.map(|f| f.0),
                intercept: fit.map(|f| f.1),
                points,
            });
        }
    }
    out
}

pub fn scatter_csv(series: &[ScatterSeries]) -> String {
    let mut out = String::from("variant,split,iteration,error,trend_slope,trend_intercept\n");
    for s in series {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.9e}"));
        for (x, y) in &s.points {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{},{}",
                s.variant,
                s.split,
                *x as usize,
                y,
                fmt(s.slope),
                fmt(s.intercept)
            );
        }
    }
    out
}

/// Binary 8-bit portable graymap; 0.0 → black, 1.0 → white.
pub fn encode_pgm(image: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if image.len() != width * height {
        return Err(Error::Shape {
            op: "encode_pgm",
            left: vec![height, width],
            right: vec![image.len()],
        });
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

/// One image to export: ground truth or a named prediction.
pub struct Panel<'a> {
    pub label: &'a str,
    pub image: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportedImage {
    pub case: usize,
    pub label: String,
    pub file: String,
    pub ssd: f64,
    pub values: Vec<f64>,
}

/// Writes the ground truth and each prediction for one case as PGM files,
/// named `case{idx}_{order}_{label}_ssd{value}.pgm` so a directory listing
/// keeps them side by side. Returns sidecar records for each file.
pub fn export_case(dir: &Path, case: usize, truth: &[f64], predictions: &[Panel<'_>]) -> Result<Vec<ExportedImage>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut panels = vec![Panel {
        label: "truth",
        image: truth,
    }];
    panels.extend(predictions.iter().map(|p| Panel {
        label: p.label,
        image: p.image,
    }));
    let mut records = Vec::with_capacity(panels.len());
    for (order, panel) in panels.iter().enumerate() {
        let ssd = ssd_error(panel.image, truth)?;
        let file = format!("case{case:04}_{order}_{}_ssd{ssd:.4}.pgm", panel.label);
        let path: PathBuf = dir.join(&file);
        let bytes = encode_pgm(panel.image, IMAGE_WIDTH, IMAGE_HEIGHT)?;
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        records.push(ExportedImage {
            case,
            label: panel.label.to_string(),
            file,
            ssd,
            values: panel.image.to_vec(),
        });
    }
    Ok(records)
}
