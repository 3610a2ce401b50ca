//! Learning-curve export: evaluation metrics aggregated across seeds with a
//! Student-t 95% band.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use log::warn;
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::config::ExperimentConfig;
use super::run::{CONFIG_COPY, METRICS_FILE};
use crate::algos::metrics::MetricsRecord;
use crate::error::{Error, Result};

/// Metrics exported as curves.
pub const CURVE_METRICS: [&str; 2] = ["eval_wr", "eval_return"];

#[derive(Clone, Debug, PartialEq)]
pub struct CurveRow {
    pub step: u64,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub metric: &'static str,
    pub seeds: usize,
    pub rows: Vec<CurveRow>,
}

/// Mean and two-sided 95% Student-t interval of `values`. A single value
/// gives a zero-width band.
pub fn aggregate(values: &[f64]) -> (f64, f64, f64) {
    let k = values.len();
    assert!(k > 0, "aggregate needs at least one value");
    let mean = values.iter().sum::<f64>() / k as f64;
    if k == 1 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (k - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * (var / k as f64).sqrt();
    (mean, mean - half, mean + half)
}

/// Linear interpolation of `series` (sorted by step) at every grid point,
/// holding the end values outside its range.
pub fn resample(series: &[(u64, f64)], grid: &[u64]) -> Vec<f64> {
    grid.iter()
        .map(|&g| {
            let i = series.partition_point(|&(s, _)| s < g);
            if i == 0 {
                series[0].1
            } else if i == series.len() {
                series[i - 1].1
            } else if series[i].0 == g {
                series[i].1
            } else {
                let (s0, v0) = series[i - 1];
                let (s1, v1) = series[i];
                v0 + (v1 - v0) * (g - s0) as f64 / (s1 - s0) as f64
            }
        })
        .collect()
}

/// Aggregates one metric across seeds. Identical step grids are used as
/// they are; otherwise every seed is resampled onto `nominal` (or the first
/// seed's grid) with a warning.
pub fn aggregate_series(series: &[Vec<(u64, f64)>], nominal: Option<&[u64]>) -> Vec<CurveRow> {
    let series: Vec<&Vec<(u64, f64)>> = series.iter().filter(|s| !s.is_empty()).collect();
    let Some(first) = series.first() else {
        return Vec::new();
    };
    let steps = |s: &Vec<(u64, f64)>| s.iter().map(|p| p.0).collect::<Vec<_>>();
    let grid = steps(first);
    let aligned = series.iter().all(|s| steps(s) == grid);
    let (grid, columns): (Vec<u64>, Vec<Vec<f64>>) = if aligned {
        (grid, series.iter().map(|s| s.iter().map(|p| p.1).collect()).collect())
    } else {
        let grid = nominal.map_or(grid, |g| g.to_vec());
        warn!("step grids differ across seeds; resampling onto {} points", grid.len());
        let cols = series.iter().map(|s| resample(s, &grid)).collect();
        (grid, cols)
    };
    grid.iter()
        .enumerate()
        .map(|(i, &step)| {
            let vals: Vec<f64> = columns.iter().map(|c| c[i]).collect();
            let (mean, ci_low, ci_high) = aggregate(&vals);
            CurveRow {
                step,
                mean,
                ci_low,
                ci_high,
            }
        })
        .collect()
}

fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}

fn find_metrics(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            find_metrics(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// The evaluation grid of the configuration a run directory belongs to,
/// up to the longest series.
fn nominal_grid(group: &Path, last: u64) -> Option<Vec<u64>> {
    let cfg = group
        .ancestors()
        .map(|a| a.join(CONFIG_COPY))
        .find(|p| p.is_file())
        .and_then(|p| ExperimentConfig::load(&p).ok())?;
    let every = cfg.train.eval_interval;
    Some((1..=last / every).map(|k| k * every).collect())
}

/// Collects every run under `run_dirs` into one curve per (run group,
/// metric). A run group is the directory holding `seed-*` directories; its
/// label is its path relative to the argument, or its name.
pub fn curves(run_dirs: &[PathBuf]) -> Result<Vec<Curve>> {
    let mut groups: BTreeMap<String, (PathBuf, Vec<PathBuf>)> = BTreeMap::new();
    for dir in run_dirs {
        let mut files = Vec::new();
        find_metrics(dir, &mut files)?;
        for f in files {
            let group = f
                .parent()
                .and_then(Path::parent)
                .ok_or_else(|| Error::Config(format!("{} is not inside a run group", f.display())))?
                .to_path_buf();
            let rel = group.strip_prefix(dir).unwrap_or(&group);
            let label = if rel.as_os_str().is_empty() {
                group.file_name().map_or("run".into(), |n| n.to_string_lossy().into_owned())
            } else {
                rel.to_string_lossy().replace(['/', '\\'], "_")
            };
            groups.entry(label).or_insert_with(|| (group, Vec::new())).1.push(f);
        }
    }
    if groups.is_empty() {
        return Err(Error::Config("no completed runs found".into()));
    }
    let mut out = Vec::new();
    for (label, (group, files)) in groups {
        let records = files.iter().map(|f| read_metrics(f)).collect::<Result<Vec<_>>>()?;
        for metric in CURVE_METRICS {
            let series: Vec<Vec<(u64, f64)>> = records
                .iter()
                .map(|rs| {
                    rs.iter()
                        .filter_map(|r| {
                            let v = if metric == "eval_wr" { r.eval_wr } else { r.eval_return };
                            v.map(|v| (r.step, v))
                        })
                        .collect()
                })
                .collect();
            let last = series.iter().filter_map(|s| s.last().map(|p| p.0)).max().unwrap_or(0);
            let nominal = nominal_grid(&group, last).filter(|g| !g.is_empty());
            out.push(Curve {
                label: label.clone(),
                metric,
                seeds: series.iter().filter(|s| !s.is_empty()).count(),
                rows: aggregate_series(&series, nominal.as_deref()),
            });
        }
    }
    Ok(out)
}

pub fn to_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("step,mean,ci_low,ci_high\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.mean, r.ci_low, r.ci_high));
    }
    s
}

/// Writes `<label>_<metric>.csv` for every curve into `out_dir`.
pub fn export(run_dirs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    curves(run_dirs)?
        .into_iter()
        .map(|c| {
            let path = out_dir.join(format!("{}_{}.csv", c.label, c.metric));
            std::fs::write(&path, to_csv(&c.rows)).map_err(|e| Error::io(&path, e))?;
            Ok(path)
        })
        .collect()
}
