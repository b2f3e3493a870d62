//! Aggregation of per-fold results into median and interquartile range.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use crate::commands::CKA_FILE;
use crate::error::{Error, Result};

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty() && (0.0..=1.0).contains(&q));
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and quartiles of a non-empty sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(Summary { n: v.len(), q1: quantile(&v, 0.25), median: quantile(&v, 0.5), q3: quantile(&v, 0.75) })
}

/// One aggregated row per `(model, modality, task)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub modality: String,
    pub task: String,
    pub val: Summary,
    pub test: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkaRow {
    pub model: String,
    pub cka: Summary,
}

fn read_rows(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?.clone();
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| Error::format(path, e.to_string()))?;
            Ok(headers.iter().zip(r.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect())
        })
        .collect()
}

fn field<'a>(row: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    row.get(key).map(String::as_str).ok_or_else(|| Error::format(path, format!("missing column {key}")))
}

fn number(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| Error::format(path, format!("`{s}` is not a number")))
}

fn results_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("results_") && name.ends_with(".csv") {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Aggregates the results and CKA tables of `dirs`.
pub fn aggregate(dirs: &[PathBuf]) -> Result<(Vec<ReportRow>, Vec<CkaRow>)> {
    type Key = (String, String, String);
    let mut metrics: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut ckas: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut found = false;
    for dir in dirs {
        for path in results_files(dir)? {
            found = true;
            for row in read_rows(&path)? {
                let key = (
                    field(&row, "model", &path)?.to_string(),
                    field(&row, "modality", &path)?.to_string(),
                    field(&row, "task", &path)?.to_string(),
                );
                let e = metrics.entry(key).or_default();
                e.0.push(number(field(&row, "metric_val", &path)?, &path)?);
                let t = field(&row, "metric_test", &path)?;
                if !t.is_empty() {
                    e.1.push(number(t, &path)?);
                }
            }
        }
        let cka_path = dir.join(CKA_FILE);
        if cka_path.exists() {
            for row in read_rows(&cka_path)? {
                ckas.entry(field(&row, "model", &cka_path)?.to_string())
                    .or_default()
                    .push(number(field(&row, "cka", &cka_path)?, &cka_path)?);
            }
        }
    }
    if !found {
        let path = dirs.first().cloned().unwrap_or_default().join("results_<task>.csv");
        return Err(Error::Missing { what: "probe results", path, producer: "probe" });
    }
    let rows = metrics
        .into_iter()
        .map(|((model, modality, task), (val, test))| ReportRow {
            model,
            modality,
            task,
            val: summarize(&val).expect("every row has a validation metric"),
            test: summarize(&test),
        })
        .collect();
    let cka_rows = ckas.into_iter().map(|(model, v)| CkaRow { model, cka: summarize(&v).expect("non-empty") }).collect();
    Ok((rows, cka_rows))
}

/// Writes `report.csv`, `report_cka.csv` and `report.png` under `out`.
pub fn write_report(dirs: &[PathBuf], out: &Path) -> Result<Vec<ReportRow>> {
    let (rows, cka_rows) = aggregate(dirs)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let opt = |s: Option<Summary>, f: fn(&Summary) -> f64| s.as_ref().map(|s| f(s).to_string()).unwrap_or_default();

    let path = out.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let header = ["model", "modality", "task", "n", "val_median", "val_q1", "val_q3", "test_median", "test_q1", "test_q3"];
    w.write_record(header).map_err(|e| Error::format(&path, e.to_string()))?;
    for r in &rows {
        let rec = [
            r.model.clone(),
            r.modality.clone(),
            r.task.clone(),
            r.val.n.to_string(),
            r.val.median.to_string(),
            r.val.q1.to_string(),
            r.val.q3.to_string(),
            opt(r.test, |s| s.median),
            opt(r.test, |s| s.q1),
            opt(r.test, |s| s.q3),
        ];
        w.write_record(&rec).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = out.join("report_cka.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    w.write_record(["model", "n", "median", "q1", "q3"]).map_err(|e| Error::format(&path, e.to_string()))?;
    for r in &cka_rows {
        let rec = [r.model.clone(), r.cka.n.to_string(), r.cka.median.to_string(), r.cka.q1.to_string(), r.cka.q3.to_string()];
        w.write_record(&rec).map_err(|e| Error::format(&path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let plotted: Vec<Summary> = rows.iter().map(|r| r.test.unwrap_or(r.val)).collect();
    let png = out.join("report.png");
    plot_intervals(&plotted).save(&png).map_err(|e| Error::format(&png, e.to_string()))?;
    Ok(rows)
}

const LANE: u32 = 18;
const WIDTH: u32 = 420;
const MARGIN: u32 = 10;

/// One lane per summary, in `report.csv` row order, on a fixed [0, 1] axis:
/// the interquartile range as a bar, the median as a dark tick, and grid
/// lines at 0.5 and 1.
pub fn plot_intervals(rows: &[Summary]) -> RgbImage {
    let height = 2 * MARGIN + LANE * rows.len().max(1) as u32;
    let mut img = RgbImage::from_pixel(WIDTH, height, Rgb([255, 255, 255]));
    let span = (WIDTH - 2 * MARGIN - 1) as f64;
    let x_of = |v: f64| MARGIN + (v.clamp(0.0, 1.0) * span).round() as u32;
    for g in [0.0, 0.5, 1.0] {
        let x = x_of(g);
        for y in MARGIN..height - MARGIN {
            img.put_pixel(x, y, Rgb([200, 200, 200]));
        }
    }
    for (i, s) in rows.iter().enumerate() {
        let top = MARGIN + LANE * i as u32 + 4;
        for y in top..top + LANE - 8 {
            for x in x_of(s.q1)..=x_of(s.q3) {
                img.put_pixel(x, y, Rgb([110, 150, 210]));
            }
            let m = x_of(s.median);
            for x in m.saturating_sub(1)..=(m + 1).min(WIDTH - 1) {
                img.put_pixel(x, y, Rgb([20, 30, 60]));
            }
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quartiles_interpolate() {
        let s = summarize(&[0.9, 0.5, 0.7, 0.6, 0.8]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (0.6, 0.7, 0.8));
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((s.q1, s.median, s.q3), (1.75, 2.5, 3.25));
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn plot_has_one_lane_per_row() {
        let s = Summary { n: 3, q1: 0.25, median: 0.5, q3: 0.75 };
        let img = plot_intervals(&[s, s, s]);
        assert_eq!(img.height(), 2 * MARGIN + 3 * LANE);
        assert_eq!(img.get_pixel(WIDTH / 2, MARGIN + 8), &Rgb([20, 30, 60]));
    }
}
