//! On-disk dataset bundles: `meta.json` plus one CSV per stream.
//!
//! Missing field frames are empty cells; the mask is recovered from them.
//! Every CSV carries a header row, though headerless files are accepted on
//! input.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use smds_core::series::MultiscaleSeries;

use crate::error::{HarnessError, Result};

pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

#[allow(non_snake_case)]
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    pub schema_version: u32,
    pub T: usize,
    pub C: usize,
    pub F: usize,
    #[serde(default)]
    pub B: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub M_true: Option<usize>,
    pub dt_ms: f64,
    pub field_period_steps: usize,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| HarnessError::format(path, e.to_string()))
}

fn write_rows<I, R>(path: &Path, header: Vec<String>, rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| HarnessError::format(path, e.to_string());
    w.write_record(&header).map_err(err)?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>()).map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// `{}` for finite values, empty for NaN; `{}` on f64 round-trips exactly.
fn cell(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

fn header(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

fn write_matrix(path: &Path, prefix: &str, m: &DMatrix<f64>) -> Result<()> {
    write_rows(
        path,
        header(prefix, m.ncols()),
        (0..m.nrows()).map(|r| m.row(r).iter().map(|v| cell(*v)).collect::<Vec<_>>()),
    )
}

/// Reads a numeric CSV; empty cells become NaN. A first row that does not
/// parse as numbers is taken as the header.
fn read_matrix(path: &Path, cols: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(false)
        .from_path(path)
        .map_err(|e| HarnessError::format(path, e.to_string()))?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HarnessError::format(path, e.to_string()))?;
        let parse = |s: &str| -> Option<f64> {
            let s = s.trim();
            if s.is_empty() {
                Some(f64::NAN)
            } else {
                s.parse().ok()
            }
        };
        let vals: Option<Vec<f64>> = rec.iter().map(parse).collect();
        match vals {
            None if i == 0 => continue,
            None => return Err(HarnessError::format(path, format!("row {}: non-numeric cell", i + 1))),
            Some(v) => {
                if v.len() != cols {
                    return Err(HarnessError::format(
                        path,
                        format!("row {}: expected {cols} columns, found {}", i + 1, v.len()),
                    ));
                }
                data.extend(v);
                rows += 1;
            }
        }
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

fn expect_rows(path: &Path, m: &DMatrix<f64>, rows: usize) -> Result<()> {
    if m.nrows() != rows {
        return Err(HarnessError::format(
            path,
            format!("expected {rows} rows from meta.json, found {}", m.nrows()),
        ));
    }
    Ok(())
}

pub fn write_bundle(dir: &Path, series: &MultiscaleSeries, m_true: Option<usize>) -> Result<()> {
    series.validate()?;
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let t = series.len();
    let meta = BundleMeta {
        schema_version: BUNDLE_SCHEMA_VERSION,
        T: t,
        C: series.n_neurons(),
        F: series.n_fields(),
        B: series.behavior.as_ref().map_or(0, |b| b.ncols()),
        M_true: m_true,
        dt_ms: series.dt_ms,
        field_period_steps: series.field_period_steps,
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, text + "\n").map_err(|e| HarnessError::io(&meta_path, e))?;

    write_rows(
        &dir.join("spikes.csv"),
        header("n", series.n_neurons()),
        (0..t).map(|k| series.spikes.row(k).iter().map(|v| v.to_string()).collect::<Vec<_>>()),
    )?;
    let masked = DMatrix::from_fn(t, series.n_fields(), |k, f| {
        if series.field_mask[k] {
            series.fields[(k, f)]
        } else {
            f64::NAN
        }
    });
    write_matrix(&dir.join("fields.csv"), "y", &masked)?;
    if let Some(b) = &series.behavior {
        write_matrix(&dir.join("behavior.csv"), "b", b)?;
    }
    if let Some(r) = &series.regimes {
        write_rows(&dir.join("regimes.csv"), vec!["regime".into()], r.iter().map(|s| vec![s.to_string()]))?;
    }
    if let Some(x) = &series.latents {
        write_matrix(&dir.join("latents.csv"), "x", x)?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Bundle {
    pub dir: PathBuf,
    pub meta: BundleMeta,
    pub series: MultiscaleSeries,
}

pub fn read_bundle(dir: &Path) -> Result<Bundle> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| HarnessError::io(&meta_path, e))?;
    let meta: BundleMeta =
        serde_json::from_str(&text).map_err(|e| HarnessError::format(&meta_path, e.to_string()))?;
    if meta.schema_version != BUNDLE_SCHEMA_VERSION {
        return Err(HarnessError::format(
            &meta_path,
            format!("unsupported schema version {}", meta.schema_version),
        ));
    }
    if meta.T == 0 || meta.field_period_steps == 0 || !(meta.dt_ms > 0.0) {
        return Err(HarnessError::format(&meta_path, "T, field_period_steps and dt_ms must be positive"));
    }
    let t = meta.T;

    let spikes = if meta.C > 0 {
        let p = dir.join("spikes.csv");
        let m = read_matrix(&p, meta.C)?;
        expect_rows(&p, &m, t)?;
        if m.iter().any(|v| !(v.is_finite() && *v >= 0.0 && v.fract() == 0.0 && *v <= u32::MAX as f64)) {
            return Err(HarnessError::format(&p, "spike counts must be non-negative integers"));
        }
        m.map(|v| v as u32)
    } else {
        DMatrix::zeros(t, 0)
    };

    let (fields, mask) = if meta.F > 0 {
        let p = dir.join("fields.csv");
        let m = read_matrix(&p, meta.F)?;
        expect_rows(&p, &m, t)?;
        let mut mask = Vec::with_capacity(t);
        for k in 0..t {
            let row = m.row(k);
            let missing = row.iter().filter(|v| v.is_nan()).count();
            if missing != 0 && missing != meta.F {
                return Err(HarnessError::format(
                    &p,
                    format!("row {}: a field frame must be complete or entirely empty", k + 1),
                ));
            }
            mask.push(missing == 0);
        }
        (m, mask)
    } else {
        (DMatrix::zeros(t, 0), vec![false; t])
    };

    let behavior = if meta.B > 0 {
        let p = dir.join("behavior.csv");
        let m = read_matrix(&p, meta.B)?;
        expect_rows(&p, &m, t)?;
        Some(m)
    } else {
        None
    };

    let p = dir.join("regimes.csv");
    let regimes = if p.exists() {
        let m = read_matrix(&p, 1)?;
        expect_rows(&p, &m, t)?;
        if m.iter().any(|v| !(v.fract() == 0.0 && *v >= 1.0)) {
            return Err(HarnessError::format(&p, "regimes must be 1-based integers"));
        }
        Some(m.iter().map(|v| *v as usize).collect())
    } else {
        None
    };

    let p = dir.join("latents.csv");
    let latents = if p.exists() {
        let first = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        let cols = first.lines().next().map_or(0, |l| l.split(',').count());
        let m = read_matrix(&p, cols)?;
        expect_rows(&p, &m, t + 1)?;
        Some(m)
    } else {
        None
    };

    let series = MultiscaleSeries {
        spikes,
        fields,
        field_mask: mask,
        behavior,
        regimes,
        latents,
        dt_ms: meta.dt_ms,
        field_period_steps: meta.field_period_steps,
    };
    series.validate()?;
    Ok(Bundle {
        dir: dir.to_path_buf(),
        meta,
        series,
    })
}
