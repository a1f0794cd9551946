//! CSV export/import and atomic file writes.
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! re-import reproduces every value bit for bit. Lines starting with `#`
//! carry run metadata.

use std::io::Write;
use std::path::Path;

use ifk_core::matkit::Mat;
use ifk_core::models::Trajectory;
use ifk_core::rcrlb;

use crate::bench::{ExperimentResult, Series};
use crate::error::{IfkError, Result};

/// Write `bytes` to `path` through a temporary sibling file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(IfkError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "parent directory does not exist"),
        ));
    }
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| IfkError::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| IfkError::io(path, e))?;
    tmp.flush().map_err(|e| IfkError::io(path, e))?;
    tmp.persist(path).map_err(|e| IfkError::io(path, e.error))?;
    Ok(())
}

fn csv_error(path: &Path, e: impl std::fmt::Display) -> IfkError {
    IfkError::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn table(path: &Path, meta: &[String], header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for m in meta {
        out.extend_from_slice(format!("# {m}\n").as_bytes());
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.into_inner().map_err(|e| csv_error(path, e))
}

/// CSV text of a series with `# ` metadata lines in front.
pub fn series_csv(series: &Series, meta: &[String]) -> Result<Vec<u8>> {
    let header: Vec<String> = Series::HEADER.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = (0..series.len())
        .map(|i| {
            let mut r = vec![series.k[i].to_string()];
            r.extend(series.columns().iter().map(|(_, c)| c[i].to_string()));
            r
        })
        .collect();
    table(Path::new("<series>"), meta, &header, &rows)
}

pub fn export_csv(result: &ExperimentResult, path: &Path) -> Result<()> {
    write_atomic(path, &series_csv(&result.series, &result.metadata())?)
}

/// Read a series CSV; returns the series and its metadata lines (without `# `).
pub fn import_csv(path: &Path) -> Result<(Series, Vec<String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| IfkError::io(path, e))?;
    let mut meta = Vec::new();
    let mut body = String::new();
    for line in text.lines() {
        match line.strip_prefix('#') {
            Some(m) => meta.push(m.trim_start().to_string()),
            None => {
                body.push_str(line);
                body.push('\n');
            }
        }
    }
    let mut rd = csv::Reader::from_reader(body.as_bytes());
    let header = rd.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(Series::HEADER.iter().copied()) {
        return Err(csv_error(path, format!("unexpected header {:?}", header.iter().collect::<Vec<_>>())));
    }
    let mut s = Series::default();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let bad = |col: &str| csv_error(path, format!("row {}: bad {col}", line + 1));
        s.k.push(rec[0].parse().map_err(|_| bad("k"))?);
        let cols = [&mut s.rmse_fwd, &mut s.amse_fwd, &mut s.rcrlb_fwd, &mut s.amse_inv, &mut s.rcrlb_inv];
        for (j, col) in cols.into_iter().enumerate() {
            col.push(rec[j + 1].parse().map_err(|_| bad(Series::HEADER[j + 1]))?);
        }
    }
    Ok((s, meta))
}

/// `k,x_0..,u_0..,y_0..`; the `k = 0` row has empty observation fields.
pub fn trajectory_csv(t: &Trajectory, meta: &[String]) -> Result<Vec<u8>> {
    let n = t.states[0].len();
    let m = t.inputs[0].len();
    let p = t.observations.first().map_or(0, |y| y.len());
    let mut header = vec!["k".to_string()];
    header.extend((0..n).map(|i| format!("x_{i}")));
    header.extend((0..m).map(|i| format!("u_{i}")));
    header.extend((0..p).map(|i| format!("y_{i}")));
    let rows: Vec<Vec<String>> = (0..=t.steps())
        .map(|k| {
            let mut r = vec![k.to_string()];
            r.extend(t.states[k].iter().map(|v| v.to_string()));
            r.extend(t.inputs[k].iter().map(|v| v.to_string()));
            if k == 0 {
                r.extend((0..p).map(|_| String::new()));
            } else {
                r.extend(t.y(k).iter().map(|v| v.to_string()));
            }
            r
        })
        .collect();
    table(Path::new("<trajectory>"), meta, &header, &rows)
}

fn upper(prefix: &str, n: usize) -> Vec<String> {
    (0..n).flat_map(|i| (i..n).map(move |j| format!("{prefix}_{i}{j}"))).collect()
}

/// Information matrices `J_k = P_k⁻¹` of the forward and inverse bounds.
///
/// Columns: `k, rcrlb_fwd, rcrlb_inv`, then the upper triangles of the
/// forward and inverse information matrices (state block for the inverse).
pub fn j_series_csv(result: &ExperimentResult, n: usize) -> Result<Vec<u8>> {
    let mut header: Vec<String> = ["k", "rcrlb_fwd", "rcrlb_inv"].iter().map(|s| s.to_string()).collect();
    header.extend(upper("j_fwd", n));
    header.extend(upper("j_inv", n));
    let mut rows = Vec::with_capacity(result.bound_fwd.len());
    for (k, (pf, pi)) in result.bound_fwd.iter().zip(&result.bound_inv).enumerate() {
        let pi = pi.view((0, 0), (n, n)).into_owned();
        let mut r = vec![
            k.to_string(),
            rcrlb::rcrlb_per_component(pf, n).to_string(),
            rcrlb::rcrlb_per_component(&pi, n).to_string(),
        ];
        for p in [pf, &pi] {
            let j = information(p)?;
            r.extend((0..n).flat_map(|a| (a..n).map(move |b| (a, b))).map(|(a, b)| j[(a, b)].to_string()));
        }
        rows.push(r);
    }
    table(Path::new("<j-series>"), &result.metadata(), &header, &rows)
}

fn information(p: &Mat) -> Result<Mat> {
    Ok(ifk_core::matkit::inv_spd(p, "bound covariance")?)
}
