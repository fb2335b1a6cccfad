use std::fmt::Write as _;
use std::path::Path;

use super::MetricsReport;
use crate::{Error, Result};

/// Left-aligned plain-text table with two spaces between columns.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, cell) in width.iter_mut().zip(r) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i + 1 == cols {
                s.push_str(c);
            } else {
                let _ = write!(s, "{:<w$}  ", c, w = width[i]);
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

/// Per-object table followed by `key = value` summary lines.
pub fn format_metrics(report: &MetricsReport) -> String {
    let rows: Vec<Vec<String>> = report
        .objects
        .iter()
        .map(|o| {
            let n = o.j.len() as f64;
            vec![
                o.object.to_string(),
                o.j.len().to_string(),
                format!("{:.4}", o.j.iter().sum::<f64>() / n),
                format!("{:.4}", o.f.iter().sum::<f64>() / n),
            ]
        })
        .collect();
    let mut out = format_table(&["object", "frames", "J", "F"], &rows);
    let _ = writeln!(out);
    let _ = writeln!(out, "mean_j = {:.6}", report.mean_j);
    let _ = writeln!(out, "mean_f = {:.6}", report.mean_f);
    let _ = writeln!(out, "overall = {:.6}", report.overall);
    out
}

pub fn write_metrics_report(path: impl AsRef<Path>, report: &MetricsReport) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_metrics(report)).map_err(|e| Error::io(path, e))
}
