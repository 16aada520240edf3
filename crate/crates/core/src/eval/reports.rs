//! Report serialization. JSON output is pretty-printed with a trailing
//! newline and stable field order, so reruns with identical inputs are
//! byte-identical.

use super::experiments::{
    AblationReport, CrossClassReport, DomainShiftReport, FoldReport, PadSweepReport,
    SizeSweepReport,
};
use crate::error::{Error, Result};
use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::invalid(format!("serialize report: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let s = to_json_string(value)?;
    std::fs::write(path, s).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn save_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Quote a CSV field when it holds a delimiter.
fn csv_field(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl FoldReport {
    /// One row per test query across all folds.
    pub fn pair_scores_csv(&self) -> String {
        let mut s = String::from("fold,query,ctx,baseline_miou,prompted_miou\n");
        for fold in &self.folds {
            for p in &fold.pair_scores {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    fold.fold,
                    p.query,
                    p.ctx,
                    fmt_f(p.baseline_miou),
                    fmt_f(p.prompted_miou)
                );
            }
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("fold,train_size,test_size,baseline_miou,prompted_miou\n");
        for fold in &self.folds {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                fold.fold,
                fold.train_size,
                fold.test_size,
                fmt_f(fold.baseline_miou),
                fmt_f(fold.prompted_miou)
            );
        }
        let _ = writeln!(
            s,
            "mean,,,{},{}",
            fmt_f(self.mean_baseline_miou),
            fmt_f(self.mean_prompted_miou)
        );
        s
    }
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("placement,prompted_miou\n");
        let _ = writeln!(s, "baseline,{}", fmt_f(self.baseline_miou));
        for row in &self.rows {
            let _ = writeln!(s, "{},{}", csv_field(&row.placement), fmt_f(row.prompted_miou));
        }
        s
    }
}

impl PadSweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pad,param_count,prompted_miou\n");
        for row in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{}",
                row.pad,
                row.param_count,
                fmt_f(row.prompted_miou)
            );
        }
        s
    }
}

impl DomainShiftReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("arm,baseline_miou,prompted_miou,baseline_drop,prompted_drop\n");
        let _ = writeln!(
            s,
            "in_domain,{},{},,",
            fmt_f(self.in_domain.baseline_miou),
            fmt_f(self.in_domain.prompted_miou)
        );
        let _ = writeln!(
            s,
            "shifted,{},{},{},{}",
            fmt_f(self.shifted.baseline_miou),
            fmt_f(self.shifted.prompted_miou),
            fmt_f(self.baseline_drop),
            fmt_f(self.prompted_drop)
        );
        s
    }
}

impl SizeSweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("requested,actual,baseline_miou,prompted_miou\n");
        for row in &self.rows {
            let req = row
                .requested
                .map(|n| n.to_string())
                .unwrap_or_else(|| "all".to_string());
            let _ = writeln!(
                s,
                "{},{},{},{}",
                req,
                row.actual,
                fmt_f(row.baseline_miou),
                fmt_f(row.prompted_miou)
            );
        }
        s
    }
}

impl CrossClassReport {
    /// Matrix rows are training classes, columns evaluation classes.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("train_class");
        for name in &self.class_names {
            let _ = write!(s, ",{}", csv_field(name));
        }
        s.push('\n');
        for (i, name) in self.class_names.iter().enumerate() {
            let _ = write!(s, "{}", csv_field(name));
            for j in 0..self.class_names.len() {
                let _ = write!(s, ",{}", fmt_f(self.matrix[i][j]));
            }
            s.push('\n');
        }
        s
    }
}
