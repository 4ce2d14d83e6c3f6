//! Run records and report serialization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::CoreTraceRecord;
use crate::error::{Error, Result};
use crate::evaluation::{AggregateReport, FoldReport};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub source_rev: String,
    pub method: String,
    pub seed: u64,
    pub fold_reports: Vec<FoldReport>,
    pub aggregate: AggregateReport,
    pub wall_clock_s: f64,
}

/// Best-effort source revision for provenance.
pub fn source_rev() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| format!("denem-{}", env!("CARGO_PKG_VERSION")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    serde_json::to_writer_pretty(file, value)
        .map_err(|e| Error::Config(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    serde_json::from_reader(file).map_err(|e| Error::Config(format!("reading {}: {e}", path.display())))
}

/// Aggregate CSV: one row per fold plus a trailing mean +/- std row.
/// Columns: method, test_center, auroc, auroc_all, balanced_acc, ece.
pub fn write_aggregate_csv(
    path: &Path,
    rows: &[(String, Vec<FoldReport>, AggregateReport)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("creating {}: {e}", path.display())))?;
    w.write_record(["method", "test_center", "auroc", "auroc_all", "balanced_acc", "ece"])
        .map_err(|e| Error::Config(format!("csv header: {e}")))?;
    for (method, reports, agg) in rows {
        for r in reports {
            w.write_record([
                method.as_str(),
                r.test_center.as_str(),
                &format!("{:.6}", r.auroc),
                &format!("{:.6}", r.auroc_all),
                &format!("{:.6}", r.balanced_acc),
                &format!("{:.6}", r.ece),
            ])
            .map_err(|e| Error::Config(format!("csv row: {e}")))?;
        }
        let pm = |m: f64, s: f64| format!("{:.4}±{:.4}", m, s);
        w.write_record([
            method.as_str(),
            "mean±std",
            &pm(agg.mean.auroc, agg.std.auroc),
            &pm(agg.mean.auroc_all, agg.std.auroc_all),
            &pm(agg.mean.balanced_acc, agg.std.balanced_acc),
            &pm(agg.mean.ece, agg.std.ece),
        ])
        .map_err(|e| Error::Config(format!("csv summary row: {e}")))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Adaptation traces: one JSON object per line, one line per core.
pub fn write_traces_jsonl(path: &Path, traces: &[CoreTraceRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    let mut out = String::new();
    for t in traces {
        out.push_str(
            &serde_json::to_string(t)
                .map_err(|e| Error::Config(format!("serializing trace: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Ablation table: variant flags plus AUROC-All mean +/- std, one row per
/// grid entry, ordered as the five-row component grid.
pub fn write_ablation_csv(
    path: &Path,
    rows: &[(String, bool, bool, bool, bool, f64, f64)],
) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::Config(format!("creating {}: {e}", path.display())))?;
    w.write_record([
        "method",
        "group_norm",
        "ensemble",
        "mutual_info",
        "test_adapt",
        "auroc_all_mean",
        "auroc_all_std",
    ])
    .map_err(|e| Error::Config(format!("csv header: {e}")))?;
    let flag = |b: bool| if b { "yes" } else { "no" };
    for (method, gn, ens, mi, ta, mean, std) in rows {
        w.write_record([
            method.as_str(),
            flag(*gn),
            flag(*ens),
            flag(*mi),
            flag(*ta),
            &format!("{:.6}", mean),
            &format!("{:.6}", std),
        ])
        .map_err(|e| Error::Config(format!("csv row: {e}")))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))?;
    Ok(())
}
