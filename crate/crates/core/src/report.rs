//! JSON-lines metric and history records, and their CSV summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::RunHistory;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub schema_version: u32,
    /// `linkpred`, `cluster` or `correlation`.
    pub task: String,
    pub config_hash: String,
    pub seed: u64,
    pub mode: String,
    /// Which labels were clustered against (`joint`, `factor0`, ...), when
    /// relevant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_view: Option<String>,
    pub metrics: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub schema_version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub recon: f64,
    pub kl: f64,
    pub indep: f64,
    pub total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_ap: Option<f64>,
}

/// One record per epoch, with validation metrics on evaluation epochs.
pub fn history_records(h: &RunHistory, config_hash: &str, seed: u64) -> Vec<HistoryRecord> {
    let evals: BTreeMap<usize, _> = h.evals.iter().map(|e| (e.epoch, e)).collect();
    h.losses
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let epoch = i + 1;
            let ev = evals.get(&epoch);
            HistoryRecord {
                schema_version: SCHEMA_VERSION,
                config_hash: config_hash.to_string(),
                seed,
                epoch,
                recon: l.recon,
                kl: l.kl,
                indep: l.indep,
                total: l.total,
                val_auc: ev.map(|e| e.val_auc),
                val_ap: ev.map(|e| e.val_ap),
            }
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T], append: bool) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).map_err(|e| Error::Invalid(e.to_string()))?);
        out.push('\n');
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub task: String,
    pub config_hash: String,
    pub mode: String,
    pub label_view: String,
    pub metric: String,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation over `sqrt(runs)`; 0 for a single run.
    pub stderr: f64,
}

/// Mean and standard error of every metric, grouped by task, configuration
/// and label view.
pub fn summarize(records: &[MetricRecord]) -> Vec<SummaryRow> {
    type Key = (String, String, String, String, String);
    let mut groups: BTreeMap<Key, Vec<f64>> = BTreeMap::new();
    for r in records {
        for (m, &v) in &r.metrics {
            let key = (
                r.task.clone(),
                r.config_hash.clone(),
                r.mode.clone(),
                r.label_view.clone().unwrap_or_default(),
                m.clone(),
            );
            groups.entry(key).or_default().push(v);
        }
    }
    groups
        .into_iter()
        .map(|((task, config_hash, mode, label_view, metric), vals)| {
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let stderr = if vals.len() > 1 {
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
                (var / n).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                task,
                config_hash,
                mode,
                label_view,
                metric,
                runs: vals.len(),
                mean,
                stderr,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("task,config_hash,mode,label_view,metric,runs,mean,stderr\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.task, r.config_hash, r.mode, r.label_view, r.metric, r.runs, r.mean, r.stderr
        );
    }
    out
}

/// Matrix as CSV, one row per line, no header.
pub fn matrix_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Loss curve CSV with validation columns left empty between evaluations.
pub fn history_csv(records: &[HistoryRecord]) -> String {
    let mut out = String::from("epoch,recon,kl,indep,total,val_auc,val_ap\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch,
            r.recon,
            r.kl,
            r.indep,
            r.total,
            opt(r.val_auc),
            opt(r.val_ap)
        );
    }
    out
}
