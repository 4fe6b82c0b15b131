use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use super::munkres::{apply_matching, munkres_match};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMetrics {
    pub acc: f64,
    /// Macro-averaged over true classes.
    pub precision: f64,
    /// Macro-averaged over true classes.
    pub f1: f64,
    pub nmi: f64,
    pub ari: f64,
    /// Degenerate cases encountered (for example a single true class).
    pub flags: Vec<String>,
}

fn contingency(a: &[usize], b: &[usize]) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let na = a.iter().max().map_or(0, |m| m + 1);
    let nb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0.0; nb]; na];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let rows = table.iter().map(|r| r.iter().sum()).collect();
    let cols = (0..nb).map(|j| table.iter().map(|r| r[j]).sum()).collect();
    (table, rows, cols)
}

fn entropy(counts: &[f64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / n;
            -p * p.ln()
        })
        .sum()
}

fn comb2(x: f64) -> f64 {
    x * (x - 1.0) / 2.0
}

/// Accuracy, macro precision and F1, NMI (arithmetic-mean normalization) and
/// ARI of already matched predictions against the truth.
pub fn clustering_metrics(pred: &[usize], truth: &[usize]) -> Result<ClusterMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len() as f64;
    let mut flags = Vec::new();
    let (table, pred_sizes, true_sizes) = contingency(pred, truth);

    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64;
    let acc = correct / n;

    let mut precision = 0.0;
    let mut f1 = 0.0;
    let mut classes = 0.0;
    for (c, &size) in true_sizes.iter().enumerate() {
        if size == 0.0 {
            continue;
        }
        classes += 1.0;
        let tp = table.get(c).map_or(0.0, |r| r[c]);
        let predicted = pred_sizes.get(c).copied().unwrap_or(0.0);
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = tp / size;
        precision += p;
        f1 += if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
    }
    precision /= classes;
    f1 /= classes;

    let h_pred = entropy(&pred_sizes, n);
    let h_true = entropy(&true_sizes, n);
    let mut mi = 0.0;
    for (i, row) in table.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0.0 {
                mi += c / n * (c * n / (pred_sizes[i] * true_sizes[j])).ln();
            }
        }
    }
    let nmi = if h_true == 0.0 {
        flags.push("single true class: NMI set to 0".to_string());
        0.0
    } else {
        (mi / (0.5 * (h_pred + h_true))).clamp(0.0, 1.0)
    };

    let index: f64 = table.iter().flatten().map(|&c| comb2(c)).sum();
    let sum_a: f64 = pred_sizes.iter().map(|&c| comb2(c)).sum();
    let sum_b: f64 = true_sizes.iter().map(|&c| comb2(c)).sum();
    let expected = sum_a * sum_b / comb2(n).max(f64::MIN_POSITIVE);
    let max_index = 0.5 * (sum_a + sum_b);
    let ari = if (max_index - expected).abs() < 1e-12 {
        flags.push("degenerate partitions: ARI taken as agreement".to_string());
        if index == max_index {
            1.0
        } else {
            0.0
        }
    } else {
        (index - expected) / (max_index - expected)
    };

    Ok(ClusterMetrics {
        acc,
        precision,
        f1,
        nmi,
        ari,
        flags,
    })
}

/// k-means on `z`, matched to `truth`, scored.
pub fn cluster_embedding(
    z: &Tensor,
    truth: &[usize],
    k: usize,
    seed: u64,
) -> Result<ClusterMetrics> {
    if z.rows() != truth.len() {
        return Err(Error::Invalid(format!(
            "{} embeddings for {} labels",
            z.rows(),
            truth.len()
        )));
    }
    let pred = kmeans(z, k, seed)?;
    let matching = munkres_match(&pred, truth);
    clustering_metrics(&apply_matching(&pred, &matching), truth)
}
