use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Correlation {
    /// `d x d` absolute Pearson correlations.
    pub matrix: Tensor,
    pub summary: BlockSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    /// Mean over off-diagonal entries inside the channel diagonal blocks.
    pub within: f64,
    /// Mean over entries outside the channel diagonal blocks.
    pub between: f64,
    /// `within / between` (infinite when `between` is 0).
    pub ratio: f64,
    /// Columns with zero variance; their rows and columns are zero.
    pub zero_variance: Vec<usize>,
}

/// Absolute correlation between every pair of embedding coordinates, plus a
/// summary contrasting coordinates of the same channel with coordinates of
/// different channels.
pub fn latent_correlation(z: &Tensor, channels: usize) -> Result<Correlation> {
    let (n, d) = z.shape();
    if n < 2 {
        return Err(Error::Invalid("correlation needs at least two rows".into()));
    }
    if channels == 0 || d % channels != 0 {
        return Err(Error::shape(
            "latent_correlation",
            format!("{d} columns into {channels} channels"),
        ));
    }
    let width = d / channels;
    let mut centered = z.clone();
    let mut scale = vec![0.0; d];
    for j in 0..d {
        let mean = (0..n).map(|i| z.get(i, j)).sum::<f64>() / n as f64;
        for i in 0..n {
            centered.set(i, j, z.get(i, j) - mean);
        }
        scale[j] = (0..n)
            .map(|i| centered.get(i, j).powi(2))
            .sum::<f64>()
            .sqrt();
    }
    let zero_variance: Vec<usize> = (0..d).filter(|&j| scale[j] <= 1e-12).collect();
    let cov = centered.transpose().matmul(&centered)?;
    let matrix = Tensor::from_fn(d, d, |a, b| {
        if scale[a] <= 1e-12 || scale[b] <= 1e-12 {
            0.0
        } else if a == b {
            1.0
        } else {
            (cov.get(a, b) / (scale[a] * scale[b])).abs().min(1.0)
        }
    });

    let (mut within, mut nw, mut between, mut nb) = (0.0, 0usize, 0.0, 0usize);
    for a in 0..d {
        for b in 0..d {
            if a == b {
                continue;
            }
            if a / width == b / width {
                within += matrix.get(a, b);
                nw += 1;
            } else {
                between += matrix.get(a, b);
                nb += 1;
            }
        }
    }
    let within = if nw > 0 { within / nw as f64 } else { 0.0 };
    let between = if nb > 0 { between / nb as f64 } else { 0.0 };
    let ratio = if between > 0.0 {
        within / between
    } else {
        f64::INFINITY
    };
    Ok(Correlation {
        matrix,
        summary: BlockSummary {
            within,
            between,
            ratio,
            zero_variance,
        },
    })
}
