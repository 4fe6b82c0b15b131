//! Factor-wise decoder: per-channel cosine similarities, max-pooled across
//! channels and added to the inner-product score before the sigmoid.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Edge;
use crate::tensor::{dot, Tensor};

fn check_channels(z: &Tensor, channels: usize) -> Result<usize> {
    if channels == 0 || !z.cols().is_multiple_of(channels) {
        return Err(Error::shape(
            "decoder",
            format!(
                "{} columns not divisible into {channels} channels",
                z.cols()
            ),
        ));
    }
    Ok(z.cols() / channels)
}

/// One `N x N` cosine-similarity matrix per channel.
pub fn factor_similarities(z: &Tensor, channels: usize) -> Result<Vec<Tensor>> {
    let width = check_channels(z, channels)?;
    let unit = z.normalize_blocks(width);
    (0..channels)
        .map(|k| {
            let block = unit.slice_cols(k * width, width);
            block.matmul(&block.transpose())
        })
        .collect()
}

/// Pre-sigmoid link scores on the tape: `max_k cos_k + Z Zᵀ`, or `Z Zᵀ`
/// alone when `factor` is false.
pub fn decode_logits(tape: &mut Tape, z: Var, channels: usize, factor: bool) -> Result<Var> {
    let zt = tape.transpose(z)?;
    let inner = tape.matmul(z, zt)?;
    if !factor {
        return Ok(inner);
    }
    let fused = tape.factor_max_similarity(z, channels)?;
    tape.add(fused, inner)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Dense `N x N` link probabilities.
pub fn decode(z: &Tensor, channels: usize, factor: bool) -> Result<Tensor> {
    check_channels(z, channels)?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let logits = decode_logits(&mut tape, zv, channels, factor)?;
    Ok(tape.value(logits).map(sigmoid))
}

/// Link probabilities for selected pairs only.
pub fn score_pairs(z: &Tensor, channels: usize, factor: bool, pairs: &[Edge]) -> Result<Vec<f64>> {
    let width = check_channels(z, channels)?;
    let unit = z.normalize_blocks(width);
    Ok(pairs
        .iter()
        .map(|&(u, v)| {
            let mut logit = dot(z.row(u), z.row(v));
            if factor {
                let (ru, rv) = (unit.row(u), unit.row(v));
                let best = (0..channels)
                    .map(|k| {
                        dot(
                            &ru[k * width..(k + 1) * width],
                            &rv[k * width..(k + 1) * width],
                        )
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                logit += best;
            }
            sigmoid(logit)
        })
        .collect())
}
