//! Reconstruction, KL and independence losses, and their combination.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{mlp_on_tape, Bound, Mode};
use crate::tensor::Tensor;

/// Probability clamp for [`recon_loss`].
pub const PROB_CLAMP: f64 = 1e-7;

/// Positive-class weight and overall normalization for an `n`-node graph
/// with `edges` undirected edges: `w = (N² - 2E) / 2E`,
/// `norm = N² / (2 (N² - 2E))`. Both are 1 for an empty graph.
pub fn bce_weights(n: usize, edges: usize) -> (f64, f64) {
    let total = (n * n) as f64;
    let pos = 2.0 * edges as f64;
    if pos == 0.0 || pos >= total {
        return (1.0, 1.0);
    }
    let neg = total - pos;
    (neg / pos, total / (2.0 * neg))
}

/// Weighted binary cross-entropy between probabilities `p` and the 0/1
/// adjacency `a`, averaged over all `N²` entries.
pub fn recon_loss(p: &Tensor, a: &Tensor) -> Result<f64> {
    if p.shape() != a.shape() || p.rows() != p.cols() {
        return Err(Error::shape(
            "recon_loss",
            format!("{:?} vs {:?}", p.shape(), a.shape()),
        ));
    }
    let n = p.rows();
    let edges = a.data().iter().filter(|&&v| v > 0.5).count() / 2;
    let (w, norm) = bce_weights(n, edges);
    let mut total = 0.0;
    for (&pv, &y) in p.data().iter().zip(a.data()) {
        let pv = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= w * y * pv.ln() + (1.0 - y) * (1.0 - pv).ln();
    }
    Ok(norm * total / (n * n).max(1) as f64)
}

/// [`recon_loss`] on pre-sigmoid scores, recorded on the tape.
pub fn recon_on_tape(
    tape: &mut Tape,
    logits: Var,
    target: Arc<Tensor>,
    edges: usize,
) -> Result<Var> {
    let (w, norm) = bce_weights(target.rows(), edges);
    tape.bce_with_logits(logits, target, w, norm)
}

/// [`recon_on_tape`] of the decoder scores of embedding `z`, fused.
pub fn recon_of_embedding(
    tape: &mut Tape,
    z: Var,
    channels: usize,
    factor: bool,
    target: Arc<Tensor>,
    edges: usize,
) -> Result<Var> {
    let (w, norm) = bce_weights(target.rows(), edges);
    tape.link_bce(z, channels, factor, target, w, norm)
}

/// Closed-form `KL(N(μ, σ²) || N(0, I))` summed over all entries.
pub fn gaussian_kl(mu: &Tensor, logvar: &Tensor) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(Error::shape("gaussian_kl", "mu and logvar differ"));
    }
    if !logvar.all_finite() {
        return Err(Error::NonFinite("logvar".into()));
    }
    Ok(mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum())
}

/// Single-sample estimate of `KL(q(z_M) || N(0, I))` after flows:
/// `Σ [-½ logσ² - ½ ε²] + Σ ½ z_M² - Σ logdet`.
pub fn flow_kl_sample(logvar: &Tensor, eps: &Tensor, z_m: &Tensor, logdet: &[f64]) -> Result<f64> {
    if logvar.shape() != eps.shape() || logvar.shape() != z_m.shape() || logdet.len() != z_m.rows()
    {
        return Err(Error::shape("kl_with_flow", "inconsistent shapes"));
    }
    if !logvar.all_finite() {
        return Err(Error::NonFinite("logvar".into()));
    }
    let base: f64 = logvar
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&lv, &e)| -0.5 * lv - 0.5 * e * e)
        .sum();
    let prior: f64 = z_m.data().iter().map(|&z| 0.5 * z * z).sum();
    Ok(base + prior - logdet.iter().sum::<f64>())
}

/// Inputs of the KL term: the closed form without flows, a reparameterized
/// sample with them.
pub enum KlInputs<'a> {
    ClosedForm,
    Sample {
        eps: &'a Tensor,
        z_m: &'a Tensor,
        logdet: &'a [f64],
    },
}

pub fn kl_with_flow(mu: &Tensor, logvar: &Tensor, inputs: KlInputs<'_>) -> Result<f64> {
    match inputs {
        KlInputs::ClosedForm => gaussian_kl(mu, logvar),
        KlInputs::Sample { eps, z_m, logdet } => flow_kl_sample(logvar, eps, z_m, logdet),
    }
}

/// KL term on the tape, summed over nodes and dimensions. `flow` carries the
/// noise, the flowed sample and the per-node log-determinant; without it the
/// closed form is used.
pub fn kl_on_tape(
    tape: &mut Tape,
    mu: Var,
    logvar: Var,
    flow: Option<(&Tensor, Var, Var)>,
) -> Result<Var> {
    if !tape.value(logvar).all_finite() {
        return Err(Error::NonFinite("logvar".into()));
    }
    match flow {
        None => {
            let mu2 = tape.mul(mu, mu)?;
            let var = tape.exp(logvar)?;
            let a = tape.add(mu2, var)?;
            let b = tape.sub(a, logvar)?;
            let s = tape.sum(b)?;
            let n = tape.value(mu).len() as f64;
            tape.affine(s, 0.5, -0.5 * n)
        }
        Some((eps, z_m, logdet)) => {
            let e2: f64 = eps.data().iter().map(|e| e * e).sum();
            let lv = tape.sum(logvar)?;
            let zz = tape.mul(z_m, z_m)?;
            let zs = tape.sum(zz)?;
            let half_z = tape.affine(zs, 0.5, -0.5 * e2)?;
            let half_lv = tape.affine(lv, 0.5, 0.0)?;
            let a = tape.sub(half_z, half_lv)?;
            let ld = tape.sum(logdet)?;
            tape.sub(a, ld)
        }
    }
}

/// Cross-entropy of the discriminator guessing each channel block's index,
/// averaged over nodes and channels.
pub fn independence_on_tape(tape: &mut Tape, bound: &Bound<'_>, c: Var) -> Result<Var> {
    let cfg = bound.config();
    let (k, w) = (cfg.channels, cfg.channel_dim);
    let n = tape.shape(c).0;
    let mut terms = Vec::with_capacity(k);
    for ch in 0..k {
        let block = tape.slice_cols(c, ch * w, w)?;
        let logits = mlp_on_tape(tape, bound, bound.layout().disc, block, Tape::relu)?;
        terms.push(tape.cross_entropy(logits, Arc::new(vec![ch; n]))?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.affine(total, 1.0 / k as f64, 0.0)
}

/// Mean of `-ln probs[i][labels[i]]` for given probability rows.
pub fn independence_loss(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() || probs.rows() == 0 {
        return Err(Error::shape(
            "independence_loss",
            "one label per row required",
        ));
    }
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -probs.get(i, l).ln())
        .sum::<f64>()
        / labels.len() as f64)
}

/// Loss components of one forward pass. `kl` is already scaled into the
/// objective, so `total = recon + kl + lambda * indep`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub recon: f64,
    pub kl: f64,
    pub indep: f64,
    pub total: f64,
    pub lambda: f64,
}

/// Combines the components for `mode`. The variational mode requires a KL
/// value and the deterministic mode forbids one.
pub fn total_objective(
    mode: Mode,
    recon: f64,
    kl: Option<f64>,
    indep: f64,
    lambda: f64,
) -> Result<LossReport> {
    let kl = match (mode, kl) {
        (Mode::Dvga, Some(kl)) => kl,
        (Mode::Dga, None) => 0.0,
        (Mode::Dvga, None) => {
            return Err(Error::Invalid(
                "variational objective needs a KL term".into(),
            ))
        }
        (Mode::Dga, Some(_)) => {
            return Err(Error::Invalid(
                "deterministic objective takes no KL term".into(),
            ))
        }
    };
    Ok(LossReport {
        recon,
        kl,
        indep,
        total: recon + kl + lambda * indep,
        lambda,
    })
}
