//! Per-channel affine coupling flows.
//!
//! One coupling step keeps the first `split` coordinates `a` of a channel and
//! maps the rest to `b * exp(s(a)) + t(a)`. Its log-determinant is the sum of
//! `s(a)`. Between consecutive steps the coordinates of the channel are
//! reversed so every coordinate is eventually transformed.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{mlp_on_tape, Bound, MlpIdx, ModelParams};
use crate::tensor::Tensor;

/// Bound on the log-scale before exponentiation.
pub const SCALE_CLAMP: f64 = 5.0;

fn check_split(width: usize, split: usize, cols: usize) -> Result<()> {
    if split == 0 || split >= width || cols != width {
        return Err(Error::shape(
            "coupling",
            format!("{cols} columns, width {width}, split {split}"),
        ));
    }
    Ok(())
}

/// One forward coupling step on the rows of `z` (each row one channel
/// vector). Returns the transformed rows and the per-row log-determinant.
pub fn coupling_forward(
    z: &Tensor,
    split: usize,
    s: impl Fn(&Tensor) -> Tensor,
    t: impl Fn(&Tensor) -> Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    check_split(z.cols(), split, z.cols())?;
    let a = z.slice_cols(0, split);
    let b = z.slice_cols(split, z.cols() - split);
    let (sv, tv) = (s(&a), t(&a));
    if sv.shape() != b.shape() || tv.shape() != b.shape() {
        return Err(Error::shape("coupling_forward", "scale/shift output width"));
    }
    let out_b = Tensor::from_fn(b.rows(), b.cols(), |i, j| {
        b.get(i, j) * sv.get(i, j).exp() + tv.get(i, j)
    });
    let logdet = (0..sv.rows()).map(|i| sv.row(i).iter().sum()).collect();
    Ok((Tensor::concat_cols(&[&a, &out_b])?, logdet))
}

/// Exact inverse of [`coupling_forward`] with the same networks.
pub fn coupling_inverse(
    z: &Tensor,
    split: usize,
    s: impl Fn(&Tensor) -> Tensor,
    t: impl Fn(&Tensor) -> Tensor,
) -> Result<Tensor> {
    check_split(z.cols(), split, z.cols())?;
    let a = z.slice_cols(0, split);
    let y = z.slice_cols(split, z.cols() - split);
    let (sv, tv) = (s(&a), t(&a));
    if sv.shape() != y.shape() || tv.shape() != y.shape() {
        return Err(Error::shape("coupling_inverse", "scale/shift output width"));
    }
    let b = Tensor::from_fn(y.rows(), y.cols(), |i, j| {
        (y.get(i, j) - tv.get(i, j)) * (-sv.get(i, j)).exp()
    });
    Tensor::concat_cols(&[&a, &b])
}

/// Weights of one scale or shift network.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl CouplingNet {
    fn from_params(p: &ModelParams, idx: MlpIdx) -> Self {
        Self {
            w1: p.tensors[idx.w1].clone(),
            b1: p.tensors[idx.b1].clone(),
            w2: p.tensors[idx.w2].clone(),
            b2: p.tensors[idx.b2].clone(),
        }
    }

    /// `tanh(x W1 + b1) W2 + b2`.
    pub fn eval(&self, x: &Tensor) -> Tensor {
        let mut h = x.matmul(&self.w1).expect("coupling net input width");
        for i in 0..h.rows() {
            for (v, b) in h.row_mut(i).iter_mut().zip(self.b1.data()) {
                *v = (*v + b).tanh();
            }
        }
        let mut o = h.matmul(&self.w2).expect("coupling net hidden width");
        for i in 0..o.rows() {
            for (v, b) in o.row_mut(i).iter_mut().zip(self.b2.data()) {
                *v += b;
            }
        }
        o
    }

    /// Scale network output with the clamp applied.
    pub fn eval_scale(&self, x: &Tensor) -> Tensor {
        self.eval(x).map(|v| v.clamp(-SCALE_CLAMP, SCALE_CLAMP))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingStep {
    pub s: CouplingNet,
    pub t: CouplingNet,
}

/// The coupling steps of one channel, in application order.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFlow {
    pub width: usize,
    pub split: usize,
    pub steps: Vec<CouplingStep>,
}

fn reverse_cols(z: &Tensor) -> Tensor {
    let w = z.cols();
    Tensor::from_fn(z.rows(), w, |i, j| z.get(i, w - 1 - j))
}

impl ChannelFlow {
    /// Flows of channel `k` copied out of a parameter set.
    pub fn from_params(p: &ModelParams, k: usize) -> Self {
        let steps = p
            .layout
            .flows
            .get(k)
            .map(|per| {
                per.iter()
                    .map(|c| CouplingStep {
                        s: CouplingNet::from_params(p, c.s),
                        t: CouplingNet::from_params(p, c.t),
                    })
                    .collect()
            })
            .unwrap_or_default();
        Self {
            width: p.config.channel_dim,
            split: p.config.flow_split(),
            steps,
        }
    }

    /// All steps on rows of `z`, reversing coordinates between steps.
    pub fn forward(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut cur = z.clone();
        let mut logdet = vec![0.0; z.rows()];
        for (m, step) in self.steps.iter().enumerate() {
            if m > 0 {
                cur = reverse_cols(&cur);
            }
            let (next, ld) = coupling_forward(
                &cur,
                self.split,
                |a| step.s.eval_scale(a),
                |a| step.t.eval(a),
            )?;
            logdet.iter_mut().zip(ld).for_each(|(acc, v)| *acc += v);
            cur = next;
        }
        Ok((cur, logdet))
    }

    pub fn inverse(&self, z: &Tensor) -> Result<Tensor> {
        let mut cur = z.clone();
        for (m, step) in self.steps.iter().enumerate().rev() {
            cur = coupling_inverse(
                &cur,
                self.split,
                |a| step.s.eval_scale(a),
                |a| step.t.eval(a),
            )?;
            if m > 0 {
                cur = reverse_cols(&cur);
            }
        }
        Ok(cur)
    }
}

/// Applies every channel's flow to its block of `z0` on the tape. Returns the
/// flowed embedding and the per-node total log-determinant (`N x 1`), or
/// `None` when no steps are configured.
pub fn apply_flows(tape: &mut Tape, bound: &Bound<'_>, z0: Var) -> Result<(Var, Option<Var>)> {
    let cfg = bound.config();
    let steps = cfg.active_flow_steps();
    if steps == 0 {
        return Ok((z0, None));
    }
    let (k, w, split) = (cfg.channels, cfg.channel_dim, cfg.flow_split());
    let (_, d) = tape.shape(z0);
    if d != k * w {
        return Err(Error::shape("apply_flows", format!("{d} columns, {k}x{w}")));
    }
    check_split(w, split, w)?;
    let reversed: Arc<Vec<usize>> = Arc::new((0..w).rev().collect());
    let mut blocks = Vec::with_capacity(k);
    let mut logdet: Option<Var> = None;
    for c in 0..k {
        let mut cur = tape.slice_cols(z0, c * w, w)?;
        for (m, step) in bound.layout().flows[c].iter().enumerate() {
            if m > 0 {
                cur = tape.select_cols(cur, reversed.clone())?;
            }
            let a = tape.slice_cols(cur, 0, split)?;
            let b = tape.slice_cols(cur, split, w - split)?;
            let s_raw = mlp_on_tape(tape, bound, step.s, a, Tape::tanh)?;
            let s = tape.clamp(s_raw, -SCALE_CLAMP, SCALE_CLAMP)?;
            let t = mlp_on_tape(tape, bound, step.t, a, Tape::tanh)?;
            let scale = tape.exp(s)?;
            let scaled = tape.mul(b, scale)?;
            let shifted = tape.add(scaled, t)?;
            cur = tape.concat_cols(&[a, shifted])?;
            let ld = tape.sum_rows(s)?;
            logdet = Some(match logdet {
                Some(acc) => tape.add(acc, ld)?,
                None => ld,
            });
        }
        blocks.push(cur);
    }
    let z = tape.concat_cols(&blocks)?;
    Ok((z, logdet))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_coupling() {
        let z = Tensor::from_fn(3, 4, |i, j| (i * 4 + j) as f64 - 5.0);
        let zero = |a: &Tensor| Tensor::zeros(a.rows(), 2);
        let (out, ld) = coupling_forward(&z, 2, zero, zero).unwrap();
        assert_eq!(out, z);
        assert_eq!(ld, vec![0.0; 3]);
    }

    #[test]
    fn hand_coupling() {
        let z = Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let s = |a: &Tensor| Tensor::full(a.rows(), 1, 2f64.ln());
        let t = |a: &Tensor| Tensor::full(a.rows(), 1, 0.5);
        let (out, ld) = coupling_forward(&z, 1, s, t).unwrap();
        assert!((out.get(0, 0) - 1.0).abs() < 1e-15);
        assert!((out.get(0, 1) - 2.5).abs() < 1e-15);
        assert!((ld[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn constant_shift_inverse_subtracts() {
        let z = Tensor::from_vec(1, 3, vec![0.3, 1.0, 2.0]).unwrap();
        let s = |a: &Tensor| Tensor::zeros(a.rows(), 2);
        let t = |a: &Tensor| Tensor::full(a.rows(), 2, 0.25);
        let back = coupling_inverse(&z, 1, s, t).unwrap();
        assert_eq!(back.data(), &[0.3, 0.75, 1.75]);
    }

    #[test]
    fn bad_split_is_rejected() {
        let z = Tensor::zeros(1, 2);
        let f = |a: &Tensor| a.clone();
        assert!(coupling_forward(&z, 0, f, f).is_err());
        assert!(coupling_forward(&z, 2, f, f).is_err());
    }
}
