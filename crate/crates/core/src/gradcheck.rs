//! Finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added to the relative-error denominator.
pub const REL_GUARD: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat entry index)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
}

/// Compares tape gradients of `loss_fn` at `params` against central
/// differences with step `eps`.
///
/// `loss_fn` receives a fresh tape and one trainable [`Var`] per entry of
/// `params`, and must return a scalar. Any randomness inside it has to be
/// seeded identically on every call; the check evaluates the base point twice
/// and fails with [`Error::NonDeterministic`] if the values differ.
///
/// The relative error of an entry is `|a - n| / (|a| + |n| + 1e-8)`.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Invalid(format!(
            "finite-difference step {eps:e} outside [1e-6, 1e-4]"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = loss_fn(&mut tape, &vars)?;
    let base = tape.value(loss).item();
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic((base - again).abs()));
    }
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("param gradient").clone();
        for idx in 0..params[pi].len() {
            let orig = params[pi].data()[idx];
            work[pi].data_mut()[idx] = orig + eps;
            let up = eval(&work)?;
            work[pi].data_mut()[idx] = orig - eps;
            let down = eval(&work)?;
            work[pi].data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.data()[idx];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + REL_GUARD);
            report.entries_checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((pi, idx));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
