//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Outcome of a finite-difference check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let t = g.value(out);
    if !t.is_scalar() {
        return Err(Error::Backward(format!("checked function must be scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Finite-difference stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`, error O(h²).
    Central2,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`, error O(h⁴); allows
    /// a larger step and so less cancellation in `f(x+h) − f(x−h)`.
    Central4,
}

/// Compares the tape gradient of the scalar function `f` at `params` with
/// central differences of step `eps`.
pub fn finite_difference_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    finite_difference_check_with(f, params, eps, Stencil::Central2)
}

/// [`finite_difference_check`] with an explicit stencil.
pub fn finite_difference_check_with<F>(f: F, params: &[Tensor], eps: f64, stencil: Stencil) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Domain {
            op: "finite_difference_check",
            reason: format!("eps must lie in (0, 1e-2], got {eps}"),
        });
    }
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("every param is a leaf").data().to_vec();
        for j in 0..params[pi].len() {
            let orig = params[pi].data()[j];
            let mut at = |x: f64| -> Result<f64> {
                work[pi].data_mut()[j] = x;
                evaluate(&f, &work)
            };
            let numeric = match stencil {
                Stencil::Central2 => (at(orig + eps)? - at(orig - eps)?) / (2.0 * eps),
                Stencil::Central4 => {
                    let (p1, m1) = (at(orig + eps)?, at(orig - eps)?);
                    let (p2, m2) = (at(orig + 2.0 * eps)?, at(orig - 2.0 * eps)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps)
                }
            };
            work[pi].data_mut()[j] = orig;
            let a = analytic[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.entries += 1;
            if rel > report.max_rel_error || report.entries == 1 {
                report.max_rel_error = rel;
                report.worst = (pi, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
