//! Central finite-difference gradient checking.
//!
//! Analytic gradients from [`Tape::backward`] are compared against
//! `(f(x+h) - f(x-h)) / 2h` element by element. The relative error uses
//! `max(|analytic|, |numeric|, 1)` as denominator so near-zero gradients are
//! judged on absolute error.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Worst disagreement found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_element: usize,
}

fn scalar_loss(
    inputs: &[Tensor],
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value(loss).data()[0])
}

/// Checks the gradient of a scalar-valued graph with respect to every input
/// tensor flagged `requires_grad`. `build` must construct the same graph each
/// time it is called (it is re-run for every perturbed evaluation).
pub fn check_gradients(
    inputs: &[Tensor],
    step: f64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_input: 0,
        worst_element: 0,
    };
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad() {
            continue;
        }
        let analytic = tape
            .grad(vars[i])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        for e in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[e] += step;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[e] -= step;
            let numeric = (scalar_loss(&plus, build)? - scalar_loss(&minus, build)?) / (2.0 * step);
            let denom = analytic[e].abs().max(numeric.abs()).max(1.0);
            let rel = (analytic[e] - numeric).abs() / denom;
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst_input: i,
                    worst_element: e,
                };
            }
        }
    }
    Ok(report)
}

/// Panics with a diagnostic if the check exceeds `tol`.
pub fn assert_gradients_close(
    inputs: &[Tensor],
    tol: f64,
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
) {
    let report = check_gradients(inputs, DEFAULT_STEP, build).expect("gradient check graph");
    assert!(
        report.max_rel_err < tol,
        "gradient mismatch: rel err {} at input {} element {} (tol {tol})",
        report.max_rel_err,
        report.worst_input,
        report.worst_element
    );
}
