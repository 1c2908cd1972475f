//! Central finite-difference gradient checking for tape computations.
//!
//! Used by the test suites as an independent oracle for the analytic
//! gradients produced by [`Tape::backward`].

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as the
/// denominator so that exactly-zero gradients do not divide by zero.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

fn eval<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the analytic gradient of the scalar `f(inputs)` with respect to
/// every input entry against central differences with step `h`.
pub fn check_gradients_with_step<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("trainable leaf"))
        .collect();

    let mut report = GradReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for e in 0..input.len() {
            let orig = input.data()[e];
            probe[k].data_mut()[e] = orig + h;
            let up = eval(&probe, &f)?;
            probe[k].data_mut()[e] = orig - h;
            let down = eval(&probe, &f)?;
            probe[k].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[e];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (k, e);
            }
            report.max_abs_err = report.max_abs_err.max(abs);
            report.checked += 1;
        }
    }
    Ok(report)
}

pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_gradients_with_step(inputs, DEFAULT_STEP, f)
}
