//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the reverse-mode rules it is used to verify.

use super::{Result, Tape, Tensor, Var};

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`], so that gradients which are zero
/// up to rounding do not blow up the ratio.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`. At most `max_per_input` evenly strided elements
/// of each input are perturbed.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], h: f64, max_per_input: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (input_idx, var) in vars.iter().enumerate() {
        let n = inputs[input_idx].len();
        let stride = n.div_ceil(max_per_input.max(1)).max(1);
        for elem in (0..n).step_by(stride) {
            let analytic = grads.get(*var).map(|g| g.data()[elem]).unwrap_or(0.0);
            let orig = inputs[input_idx].data()[elem];
            work[input_idx].data_mut()[elem] = orig + h;
            let plus = eval(&work)?;
            work[input_idx].data_mut()[elem] = orig - h;
            let minus = eval(&work)?;
            work[input_idx].data_mut()[elem] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (input_idx, elem);
                report.analytic_at_worst = analytic;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}
