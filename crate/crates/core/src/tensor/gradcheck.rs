//! Central finite-difference gradient checking.

use alloc::vec::Vec;

use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with a small absolute floor so near-zero gradients do not
/// blow up the ratio.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = libm::fabs(analytic).max(libm::fabs(numeric)).max(1e-6);
    libm::fabs(analytic - numeric) / denom
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences with step `h`, for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).map_or_else(|| alloc::vec![0.0; t.numel()], |g| g.to_vec()))
        .collect();

    let eval = |probe: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t)).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.scalar_value(loss))
    };

    let mut probe: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - h;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(analytic[i][j], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
