//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! path with the backward rules it verifies.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// `(f(x + ε) − f(x − ε)) / 2ε` for one coordinate.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x: f64, eps: f64) -> Result<f64> {
    Ok((f(x + eps)? - f(x - eps)?) / (2.0 * eps))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.coordinates += other.coordinates;
    }
}

/// Compare `backward` against central differences for every element of
/// every input. `f` must build a scalar from the input vars.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let root = f(&mut tape, &vars)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            tape.grad(*v)
                .map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)
        })
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let root = f(&mut tape, &vars)?;
        tape.value(root).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let numeric = central_difference(
                |x| {
                    work[i].data_mut()[j] = x;
                    eval(&work)
                },
                x0,
                eps,
            )?;
            work[i].data_mut()[j] = x0;
            report.max_rel_error = report
                .max_rel_error
                .max(relative_error(analytic[i][j], numeric));
            report.coordinates += 1;
        }
    }
    Ok(report)
}
