//! Central finite-difference check of tape gradients.

use crate::autograd::{Tape, Var};
use crate::error::{usage_err, Result};
use crate::tensor::{Float, Tensor};

/// Floor on the denominator of the relative error. A central difference at
/// step 1e-5 on an O(1) loss carries roughly 1e-10 of rounding noise, so
/// components much smaller than this floor cannot be compared relatively.
pub const REL_ERROR_FLOOR: Float = 1e-6;

/// Outcome of [`grad_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: Float,
    /// `(input, flat element)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub analytic: Float,
    pub numeric: Float,
    pub elements_checked: usize,
}

pub fn relative_error(analytic: Float, numeric: Float) -> Float {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<Float>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if !value.shape().is_scalar() {
        return Err(usage_err!("grad_check function must return a scalar"));
    }
    Ok(value.item())
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences with step `eps`, over every element of every input.
///
/// Returns the maximum of `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(inputs: &[Tensor], eps: Float, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let selection: Vec<Vec<usize>> = inputs.iter().map(|t| (0..t.len()).collect()).collect();
    grad_check_elements(inputs, &selection, eps, f)
}

/// Like [`grad_check`] but only perturbs the listed flat elements of each input.
pub fn grad_check_elements<F>(
    inputs: &[Tensor],
    selection: &[Vec<usize>],
    eps: Float,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if selection.len() != inputs.len() {
        return Err(usage_err!("one element selection per input is required"));
    }
    if !(eps > 0.0) {
        return Err(usage_err!("finite-difference step must be positive"));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf gradient").clone())
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: None,
        analytic: 0.0,
        numeric: 0.0,
        elements_checked: 0,
    };
    let mut perturbed = inputs.to_vec();
    for (i, elements) in selection.iter().enumerate() {
        for &j in elements {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + eps;
            let plus = evaluate(&f, &perturbed)?;
            perturbed[i].data_mut()[j] = orig - eps;
            let minus = evaluate(&f, &perturbed)?;
            perturbed[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            report.elements_checked += 1;
            if err > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = err;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_sum_has_zero_error() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
        let r = grad_check(&[x], 1e-5, |t, v| t.sum(v[0])).unwrap();
        assert!(r.max_relative_error < 1e-9);
        assert_eq!(r.elements_checked, 4);
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-7, 0.0) - 0.1).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
