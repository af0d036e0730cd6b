//! Central finite-difference verification of analytic gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Result, WchError};
use crate::tensor::{Real, Tensor};

/// Default perturbation for 64-bit checks.
pub const DEFAULT_EPS: Real = 1e-5;

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max |a - n| / max(1e-12, |a| + |n|)` over every checked coordinate.
    pub max_rel_error: Real,
    /// (input index, flat coordinate) where the maximum occurred.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Relative error used throughout the gradient suite.
pub fn relative_error(analytic: Real, numeric: Real) -> Real {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Check `f` at a single input.
pub fn grad_check<F>(f: F, x: &Tensor, eps: Real) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>>,
{
    grad_check_many(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), eps)
}

/// Check `f` with respect to every tensor in `inputs`.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: Real) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(eps > 0.0) {
        return Err(WchError::Parameter(format!("eps must be positive, got {eps}")));
    }
    let analytic = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let y = f(&tape, &vars)?;
        check_finite(y.value().item(), "f(x)")?;
        let grads = tape.backward(y)?;
        vars.iter().map(|&v| grads.wrt(v)).collect::<Vec<_>>()
    };
    for (i, g) in analytic.iter().enumerate() {
        if !g.all_finite() {
            return Err(WchError::Numeric(format!(
                "analytic gradient of input {i} is not finite"
            )));
        }
    }

    let eval = |inputs: &[Tensor]| -> Result<Real> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&tape, &vars)?.value().item();
        check_finite(y, "perturbed f(x)")?;
        Ok(y)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut max_rel_error: Real = 0.0;
    let mut worst = (0, 0);
    for i in 0..inputs.len() {
        let mut num = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * eps);
            num.data_mut()[j] = n;
            let e = relative_error(analytic[i].data()[j], n);
            if e > max_rel_error {
                max_rel_error = e;
                worst = (i, j);
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}

fn check_finite(v: Real, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(WchError::Numeric(format!("{what} is not finite: {v}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_all_ones_gradient() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 0.0, 5.0, -0.25]).unwrap();
        let r = grad_check(|_, x| x.sum_all(), &x, DEFAULT_EPS).unwrap();
        assert!(r.max_rel_error < 1e-10, "{}", r.max_rel_error);
        assert!(r.analytic[0].data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn ste_is_reported_as_mismatch() {
        // sign is flat almost everywhere, the surrogate passes ones through
        let x = Tensor::new(&[3], vec![0.3, -0.7, 0.4]).unwrap();
        let r = grad_check(|_, x| x.ste_sign(true)?.sum_all(), &x, DEFAULT_EPS).unwrap();
        assert!(r.numeric[0].data().iter().all(|&n| n == 0.0));
        assert_eq!(r.max_rel_error, 1.0);
    }

    #[test]
    fn non_finite_output_is_numeric_error() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let err = grad_check(|_, x| x.scale(Real::INFINITY)?.sum_all(), &x, DEFAULT_EPS);
        assert!(matches!(err, Err(WchError::Numeric(_))));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        assert!(grad_check(|_, x| x.sum_all(), &x, 0.0).is_err());
    }
}
