//! Finite-difference gradient verification.
//!
//! Checks run on a 64-bit tape so the central-difference truncation error
//! is visible above round-off; the training path itself stays 32-bit.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

pub const DEFAULT_EPS: f64 = 1e-4;

/// Max relative error between the tape gradient and central differences,
/// over every coordinate of every input.
///
/// The relative error of one coordinate is
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check_multi<F>(inputs: &[(Vec<usize>, Vec<f64>)], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check: eps must be positive"));
    }

    let eval = |points: &[Vec<f64>]| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(points)
            .map(|((shape, _), data)| tape.leaf(shape, data.clone()))
            .collect::<Result<_>>()?;
        let loss = f(&mut tape, &vars)?;
        if tape.value(loss).len() != 1 {
            return Err(Error::invalid("grad_check: f must produce a scalar"));
        }
        let value = tape.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::numeric("grad_check: non-finite evaluation"));
        }
        let mut grads = tape.backward(loss)?;
        let analytic = vars
            .iter()
            .zip(inputs)
            .map(|(&v, (_, data))| grads.take(v).unwrap_or_else(|| vec![0.0; data.len()]))
            .collect();
        Ok((value, analytic))
    };

    let base: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let (_, analytic) = eval(&base)?;

    let mut worst = 0.0f64;
    for (arg, (_, data)) in inputs.iter().enumerate() {
        for i in 0..data.len() {
            let h = eps * data[i].abs().max(1.0);
            let mut plus = base.clone();
            plus[arg][i] += h;
            let mut minus = base.clone();
            minus[arg][i] -= h;
            let (fp, _) = eval(&plus)?;
            let (fm, _) = eval(&minus)?;
            let numeric = (fp - fm) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::numeric("grad_check: non-finite difference"));
            }
            let a = analytic[arg][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Single-input convenience wrapper around [`grad_check_multi`].
pub fn grad_check<F>(shape: &[usize], point: &[f64], f: F, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_multi(&[(shape.to_vec(), point.to_vec())], |tape, vars| f(tape, vars[0]), eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_truncation_order() {
        // f(x) = sum(x*x); analytic gradient 2x. Central differences are
        // exact for quadratics up to round-off.
        let err = grad_check(
            &[3],
            &[3.0, -1.5, 0.25],
            |tape, x| {
                let sq = tape.mul(x, x)?;
                Ok(tape.sum_all(sq))
            },
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn linear_is_roundoff_level() {
        let err = grad_check(&[4], &[0.1, 0.2, 0.3, 0.4], |tape, x| Ok(tape.sum_all(x)), DEFAULT_EPS)
            .unwrap();
        assert!(err < 1e-10, "err = {err}");
    }

    #[test]
    fn rejects_bad_eps_and_nonfinite() {
        assert!(grad_check(&[1], &[1.0], |tape, x| Ok(tape.sum_all(x)), 0.0).is_err());
        let r = grad_check(
            &[1],
            &[-1.0],
            |tape, x| {
                let s = tape.sqrt(x);
                Ok(tape.sum_all(s))
            },
            DEFAULT_EPS,
        );
        assert!(r.is_err());
    }
}
