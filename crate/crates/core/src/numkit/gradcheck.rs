use serde::Serialize;

use super::mat::Mat;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a central-difference comparison.
#[derive(Clone, Debug, Serialize)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the tape gradient of `f` at `x` against the fourth-order central
/// difference `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
///
/// `f` records a scalar loss on the given tape as a function of the supplied
/// parameter handle. The relative error per coordinate uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(f: F, x: &Mat, step: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::Evaluation(format!("step must be > 0, got {step}")));
    }
    let eval = |point: &Mat| -> Result<f64> {
        let mut tape = Tape::new();
        let p = tape.param(point.clone());
        let loss = f(&mut tape, p)?;
        let v = tape.scalar(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::Evaluation("non-finite loss near the check point".into()))
        }
    };

    let mut tape = Tape::new();
    let p = tape.param(x.clone());
    let loss = f(&mut tape, p)?;
    if !tape.scalar(loss).is_finite() {
        return Err(Error::Evaluation("non-finite loss at the check point".into()));
    }
    let analytic = tape.grad(loss, p)?;

    let mut report = FiniteDiffReport { max_rel_error: 0.0, worst_index: 0, analytic: 0.0, numeric: 0.0 };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let mut at = |offset: f64| -> Result<f64> {
            probe.data_mut()[i] = orig + offset;
            eval(&probe)
        };
        let (u1, d1, u2, d2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
        probe.data_mut()[i] = orig;

        let numeric = (8.0 * (u1 - d1) - (u2 - d2)) / (12.0 * step);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_error || i == 0 {
            report = FiniteDiffReport { max_rel_error: rel, worst_index: i, analytic: a, numeric };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Mat::new(2, 3, vec![0.3, -1.2, 2.0, 0.7, 0.0, -0.4]).unwrap();
        let r = finite_diff_check(
            |t, p| {
                let sq = t.mul(p, p)?;
                Ok(t.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let x = Mat::row_vector(vec![1.0]);
        assert!(finite_diff_check(|t, p| Ok(t.sum(p)), &x, 0.0).is_err());
        let r = finite_diff_check(|t, p| Ok(t.affine(p, f64::INFINITY, 0.0)), &x, 1e-5);
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
