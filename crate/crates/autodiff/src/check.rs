//! Scalar-function helpers: reverse-mode gradients, central differences and
//! the comparison between the two.

use crate::error::{Result, TapeError};
use crate::matrix::Matrix;
use crate::tape::{Tape, Var};

/// Default central-difference step used by [`gradient_check`].
pub const DEFAULT_FD_STEP: f64 = 1e-4;

/// Evaluates `f` at `x` (passed as a `1×n` parameter row) and returns its value
/// and reverse-mode gradient.
pub fn evaluate_with_gradient<F>(f: F, x: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.parameter(Matrix::row(x))?;
    let out = f(&mut tape, input)?;
    let grads = tape.backward(out)?;
    let value = tape.value(out).item();
    let gradient = grads
        .get(input)
        .map_or_else(|| vec![0.0; x.len()], |g| g.data().to_vec());
    Ok((value, gradient))
}

/// Forward evaluation only.
pub fn evaluate<F>(f: &F, x: &[f64]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let input = tape.constant(Matrix::row(x))?;
    let out = f(&mut tape, input)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(TapeError::NotScalar {
            rows: v.rows(),
            cols: v.cols(),
        });
    }
    Ok(v.item())
}

/// Central differences `(f(x + h eᵢ) - f(x - h eᵢ)) / 2h` for every coordinate.
pub fn finite_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TapeError::InvalidStep(h));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let plus = f(&probe)?;
        probe[i] = x[i] - h;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(TapeError::NonFiniteEvaluation {
                coordinate: Some(i),
            });
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// Outcome of comparing reverse-mode and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub passed: bool,
    pub tolerance: f64,
    /// Largest error over coordinates, normalized by `max(|analytic|, |numeric|, 1)`.
    pub max_relative_error: f64,
    pub worst_coordinate: Option<usize>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Error between two gradient entries, relative once magnitudes exceed one.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

/// Compares the reverse-mode gradient of `f` at `x` against central
/// differences with step [`DEFAULT_FD_STEP`].
///
/// The caller keeps `x` away from kinks (ReLU at zero, min/max ties).
pub fn gradient_check<F>(f: F, x: &[f64], tol: f64) -> Result<GradientReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    gradient_check_with_step(f, x, tol, DEFAULT_FD_STEP)
}

pub fn gradient_check_with_step<F>(f: F, x: &[f64], tol: f64, h: f64) -> Result<GradientReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let (_, analytic) = evaluate_with_gradient(&f, x)?;
    let numeric = finite_difference_gradient(|p| evaluate(&f, p), x, h)?;
    let mut worst = None;
    let mut max_err = 0.0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if worst.is_none() || e > max_err {
            max_err = e;
            worst = Some(i);
        }
    }
    Ok(GradientReport {
        passed: max_err <= tol,
        tolerance: tol,
        max_relative_error: max_err,
        worst_coordinate: worst,
        analytic,
        numeric,
    })
}
