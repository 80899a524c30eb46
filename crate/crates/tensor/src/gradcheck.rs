//! Finite-difference checks for graph gradients.
//!
//! The numeric side only ever evaluates forward values, so it is independent
//! of the adjoint rules it verifies.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::matrix::Matrix;

/// Gradients below this magnitude are compared in absolute rather than
/// relative terms.
pub const RELATIVE_FLOOR: f64 = 1e-5;

/// Worst-case element-wise disagreement for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
}

/// `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Central differences of a scalar function with respect to `inputs[which]`.
pub fn central_difference(
    f: &dyn Fn(&[Matrix<f64>]) -> Result<f64>,
    inputs: &[Matrix<f64>],
    which: usize,
    h: f64,
) -> Result<Matrix<f64>> {
    let mut work = inputs.to_vec();
    let (rows, cols) = inputs[which].shape();
    let mut out = Matrix::zeros(rows, cols);
    for k in 0..rows * cols {
        let orig = work[which].data()[k];
        work[which].data_mut()[k] = orig + h;
        let plus = f(&work)?;
        work[which].data_mut()[k] = orig - h;
        let minus = f(&work)?;
        work[which].data_mut()[k] = orig;
        out.data_mut()[k] = (plus - minus) / (2.0 * h);
    }
    Ok(out)
}

/// Compares autodiff against central differences for every input.
///
/// `build` receives one parameter leaf per input and must return a `1 x 1`
/// root. The returned reports are in input order.
pub fn check_gradients(
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Matrix<f64>],
    h: f64,
) -> Result<Vec<InputReport>> {
    let eval = |xs: &[Matrix<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let leaves: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
        let root = build(&mut g, &leaves)?;
        Ok(g.value(root).item())
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs.iter().map(|x| g.param(x.clone())).collect();
    let root = build(&mut g, &leaves)?;
    g.backward(root)?;

    let mut reports = Vec::with_capacity(inputs.len());
    for (i, &leaf) in leaves.iter().enumerate() {
        let numeric = central_difference(&eval, inputs, i, h)?;
        let analytic = g
            .grad(leaf)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(numeric.rows(), numeric.cols()));
        let mut rep = InputReport {
            max_relative_error: 0.0,
            max_abs_error: 0.0,
        };
        for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
            rep.max_relative_error = rep.max_relative_error.max(relative_error(a, n));
            rep.max_abs_error = rep.max_abs_error.max((a - n).abs());
        }
        reports.push(rep);
    }
    Ok(reports)
}

/// Largest relative error across all reports.
pub fn worst(reports: &[InputReport]) -> f64 {
    reports
        .iter()
        .map(|r| r.max_relative_error)
        .fold(0.0, f64::max)
}
