//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Per-coordinate `|analytic - numeric| / max(1, |analytic|)`.
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub worst_coordinate: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares `grad(point)` against central differences of `f` at every
/// coordinate of `point`.
pub fn finite_difference_check(
    f: impl Fn(&[f64]) -> f64,
    grad: impl Fn(&[f64]) -> Vec<f64>,
    point: &[f64],
    h: f64,
    tol: f64,
) -> GradCheckReport {
    let analytic = grad(point);
    assert_eq!(analytic.len(), point.len(), "gradient length differs from point");
    let mut x = point.to_vec();
    let mut errors = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let up = f(&x);
        x[i] = orig - h;
        let down = f(&x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        errors.push((analytic[i] - numeric).abs() / analytic[i].abs().max(1.0));
    }
    let (worst_coordinate, max_error) = errors
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0f64), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
    GradCheckReport {
        passed: errors.iter().all(|&e| e <= tol),
        errors,
        max_error,
        worst_coordinate,
        tol,
    }
}

/// Runs [`finite_difference_check`] on a scalar function built on a 64-bit
/// [`Graph`]. `build` receives one parameter [`Var`] per entry of `inputs`
/// and returns the scalar output; every input element is checked.
pub fn check_graph(
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    inputs: &[Tensor<f64>],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let unflatten = |x: &[f64]| -> Vec<Tensor<f64>> {
        let mut off = 0;
        shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let t = Tensor::from_parts(s.clone(), x[off..off + n].to_vec());
                off += n;
                t
            })
            .collect()
    };
    let run = |x: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = unflatten(x).into_iter().map(|t| g.param(t)).collect();
        let out = build(&mut g, &vars)?;
        let value = g.value(out).item();
        let mut grads = Vec::new();
        if with_grad {
            g.backward(out)?;
            for &v in &vars {
                grads.extend_from_slice(g.grad(v).data());
            }
        }
        Ok((value, grads))
    };
    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    // Surface construction errors before differencing.
    run(&point, true)?;
    Ok(finite_difference_check(
        |x| run(x, false).map(|r| r.0).unwrap_or(f64::NAN),
        |x| run(x, true).map(|r| r.1).unwrap_or_default(),
        &point,
        h,
        tol,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes_tightly() {
        let point = [0.3, -1.2, 2.5, 0.0];
        let r = finite_difference_check(
            |x| x.iter().map(|v| v * v).sum(),
            |x| x.iter().map(|v| 2.0 * v).collect(),
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        assert!(r.passed);
        assert!(r.max_error < 1e-8, "{}", r.max_error);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let point = [0.3, -1.2, 2.5];
        let r = finite_difference_check(
            |x| x.iter().map(|v| v * v).sum(),
            |x| x.iter().map(|v| 2.0 * v + 0.01).collect(),
            &point,
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        assert!(!r.passed);
    }
}
