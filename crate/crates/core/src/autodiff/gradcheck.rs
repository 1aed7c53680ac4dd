//! Central finite-difference gradient checks.

use super::{Array, Graph, Result, Tensor};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub op_name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn new(op_name: impl Into<String>, max_rel_error: f64, tolerance: f64) -> Self {
        Self {
            op_name: op_name.into(),
            max_rel_error,
            tolerance,
            // NaN errors must fail
            passed: max_rel_error <= tolerance,
        }
    }

    /// Folds another report for the same op, keeping the worst error.
    pub fn merge(self, other: &GradCheckReport) -> Self {
        let worst = if other.max_rel_error > self.max_rel_error || other.max_rel_error.is_nan() {
            other.max_rel_error
        } else {
            self.max_rel_error
        };
        Self::new(self.op_name, worst, self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks `f` against central differences with respect to a single input.
pub fn grad_check<F>(name: &str, f: F, x: &Array, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, Tensor<'g>) -> Result<Tensor<'g>>,
{
    grad_check_many(name, |g, xs| f(g, xs[0]), std::slice::from_ref(x), tolerance)
}

/// Checks `f` with respect to every element of every input.
pub fn grad_check_many<F>(name: &str, f: F, inputs: &[Array], tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Tensor<'g>]) -> Result<Tensor<'g>>,
{
    let analytic: Vec<Array> = {
        let graph = Graph::new();
        let leaves: Vec<Tensor<'_>> = inputs.iter().map(|a| graph.param(a)).collect();
        let out = f(&graph, &leaves)?;
        out.backward()?;
        leaves
            .iter()
            .zip(inputs)
            .map(|(t, a)| t.grad().unwrap_or_else(|| Array::zeros(a.shape())))
            .collect()
    };
    let eval = |perturbed: &[Array]| -> Result<f64> {
        let graph = Graph::new();
        let leaves: Vec<Tensor<'_>> = perturbed.iter().map(|a| graph.constant(a.clone())).collect();
        Ok(f(&graph, &leaves)?.item())
    };
    let mut worst: f64 = 0.0;
    let mut work: Vec<Array> = inputs.to_vec();
    for (which, input) in inputs.iter().enumerate() {
        for i in 0..input.len() {
            let x0 = input.data()[i];
            work[which].data_mut()[i] = x0 + FD_STEP;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = x0 - FD_STEP;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = x0;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(analytic[which].data()[i], numeric);
            if err.is_nan() || err > worst {
                worst = err;
            }
            if worst.is_nan() {
                return Ok(GradCheckReport::new(name, f64::NAN, tolerance));
            }
        }
    }
    Ok(GradCheckReport::new(name, worst, tolerance))
}
