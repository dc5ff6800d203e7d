use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of |analytic - numeric| / max(1e-12, |analytic| + |numeric|)
    pub max_rel_error: f64,
    /// (input index, flat coordinate) attaining the maximum
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `eps` (five-point stencil), coordinate by coordinate.
///
/// `f` must be pure: called repeatedly on perturbed copies of `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::Usage(format!("grad_check: function returned shape {:?}", out.shape())));
    }
    if !out.item().is_finite() {
        return Err(Error::Numeric("grad_check: non-finite output at the base point".into()));
    }
    out.backward()?;

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: (0, 0), analytic: 0.0, numeric: 0.0, coordinates: 0 };
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().map(|g| g.clone()).unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let base = leaf.to_vec();
        for j in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut data = base.clone();
                data[j] += delta;
                let mut args: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
                args[i] = Tensor::new(data, leaf.shape())?;
                let v = no_grad(|| f(&args))?.item();
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "grad_check: non-finite output perturbing input {i} coordinate {j}"
                    )));
                }
                Ok(v)
            };
            // fourth-order central stencil
            let numeric =
                (8.0 * (eval(eps)? - eval(-eps)?) - (eval(2.0 * eps)? - eval(-2.0 * eps)?)) / (12.0 * eps);
            let a = analytic[j];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
