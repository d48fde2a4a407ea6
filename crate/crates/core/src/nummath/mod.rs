//! Numeric core: parameter-vector algebra, the two classifiers, their
//! analytic gradients and a finite-difference gradient oracle.

mod model;
mod vector;

pub use model::{
    eval_loss, finite_diff_grad, grad, loss_and_grad, Batch, LossReport, ModelKind, ModelSpec,
};
pub use vector::{axpy, grad_norm_sq, mean, ParamVector};

/// Largest coordinatewise relative error `|a - b| / max(|a|, |b|, floor)`.
///
/// `floor` keeps coordinates whose true value is near zero from turning
/// round-off noise into huge ratios.
pub fn max_relative_error(a: &ParamVector, b: &ParamVector, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
