//! Finite-difference verification of tape gradients.

use crate::tape::{Tape, TensorId};
use crate::tensor::{Tensor, TensorError};

/// Default step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Compares the tape gradient of `f` at `x` against central finite
/// differences and returns the worst relative error
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
///
/// `f` must build the same scalar loss every time it is called; it receives a
/// fresh tape and the id of the registered input.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, TensorId) -> Result<TensorId, TensorError>,
{
    grad_check_multi(|tape, ids| f(tape, ids[0]), std::slice::from_ref(x), h).map(|per| per[0])
}

/// Multi-input variant of [`grad_check`]: returns the worst relative error
/// per input tensor, in input order.
pub fn grad_check_multi<F>(f: F, inputs: &[Tensor], h: f64) -> Result<Vec<f64>, TensorError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    if h <= 0.0 {
        return Err(TensorError::invalid("grad_check", format!("step h = {} must be positive", h)));
    }
    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; tape.value(id).numel()]))
        .collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = perturbed.iter().map(|t| tape.param(t)).collect();
        let loss = f(&mut tape, &ids)?;
        tape.value(loss).item()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = vec![0.0f64; inputs.len()];
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].numel() {
            let orig = work[ti].data()[j];
            work[ti].data_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[ti].data_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            if rel > worst[ti] {
                worst[ti] = rel;
            }
        }
    }
    Ok(worst)
}
