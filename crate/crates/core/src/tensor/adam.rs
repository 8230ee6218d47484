//! Adam optimizer step with bias correction.

use super::{s, Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-parameter optimizer state. Moments are zero at `step_count == 0`.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    /// State for a parameter with `len` values and default hyperparameters
    /// (beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8).
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![T::zero(); len],
            second_moment: vec![T::zero(); len],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One Adam update in place: `param -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &[T],
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<()> {
    if grad.len() != param.len() || state.first_moment.len() != param.len() {
        return Err(Error::ShapeMismatch(format!(
            "adam_step: parameter has {} values, gradient {}, state {}",
            param.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let b1: T = s(state.beta1);
    let b2: T = s(state.beta2);
    let one = T::one();
    let corr1: T = s(1.0 / (1.0 - state.beta1.powf(t)));
    let corr2: T = s(1.0 / (1.0 - state.beta2.powf(t)));
    let eps: T = s(state.epsilon);
    let lr_t: T = s(lr);

    for ((p, &g), (m, v)) in param.data_mut().iter_mut().zip(grad).zip(
        state
            .first_moment
            .iter_mut()
            .zip(state.second_moment.iter_mut()),
    ) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m * corr1;
        let v_hat = *v * corr2;
        *p = *p - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
