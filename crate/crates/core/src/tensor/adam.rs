//! Bias-corrected Adam.

use super::params::ParamStore;
use super::{Scalar, TensorError, TensorResult};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    fn validate(&self) -> TensorResult<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TensorError::InvalidArgument {
                op: "adam",
                message: format!("betas must lie in [0,1): got {} and {}", self.beta1, self.beta2),
            });
        }
        Ok(())
    }
}

/// Optimizer state: one pair of moment tensors per parameter, plus the step
/// counter used for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step_count: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn for_store(store: &ParamStore<T>) -> Self {
        let first_moment = store.iter().map(|e| vec![T::zero(); e.data.len()]).collect();
        let second_moment = store.iter().map(|e| vec![T::zero(); e.data.len()]).collect();
        AdamState { first_moment, second_moment, step_count: 0 }
    }
}

/// One Adam update over every parameter in `store`. `grads` must be parallel
/// to the store's slot order (as returned by `ParamStore::gradients`).
pub fn adam_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[Vec<T>],
    state: &mut AdamState<T>,
    hyper: &AdamHyper,
) -> TensorResult<()> {
    hyper.validate()?;
    if grads.len() != store.len() || state.first_moment.len() != store.len() {
        return Err(TensorError::InvalidArgument {
            op: "adam",
            message: format!(
                "gradient/state count {} does not match parameter count {}",
                grads.len(),
                store.len()
            ),
        });
    }
    state.step_count += 1;
    let t = state.step_count;
    let b1 = T::from_f64(hyper.beta1);
    let b2 = T::from_f64(hyper.beta2);
    let one = T::one();
    let lr = T::from_f64(hyper.lr);
    let eps = T::from_f64(hyper.eps);
    let corr1 = T::from_f64(1.0 - hyper.beta1.powi(t as i32));
    let corr2 = T::from_f64(1.0 - hyper.beta2.powi(t as i32));

    for slot in 0..store.len() {
        let entry = store.entry_mut(super::params::ParamSlot(slot));
        let g = &grads[slot];
        if g.len() != entry.data.len() {
            return Err(TensorError::DataLength { expected: entry.data.len(), got: g.len() });
        }
        let m = &mut state.first_moment[slot];
        let v = &mut state.second_moment[slot];
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            entry.data[i] = entry.data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
