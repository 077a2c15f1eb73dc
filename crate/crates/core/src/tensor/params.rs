//! Named persistent parameters and their initialization.
//!
//! A [`ParamStore`] owns model weights between steps. Each training step
//! re-inserts every entry into a fresh [`Tape`](super::Tape) as a leaf, runs
//! forward/backward, and feeds the collected gradients to the optimizer.
//!
//! Initialization is fan-in-scaled uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
//! for conv/linear weights, zeros for biases, ones for norm gains. Draws come
//! from one RNG stream in registration order, which is fixed by model
//! construction.

use std::collections::HashMap;

use crate::rng::Rng;

use super::{Scalar, Tape, TensorError, TensorRef, TensorResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn register(
        &mut self,
        name: &str,
        shape: Vec<usize>,
        data: Vec<T>,
    ) -> TensorResult<ParamSlot> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength { expected, got: data.len() });
        }
        if self.index.contains_key(name) {
            return Err(TensorError::InvalidArgument {
                op: "param_store",
                message: format!("duplicate parameter name {name:?}"),
            });
        }
        let slot = ParamSlot(self.entries.len());
        self.index.insert(name.to_string(), slot.0);
        self.entries.push(ParamEntry { name: name.to_string(), shape, data });
        Ok(slot)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, slot: ParamSlot) -> &ParamEntry<T> {
        &self.entries[slot.0]
    }

    pub fn entry_mut(&mut self, slot: ParamSlot) -> &mut ParamEntry<T> {
        &mut self.entries[slot.0]
    }

    pub fn slot_by_name(&self, name: &str) -> Option<ParamSlot> {
        self.index.get(name).copied().map(ParamSlot)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<T>> {
        self.entries.iter()
    }

    /// Total number of scalar parameters.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Insert every parameter as a trainable leaf on `tape`, in slot order.
    pub fn leaves(&self, tape: &mut Tape<T>) -> Vec<TensorRef> {
        self.entries
            .iter()
            .map(|e| {
                tape.param(e.data.clone(), e.shape.clone())
                    .expect("stored parameter shape is consistent")
            })
            .collect()
    }

    /// Collect gradients for leaves produced by [`ParamStore::leaves`].
    pub fn gradients(&self, tape: &Tape<T>, leaves: &[TensorRef]) -> Vec<Vec<T>> {
        leaves.iter().map(|&id| tape.grad(id).to_vec()).collect()
    }

    // ── Registration helpers with standard initialization ──────────────

    pub fn register_conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in: usize,
        kh: usize,
        kw: usize,
        rng: &mut Rng,
    ) -> TensorResult<ConvParams> {
        let fan_in = c_in * kh * kw;
        let weight = self.register(
            &format!("{name}.weight"),
            vec![c_out, c_in, kh, kw],
            fan_in_uniform(c_out * fan_in, fan_in, rng),
        )?;
        let bias = self.register(&format!("{name}.bias"), vec![c_out], vec![T::zero(); c_out])?;
        Ok(ConvParams { weight, bias })
    }

    pub fn register_linear(
        &mut self,
        name: &str,
        d_out: usize,
        d_in: usize,
        rng: &mut Rng,
    ) -> TensorResult<LinearParams> {
        let weight = self.register(
            &format!("{name}.weight"),
            vec![d_out, d_in],
            fan_in_uniform(d_out * d_in, d_in, rng),
        )?;
        let bias = self.register(&format!("{name}.bias"), vec![d_out], vec![T::zero(); d_out])?;
        Ok(LinearParams { weight, bias })
    }

    pub fn register_group_norm(&mut self, name: &str, channels: usize) -> TensorResult<NormParams> {
        let gamma =
            self.register(&format!("{name}.gamma"), vec![channels], vec![T::one(); channels])?;
        let beta =
            self.register(&format!("{name}.beta"), vec![channels], vec![T::zero(); channels])?;
        Ok(NormParams { gamma, beta })
    }
}

fn fan_in_uniform<T: Scalar>(count: usize, fan_in: usize, rng: &mut Rng) -> Vec<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..count).map(|_| T::from_f64(rng.uniform(-bound, bound))).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: ParamSlot,
    pub bias: ParamSlot,
}

#[derive(Debug, Clone, Copy)]
pub struct NormParams {
    pub gamma: ParamSlot,
    pub beta: ParamSlot,
}

/// Convenience for tape code: look up the leaf id of a slot.
pub fn leaf(leaves: &[TensorRef], slot: ParamSlot) -> TensorRef {
    leaves[slot.0]
}
