//! Named trainable parameters with per-parameter Adam state.

use indexmap::IndexMap;

use super::Tensor;
use crate::{Result, VvError};

struct AdamState {
    m: Vec<f32>,
    v: Vec<f32>,
    t: u64,
}

struct Slot {
    tensor: Tensor,
    adam: AdamState,
}

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

/// Ordered map name -> trainable tensor. Names are unique and stable
/// across save/load; iteration follows registration order.
#[derive(Default)]
pub struct ParameterStore {
    slots: IndexMap<String, Slot>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, tensor: Tensor) -> Result<Tensor> {
        if name.is_empty() {
            return Err(VvError::Contract("parameter name must be non-empty".into()));
        }
        if self.slots.contains_key(name) {
            return Err(VvError::Contract(format!(
                "duplicate parameter name: {name}"
            )));
        }
        if !tensor.requires_grad() {
            return Err(VvError::Contract(format!(
                "parameter {name} must require grad"
            )));
        }
        let n = tensor.numel();
        self.slots.insert(
            name.to_string(),
            Slot {
                tensor: tensor.clone(),
                adam: AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    t: 0,
                },
            },
        );
        Ok(tensor)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slots.get(name).map(|s| &s.tensor)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.slots.iter().map(|(k, s)| (k.as_str(), &s.tensor))
    }

    pub fn zero_grads(&self) {
        for slot in self.slots.values() {
            slot.tensor.zero_grad();
        }
    }

    /// One Adam update over every parameter; grads are required and are
    /// zeroed afterward.
    pub fn adam_step(&mut self, lr: f32) -> Result<()> {
        for (name, slot) in self.slots.iter_mut() {
            let grad = slot.tensor.grad().ok_or_else(|| {
                VvError::Contract(format!("adam_step: parameter {name} has no gradient"))
            })?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(VvError::Numerical(format!(
                    "adam_step: non-finite gradient in {name}"
                )));
            }
            let st = &mut slot.adam;
            st.t += 1;
            let bc1 = 1.0 - ADAM_BETA1.powi(st.t as i32);
            let bc2 = 1.0 - ADAM_BETA2.powi(st.t as i32);
            slot.tensor.set_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    st.m[i] = ADAM_BETA1 * st.m[i] + (1.0 - ADAM_BETA1) * g;
                    st.v[i] = ADAM_BETA2 * st.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = st.m[i] / bc1;
                    let v_hat = st.v[i] / bc2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            });
            slot.tensor.zero_grad();
        }
        Ok(())
    }

    /// Optimizer state export: (name, m, v, t) per parameter.
    pub fn adam_snapshot(&self) -> Vec<(String, Vec<f32>, Vec<f32>, u64)> {
        self.slots
            .iter()
            .map(|(k, s)| (k.clone(), s.adam.m.clone(), s.adam.v.clone(), s.adam.t))
            .collect()
    }

    pub fn restore_adam(&mut self, name: &str, m: Vec<f32>, v: Vec<f32>, t: u64) -> Result<()> {
        let slot = self
            .slots
            .get_mut(name)
            .ok_or_else(|| VvError::Format {
                offset: 0,
                msg: format!("optimizer state for unknown parameter {name}"),
            })?;
        let n = slot.tensor.numel();
        if m.len() != n || v.len() != n {
            return Err(VvError::Format {
                offset: 0,
                msg: format!("optimizer state shape mismatch for {name}"),
            });
        }
        slot.adam = AdamState { m, v, t };
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with_scalar(value: f32) -> (ParameterStore, Tensor) {
        let mut store = ParameterStore::new();
        let p = store
            .register("w", Tensor::param(vec![value], &[1]).unwrap())
            .unwrap();
        (store, p)
    }

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let (mut store, p) = store_with_scalar(0.7);
        p.zero_grad();
        // explicit zero gradient
        let loss = p.scale(0.0).sum_all();
        loss.backward().unwrap();
        store.adam_step(0.01).unwrap();
        assert_eq!(p.to_vec(), vec![0.7]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // param 0, grad 1, lr 1e-3, t=1: bias-corrected update is
        // -lr * 1 / (1 + eps) ~ -1e-3
        let (mut store, p) = store_with_scalar(0.0);
        let loss = p.sum_all();
        loss.backward().unwrap();
        store.adam_step(1e-3).unwrap();
        let got = p.to_vec()[0];
        assert!((got + 1e-3).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let (mut store, _p) = store_with_scalar(0.0);
        assert!(matches!(store.adam_step(1e-3), Err(VvError::Contract(_))));
    }

    #[test]
    fn identical_sequences_stay_identical() {
        let run = || {
            let (mut store, p) = store_with_scalar(0.3);
            for step in 0..10 {
                let c = Tensor::scalar(step as f32 + 1.0);
                let loss = p.mul(&c).unwrap().sum_all();
                loss.backward().unwrap();
                store.adam_step(1e-2).unwrap();
            }
            p.to_vec()[0].to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParameterStore::new();
        store
            .register("w", Tensor::param(vec![0.0], &[1]).unwrap())
            .unwrap();
        assert!(store
            .register("w", Tensor::param(vec![0.0], &[1]).unwrap())
            .is_err());
    }
}
