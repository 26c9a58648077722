//! Named parameter storage with deterministic ordering, plus SGD with
//! momentum. Insertion order is the canonical order for initialization,
//! checkpoints, and updates.

use crate::autograd::{Gradients, Tape, VarId};
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use std::collections::HashMap;

pub struct ParamStore {
    names: Vec<String>,
    values: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(value);
    }

    /// Tensor initialized U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn insert_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut R) {
        let a = 1.0 / (fan_in as f64).sqrt();
        let v = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-a..a));
        self.insert(name, v);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        &self.values[self.index[name]]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn set(&mut self, name: &str, value: ArrayD<f64>) -> Result<()> {
        let idx = *self.index.get(name).ok_or_else(|| Error::Checkpoint {
            param: name.to_string(),
            message: "unknown parameter".into(),
        })?;
        if self.values[idx].shape() != value.shape() {
            return Err(Error::Checkpoint {
                param: name.to_string(),
                message: format!(
                    "shape {:?} does not match model shape {:?}",
                    value.shape(),
                    self.values[idx].shape()
                ),
            });
        }
        self.values[idx] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.values.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Sum of element counts over parameters whose name starts with
    /// `prefix`.
    pub fn elements_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Lazily binds parameters onto a tape and remembers which node belongs to
/// which parameter so gradients can be routed back after `backward`.
pub struct ParamBinder {
    bound: Vec<Option<VarId>>,
}

impl ParamBinder {
    pub fn new(store: &ParamStore) -> Self {
        ParamBinder {
            bound: vec![None; store.len()],
        }
    }

    pub fn var(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> VarId {
        let idx = store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(id) = self.bound[idx] {
            return id;
        }
        let id = tape.leaf(store.get(name).clone());
        self.bound[idx] = Some(id);
        id
    }

    /// Gradient per bound parameter, in store order; `None` for parameters
    /// that were never bound or are unreachable from the loss.
    pub fn collect<'g>(&self, grads: &'g Gradients) -> Vec<Option<&'g ArrayD<f64>>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|id| grads.get(id)))
            .collect()
    }
}

/// SGD with momentum: `v = mu * v + g`, `theta -= lr * v`.
pub struct SgdState {
    velocity: Vec<ArrayD<f64>>,
}

impl SgdState {
    pub fn new(store: &ParamStore) -> Self {
        SgdState {
            velocity: store
                .iter()
                .map(|(_, v)| ArrayD::zeros(v.raw_dim()))
                .collect(),
        }
    }

    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<&ArrayD<f64>>],
        lr: f64,
        momentum: f64,
    ) {
        assert_eq!(grads.len(), store.len());
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let v = &mut self.velocity[i];
            v.zip_mut_with(g, |vi, &gi| *vi = momentum * *vi + gi);
            store.values[i].zip_mut_with(v, |p, &vi| *p -= lr * vi);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn insertion_order_is_stable() {
        let mut s = ParamStore::new();
        s.insert("b.w", arr1(&[1.0]).into_dyn());
        s.insert("a.w", arr1(&[2.0]).into_dyn());
        let names: Vec<&str> = s.iter().map(|(n, _)| n).collect();
        assert_eq!(names, vec!["b.w", "a.w"]);
    }

    #[test]
    fn set_rejects_shape_mismatch() {
        let mut s = ParamStore::new();
        s.insert_zeros("x", &[2, 3]);
        assert!(s.set("x", ArrayD::zeros(IxDyn(&[3, 2]))).is_err());
        assert!(s.set("nope", ArrayD::zeros(IxDyn(&[1]))).is_err());
        assert!(s.set("x", ArrayD::zeros(IxDyn(&[2, 3]))).is_ok());
    }

    #[test]
    fn sgd_momentum_update() {
        let mut s = ParamStore::new();
        s.insert("w", arr1(&[1.0, 1.0]).into_dyn());
        let mut opt = SgdState::new(&s);
        let g = arr1(&[0.5, -0.5]).into_dyn();
        opt.step(&mut s, &[Some(&g)], 0.1, 0.9);
        assert!((s.get("w")[[0]] - 0.95).abs() < 1e-12);
        // second step accumulates velocity: v = 0.9*0.5 + 0.5 = 0.95
        opt.step(&mut s, &[Some(&g)], 0.1, 0.9);
        assert!((s.get("w")[[0]] - (0.95 - 0.095)).abs() < 1e-12);
    }
}
