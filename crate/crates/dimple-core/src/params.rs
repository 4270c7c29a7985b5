//! Named parameter storage.
//!
//! Model weights live outside any autodiff graph in a [`ParamStore`]; each
//! training step binds them into a fresh [`Graph`] as `requires_grad` leaves,
//! runs forward/backward, then applies the gradients back to the store. A
//! `BTreeMap` keeps iteration (and therefore SGD, checkpoint layout, and
//! gradcheck reports) in deterministic name order.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// All learnable tensors of a model, keyed by hierarchical names like
/// `text.layer2.attn.q0.w` or `bank.text_prompt1`.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamTensor>,
}

/// Leaf ids of one binding of a [`ParamStore`] into a [`Graph`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: BTreeMap<String, TensorId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param {name}: shape/data mismatch"
        );
        let prior = self.entries.insert(name.to_string(), ParamTensor { shape, data });
        assert!(prior.is_none(), "param {name} registered twice");
    }

    /// Gaussian-initialized parameter.
    pub fn insert_normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut impl Rng) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, shape, data);
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![0.0; n]);
    }

    pub fn insert_ones(&mut self, name: &str, shape: Vec<usize>) {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![1.0; n]);
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(ParamTensor::numel).sum()
    }

    /// Bind every parameter into `graph` as a `requires_grad` leaf.
    pub fn bind(&self, graph: &mut Graph) -> Result<BoundParams> {
        self.bind_with(graph, true)
    }

    /// Bind with explicit gradient tracking (frozen binds skip all backward
    /// bookkeeping; evaluation passes use this).
    pub fn bind_with(&self, graph: &mut Graph, requires_grad: bool) -> Result<BoundParams> {
        let mut ids = BTreeMap::new();
        for (name, p) in &self.entries {
            let id = graph.leaf(p.data.clone(), p.shape.clone(), requires_grad)?;
            ids.insert(name.clone(), id);
        }
        Ok(BoundParams { ids })
    }

    /// Plain SGD: `w -= lr * grad` for every bound parameter that received a
    /// gradient. With `momentum > 0` a per-parameter velocity buffer is used.
    pub fn sgd_step(
        &mut self,
        graph: &Graph,
        bound: &BoundParams,
        lr: f64,
        momentum: f64,
        velocity: &mut BTreeMap<String, Vec<f64>>,
    ) {
        for (name, id) in &bound.ids {
            let Some(grad) = graph.grad(*id) else { continue };
            let p = self.entries.get_mut(name).expect("bound name in store");
            if momentum > 0.0 {
                let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; grad.len()]);
                for ((w, g), vel) in p.data.iter_mut().zip(grad).zip(v.iter_mut()) {
                    *vel = momentum * *vel + g;
                    *w -= lr * *vel;
                }
            } else {
                for (w, g) in p.data.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
        }
    }
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
