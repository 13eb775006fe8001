use std::collections::HashMap;

use super::{DiffError, Graph, NodeId, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

/// Named trainable tensors plus their accumulated gradients.
///
/// Gradients accumulate across [`ParamStore::accumulate`] calls until
/// [`ParamStore::zero_grad`] is called.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    touched: Vec<bool>,
    index: HashMap<String, usize>,
}

/// Parameters of one store placed into one graph.
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn node(&self, p: ParamId) -> NodeId {
        self.ids[p.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a parameter; names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        self.touched.push(false);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId, DiffError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| DiffError::UnknownParam(name.to_string()))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, p: ParamId) -> &str {
        &self.names[p.0]
    }

    pub fn value(&self, p: ParamId) -> &Tensor {
        &self.values[p.0]
    }

    pub fn value_mut(&mut self, p: ParamId) -> &mut Tensor {
        &mut self.values[p.0]
    }

    pub fn grad(&self, p: ParamId) -> &Tensor {
        &self.grads[p.0]
    }

    /// Whether any accumulated backward pass reached this parameter since the last
    /// [`ParamStore::zero_grad`].
    pub fn touched(&self, p: ParamId) -> bool {
        self.touched[p.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
        self.touched.iter_mut().for_each(|t| *t = false);
    }

    /// Inserts every parameter into `graph` as a differentiable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            ids: self.values.iter().map(|v| graph.param(v.clone())).collect(),
        }
    }

    /// Inserts every parameter as a constant (no gradient tracking).
    pub fn bind_frozen(&self, graph: &mut Graph) -> Bound {
        Bound {
            ids: self.values.iter().map(|v| graph.constant(v.clone())).collect(),
        }
    }

    /// Adds the graph gradients of the bound parameters into this store.
    pub fn accumulate(&mut self, graph: &Graph, bound: &Bound) {
        for (i, &node) in bound.ids.iter().enumerate() {
            if let Some(g) = graph.grad(node) {
                self.grads[i].axpy(1.0, g);
                self.touched[i] = true;
            }
        }
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}
