use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub(crate) struct Param<T> {
    pub(crate) name: String,
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Tensor<T>>,
    pub(crate) m: Tensor<T>,
    pub(crate) v: Tensor<T>,
}

/// Ordered, uniquely named trainable arrays plus their Adam moments.
#[derive(Clone, Debug)]
pub struct ParamStore<T> {
    pub(crate) params: Vec<Param<T>>,
    index: HashMap<String, usize>,
    pub(crate) step: u64,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Clone, Debug)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    /// Wraps vars that already hold the store's parameters, in store order.
    /// Used when parameters enter a graph as ordinary inputs, e.g. under
    /// [`grad_check`](crate::grad_check).
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bindings { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
            step: 0,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::State(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            m: Tensor::zeros(value.shape()),
            v: Tensor::zeros(value.shape()),
            name,
            value,
            grad: None,
        });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total trainable scalar count; optimizer state excluded.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params[id.0].grad.as_ref()
    }

    pub fn set_grad(&mut self, id: ParamId, grad: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if grad.shape() != p.value.shape() {
            return Err(NnError::Dimension(format!(
                "gradient for {} has shape {:?}, parameter is {:?}",
                p.name,
                grad.shape(),
                p.value.shape()
            )));
        }
        p.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Shared Adam step counter.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p.name.as_str(), &p.value))
    }

    /// Places a copy of every parameter on `graph` as a gradient leaf.
    pub fn bind(&self, graph: &mut Graph<T>) -> Bindings {
        Bindings {
            vars: self.params.iter().map(|p| graph.leaf(p.value.clone())).collect(),
        }
    }

    /// Places every parameter on `graph` as a constant (inference only).
    pub fn bind_frozen(&self, graph: &mut Graph<T>) -> Bindings {
        Bindings {
            vars: self
                .params
                .iter()
                .map(|p| graph.constant(p.value.clone()))
                .collect(),
        }
    }

    /// Stores gradients from a backward pass. Bound parameters the loss did
    /// not reach receive an explicit zero gradient.
    pub fn collect_grads(&mut self, bindings: &Bindings, grads: &mut Gradients<T>) -> Result<()> {
        for (i, &v) in bindings.vars.iter().enumerate() {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(self.params[i].value.shape()));
            self.set_grad(ParamId(i), g)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    m: p.m.cast(),
                    v: p.v.cast(),
                })
                .collect(),
            index: self.index.clone(),
            step: self.step,
        }
    }
}
