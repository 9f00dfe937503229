use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A trainable tensor plus its Adam moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    name: String,
    pub(crate) value: Tensor,
    pub(crate) m: Tensor,
    pub(crate) v: Tensor,
    pub(crate) step: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn first_moment(&self) -> &Tensor {
        &self.m
    }

    pub fn second_moment(&self) -> &Tensor {
        &self.v
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// An ordered, named collection of parameters belonging to one model.
///
/// A frozen store binds its parameters as constants, so no gradient is ever
/// produced for them.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    trainable: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// The graph leaves created for a store by [`ParamStore::bind`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    /// Uses existing leaves, one per parameter in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            trainable: true,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.params.push(Parameter::new(name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), self.trainable))
            .collect();
        Binding { vars }
    }

    /// Records every parameter as a constant leaf, for forward-only use.
    pub fn bind_constant(&self, g: &mut Graph) -> Binding {
        let vars = self.params.iter().map(|p| g.leaf(p.value.clone(), false)).collect();
        Binding { vars }
    }

    /// Adds `scale ·` the gradients found in `grads` into each parameter's
    /// grad buffer. Parameters that did not reach the loss receive zeros so
    /// that every bound parameter ends up with a populated buffer.
    pub fn accumulate(&mut self, binding: &Binding, grads: &Gradients, scale: f32) -> Result<()> {
        if !self.trainable {
            return Err(TensorError::Usage("accumulating gradients into a frozen store".into()));
        }
        if binding.vars.len() != self.params.len() {
            return Err(TensorError::Usage(format!(
                "binding has {} parameters, store has {}",
                binding.vars.len(),
                self.params.len()
            )));
        }
        for (p, &v) in self.params.iter_mut().zip(&binding.vars) {
            match grads.get(v) {
                Some(g) => p.value.accumulate_grad(g, scale)?,
                None => {
                    if p.value.grad().is_none() {
                        let zeros = vec![0.0; p.value.len()];
                        p.value.accumulate_grad(&zeros, 0.0)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Adds precomputed flat gradients (one per parameter, in store order).
    pub fn accumulate_flat(&mut self, grads: &[Vec<f32>], scale: f32) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(TensorError::Usage(format!(
                "{} gradient buffers for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            p.value.accumulate_grad(g, scale)?;
        }
        Ok(())
    }

    /// Extracts the gradients of this store's leaves as flat buffers in store
    /// order, with zeros for leaves that did not reach the loss.
    pub fn collect_grads(&self, binding: &Binding, grads: &Gradients) -> Vec<Vec<f32>> {
        self.params
            .iter()
            .zip(&binding.vars)
            .map(|(p, &v)| {
                grads
                    .get(v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.value.len()])
            })
            .collect()
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.value.clear_grad());
    }

    /// Little-endian bytes of every parameter value in store order.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_scalars() * 4);
        for p in &self.params {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_store_binds_constants() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::full(&[2], 1.0));
        s.set_trainable(false);
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        assert!(!g.requires_grad(b.var(id)));
        let loss = g.sum(b.var(id));
        let grads = g.backward(loss).unwrap();
        assert!(matches!(s.accumulate(&b, &grads, 1.0), Err(TensorError::Usage(_))));
    }

    #[test]
    fn unused_parameters_get_zero_buffers() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::full(&[1], 3.0));
        s.add("unused", Tensor::full(&[2], 1.0));
        let mut g = Graph::new();
        let b = s.bind(&mut g);
        let loss = g.sum(b.var(a));
        let grads = g.backward(loss).unwrap();
        s.accumulate(&b, &grads, 1.0).unwrap();
        assert_eq!(s.get(ParamId(0)).value().grad().unwrap(), &[1.0]);
        assert_eq!(s.get(ParamId(1)).value().grad().unwrap(), &[0.0, 0.0]);
    }
}
