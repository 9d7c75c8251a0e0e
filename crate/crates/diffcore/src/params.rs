use crate::error::{DiffError, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Tensor,
    grad: Tensor,
    group: usize,
    frozen: bool,
    touched: bool,
    updates: u64,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        &mut self.value
    }

    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    #[cfg(test)]
    pub(crate) fn grad_mut(&mut self) -> &mut Tensor {
        &mut self.grad
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Whether a gradient arrived since the last optimizer step.
    pub fn is_touched(&self) -> bool {
        self.touched
    }

    /// Number of optimizer updates applied so far.
    pub fn updates(&self) -> u64 {
        self.updates
    }
}

/// Owns every learnable tensor of a model. Parameters are addressed by
/// [`ParamId`] and belong to a learning-rate group.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: usize) -> ParamId {
        let (r, c) = value.shape();
        self.params.push(Param {
            name: name.into(),
            value,
            grad: Tensor::zeros(r, c),
            group,
            frozen: false,
            touched: false,
            updates: 0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn freeze_group(&mut self, group: usize) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = true;
        }
    }

    /// Adds the parameter gradients recorded on `graph` into the store.
    pub fn absorb(&mut self, graph: &Graph) -> Result<()> {
        for (id, g) in graph.param_grads() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            if !g.is_finite() {
                return Err(DiffError::NonFiniteGrad {
                    name: p.name.clone(),
                });
            }
            p.grad.add_assign(g);
            p.touched = true;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
            p.touched = false;
        }
    }

    /// Total number of scalar slots.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub(crate) fn mark_updated(p: &mut Param) {
        p.updates += 1;
    }
}
