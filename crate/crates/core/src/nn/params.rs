use std::collections::{BTreeMap, HashMap};
use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// Named model parameters, each flagged frozen or trainable.
///
/// Names are hierarchical (`encoder.blocks.0.attn.q.weight`) and unique.
/// Registration order is stable and is the order used by checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamRegistry {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor, frozen: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Param { name, value, frozen });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.entries[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id)
    }

    /// Σ element count over non-frozen entries.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|p| !p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn frozen_count(&self) -> usize {
        self.entries.iter().filter(|p| p.frozen).map(|p| p.value.len()).sum()
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.entries[id.0].frozen = frozen;
    }

    /// Copies values from `other` into same-named entries. Every entry of
    /// `self` must be present in `other` with identical shape and frozen flag.
    pub fn load_values_from(&mut self, other: &ParamRegistry) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Format(format!(
                "parameter count mismatch: model has {}, source has {}",
                self.len(),
                other.len()
            )));
        }
        for p in &mut self.entries {
            let src = other
                .by_name(&p.name)
                .ok_or_else(|| Error::UnknownParam(p.name.clone()))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::shape("load_values_from", p.value.shape(), src.value.shape()));
            }
            if src.frozen != p.frozen {
                return Err(Error::Format(format!("frozen flag mismatch for `{}`", p.name)));
            }
            p.value = src.value.clone();
        }
        Ok(())
    }
}

/// Gradients keyed by parameter, covering exactly the trainable set of the
/// registry that produced them.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Grads {
    entries: BTreeMap<ParamId, Tensor>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    /// All-zero gradients for every trainable parameter.
    pub fn zeros_like(params: &ParamRegistry) -> Self {
        let entries = params
            .trainable_ids()
            .map(|id| (id, Tensor::zeros(params.get(id).value.shape())))
            .collect();
        Grads { entries }
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.entries.insert(id, grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.entries.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.entries.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self += other`, entry by entry.
    pub fn accumulate(&mut self, other: &Grads) -> Result<()> {
        for (id, g) in &other.entries {
            match self.entries.get_mut(id) {
                Some(dst) => {
                    if dst.shape() != g.shape() {
                        return Err(Error::shape("Grads::accumulate", dst.shape(), g.shape()));
                    }
                    for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
                None => {
                    self.entries.insert(*id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, c: Scalar) {
        for g in self.entries.values_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
}

/// A [`Tape`] bound to a parameter registry for one forward/backward pass.
///
/// Parameters enter the tape lazily, once each, as leaves that require grad
/// exactly when they are trainable.
pub struct Graph<'r> {
    tape: Tape,
    params: &'r ParamRegistry,
    bound: Vec<Option<Var>>,
}

impl<'r> Graph<'r> {
    pub fn new(params: &'r ParamRegistry) -> Self {
        Graph {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
        }
    }

    pub fn params(&self) -> &'r ParamRegistry {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.params.get(id);
        let v = self.tape.leaf(p.value.clone(), !p.frozen);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn is_bound(&self, id: ParamId) -> bool {
        self.bound[id.0].is_some()
    }

    /// Runs backward from `loss` and returns a gradient for every trainable
    /// parameter (zero for those the forward pass never touched).
    pub fn gradients(&mut self, loss: Var) -> Result<Grads> {
        self.tape.backward(loss)?;
        let mut grads = Grads::new();
        for id in self.params.trainable_ids() {
            let g = self.bound[id.0]
                .and_then(|v| self.tape.grad(v).cloned())
                .unwrap_or_else(|| Tensor::zeros(self.params.get(id).value.shape()));
            grads.insert(id, g);
        }
        Ok(grads)
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        &self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }
}
