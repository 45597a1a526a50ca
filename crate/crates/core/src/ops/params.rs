use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Rng, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named learnable tensors plus non-learnable buffers (batch-norm running
/// statistics).
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
    by_name: HashMap<String, ParamId>,
    buffer_by_name: HashMap<String, BufferId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            by_name: HashMap::new(),
            buffer_by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push((name, value));
        id
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> BufferId {
        let name = name.into();
        assert!(!self.buffer_by_name.contains_key(&name), "duplicate buffer {name}");
        let id = BufferId(self.buffers.len());
        self.buffer_by_name.insert(name.clone(), id);
        self.buffers.push((name, value));
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].0
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor<T> {
        &self.buffers[id.0].1
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor<T> {
        &mut self.buffers[id.0].1
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn lookup_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffer_by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total learnable scalars allocated.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn named_buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Overwrites a parameter or buffer by name.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = if let Some(id) = self.lookup(name) {
            &mut self.params[id.0].1
        } else if let Some(id) = self.lookup_buffer(name) {
            &mut self.buffers[id.0].1
        } else {
            return Err(Error::invalid(format!("unknown tensor name {name}")));
        };
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "{name}: stored {:?}, given {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Copies every tensor of `self` that `source` holds under the same name.
    /// Returns how many were copied.
    pub fn copy_matching(&mut self, source: &ParamStore<T>) -> Result<usize> {
        let mut copied = 0;
        for (name, value) in source.named_params().chain(source.named_buffers()) {
            if self.lookup(name).is_some() || self.lookup_buffer(name).is_some() {
                self.assign(name, value.clone())?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    /// Number of named tensors, parameters and buffers together.
    pub fn num_tensors(&self) -> usize {
        self.params.len() + self.buffers.len()
    }
}

/// One forward pass: the tape plus everything the layers need to record onto
/// it.
pub struct Forward<'a, T> {
    pub tape: Tape<T>,
    store: &'a mut ParamStore<T>,
    mode: Mode,
    rng: Rng,
    weights_grad: bool,
    bound: HashMap<ParamId, Var>,
    relu_cache: HashMap<Var, Var>,
}

impl<'a, T: Real> Forward<'a, T> {
    /// `rng` drives dropout and drop-path; `weights_grad = false` binds the
    /// parameters as constants so the backward sweep skips their gradients.
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode, rng: Rng, weights_grad: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            rng,
            weights_grad,
            bound: HashMap::new(),
            relu_cache: HashMap::new(),
        }
    }

    /// Continues recording on an existing tape.
    pub fn with_tape(tape: Tape<T>, store: &'a mut ParamStore<T>, mode: Mode, rng: Rng, weights_grad: bool) -> Self {
        Self {
            tape,
            ..Self::new(store, mode, rng, weights_grad)
        }
    }

    /// Routes a parameter to an existing tape entry instead of its stored value.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.bound.insert(id, v);
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// The tape entry for a parameter, recorded on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let v = if self.weights_grad {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(id, v);
        v
    }

    /// ReLU of `x`, shared by every consumer of the same tape entry.
    pub fn relu(&mut self, x: Var) -> Var {
        if let Some(&r) = self.relu_cache.get(&x) {
            return r;
        }
        let r = self.tape.relu(x);
        self.relu_cache.insert(x, r);
        r
    }

    /// Per-sample drop-path on `x` (train mode only).
    pub fn drop_path(&mut self, x: Var, p: f64) -> Var {
        super::drop_path(&mut self.tape, x, p, &mut self.rng, self.mode)
    }

    pub fn finish(self) -> (Tape<T>, Bindings) {
        let mut bound: Vec<(ParamId, Var)> = self.bound.into_iter().collect();
        bound.sort();
        (self.tape, Bindings { bound })
    }
}

/// Which tape entry each parameter was bound to during a forward pass.
#[derive(Clone, Debug)]
pub struct Bindings {
    bound: Vec<(ParamId, Var)>,
}

impl Bindings {
    /// Gradients per parameter, in parameter-id order. Parameters the loss did
    /// not reach get no entry.
    pub fn collect<T: Real>(&self, grads: &mut Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.bound
            .iter()
            .filter_map(|&(id, v)| grads.take(v).map(|g| (id, g)))
            .collect()
    }

    pub fn var(&self, id: ParamId) -> Option<Var> {
        self.bound.iter().find(|(p, _)| *p == id).map(|&(_, v)| v)
    }
}
