use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be non-negative, got {}", self.lr0)));
        }
        Ok(())
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// `v ← μ·v + g + wd·w; w ← w − lr·v`. Nothing is written when any updated
/// value would be non-finite.
pub fn sgd_step<T: Real>(w: &mut [T], grad: &[T], velocity: &mut [f64], cfg: &SgdConfig, lr: f64) -> Result<()> {
    if w.len() != grad.len() || w.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "sgd step on {} weights, {} gradients, {} velocities",
            w.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let mut next = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let wi = w[i].as_f64();
        let v = cfg.momentum * velocity[i] + grad[i].as_f64() + cfg.weight_decay * wi;
        let nw = wi - lr * v;
        if !(v.is_finite() && nw.is_finite()) {
            return Err(Error::NonFinite(format!("sgd update of element {i}")));
        }
        next.push((v, nw));
    }
    for (i, (v, nw)) in next.into_iter().enumerate() {
        velocity[i] = v;
        w[i] = T::from_f64_lossy(nw);
    }
    Ok(())
}

/// Momentum buffers for every parameter of a store.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub cfg: SgdConfig,
    velocity: HashMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            velocity: HashMap::new(),
        })
    }

    pub fn step<T: Real>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let w = store.get_mut(*id);
            let v = self.velocity.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
            sgd_step(w.data_mut(), g.data(), v, &self.cfg, lr)
                .map_err(|e| annotate(e, || format!("parameter {}", store.name(*id))))?;
        }
        Ok(())
    }
}

fn annotate(e: Error, what: impl FnOnce() -> String) -> Error {
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{m} of {}", what())),
        other => other,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.0,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps > 0.0 && self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("adam needs eps > 0 and a non-negative learning rate"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Bias-corrected Adam step. Leaves `a` and `state` untouched on a
/// non-finite result.
pub fn adam_step<T: Real>(a: &mut [T], grad: &[T], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if a.len() != grad.len() || a.len() != state.m.len() || a.len() != state.v.len() {
        return Err(Error::Shape(format!("adam step on {} values, {} gradients", a.len(), grad.len())));
    }
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let mut next = Vec::with_capacity(a.len());
    for i in 0..a.len() {
        let g = grad[i].as_f64();
        let m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let na = a[i].as_f64() - cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
        if !na.is_finite() {
            return Err(Error::NonFinite(format!("adam update of element {i}")));
        }
        next.push((m, v, na));
    }
    for (i, (m, v, na)) in next.into_iter().enumerate() {
        state.m[i] = m;
        state.v[i] = v;
        a[i] = T::from_f64_lossy(na);
    }
    state.t = t;
    Ok(())
}

/// Adam over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub cfg: AdamConfig,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, tensors: &[Tensor<T>]) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            states: tensors.iter().map(|t| AdamState::new(t.len())).collect(),
        })
    }

    pub fn step<T: Real>(&mut self, tensors: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if tensors.len() != self.states.len() || grads.len() != tensors.len() {
            return Err(Error::Shape("adam tensor count changed".into()));
        }
        let cfg = AdamConfig { lr, ..self.cfg };
        for ((t, g), s) in tensors.iter_mut().zip(grads).zip(&mut self.states) {
            adam_step(t.data_mut(), g.data(), s, &cfg)?;
        }
        Ok(())
    }
}
