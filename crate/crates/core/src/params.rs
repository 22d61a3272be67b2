//! Named parameter storage shared by every model component.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Which part of the network a parameter belongs to; drives stage freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    /// Per-canvas classifier used in stage 1 and by the multi-canvas baselines.
    CanvasHead,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Graph handles for every parameter of a store, in store order.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
    trainable: Vec<bool>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Routes one parameter through another graph value, e.g. a gradient-check probe.
    pub fn replace(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }
}

/// `U(-1/√fan_in, 1/√fan_in)` initialisation.
pub fn fan_in_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param { name, group, tensor });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Total scalar count of a group.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .map(|p| p.tensor.numel())
            .sum()
    }

    /// Puts every parameter on the graph; only groups selected by `trainable` get gradients.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(ParamGroup) -> bool) -> Bindings {
        let mut vars = Vec::with_capacity(self.params.len());
        let mut flags = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let train = trainable(p.group);
            let v = if train {
                g.leaf(p.tensor.clone())
            } else {
                g.constant(p.tensor.clone())
            };
            vars.push(v);
            flags.push(train);
        }
        Bindings { vars, trainable: flags }
    }

    /// Adds the graph's leaf gradients into the stored gradient buffers.
    /// Trainable parameters the loss did not reach receive zeros.
    pub fn accumulate(&mut self, g: &Graph, bindings: &Bindings) {
        for ((p, &v), &train) in self.params.iter_mut().zip(&bindings.vars).zip(&bindings.trainable) {
            if !train {
                continue;
            }
            match g.grad(v) {
                Some(grad) => p.tensor.accumulate_grad(grad),
                None => p.tensor.accumulate_grad(&vec![0.0; p.tensor.numel()]),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.clear_grad());
    }

    /// Scales every present gradient buffer.
    pub fn scale_grads(&mut self, factor: f64) {
        self.params.iter_mut().for_each(|p| p.tensor.scale_grad(factor));
    }

    /// FNV-1a over the raw bits of one group's values.
    pub fn checksum(&self, group: ParamGroup) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for p in self.params.iter().filter(|p| p.group == group) {
            for v in p.tensor.data() {
                for b in v.to_bits().to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Copies values for every name present in `other`; shapes must agree.
    pub fn load_values(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in named {
            let Some(id) = self.find(name) else { continue };
            let dst = &mut self.params[id.0].tensor;
            if dst.shape() != t.shape() {
                return Err(Error::Input(format!(
                    "checkpoint tensor {name} has shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}
