use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// First-moment accumulator.
    pub m: Tensor,
    /// Second-moment accumulator.
    pub v: Tensor,
    /// Frozen parameters still receive gradients but are never updated.
    pub trainable: bool,
}

/// Named parameter tensors with gradients and optimizer state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        let [r, c] = value.shape();
        self.params.push(Param {
            name,
            value,
            grad: Tensor::zeros(r, c),
            m: Tensor::zeros(r, c),
            v: Tensor::zeros(r, c),
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub(crate) fn push_raw(&mut self, param: Param) -> Result<ParamId> {
        let shape = param.value.shape();
        if [param.grad.shape(), param.m.shape(), param.v.shape()]
            .iter()
            .any(|s| *s != shape)
        {
            return Err(Error::Checkpoint(format!(
                "state shapes of {} disagree with value",
                param.name
            )));
        }
        if self.find(&param.name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate parameter {}", param.name)));
        }
        self.params.push(param);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.find(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        Bound {
            vars: self
                .params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(ParamId(i), p.value.clone()))
                .collect(),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.params() {
            self.params[id.0].grad.add_assign(&g);
        }
    }
}

/// Parameters recorded on one tape, indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Adaptive moment estimation, or plain gradient descent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Optimizer {
    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            ..Self::adam(lr)
        }
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::adam(lr),
            OptimizerKind::Sgd => Self::sgd(lr),
        }
    }

    /// Applies one update from the accumulated gradients.
    pub fn step(&self, store: &mut ParamStore) {
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for p in store.params.iter_mut().filter(|p| p.trainable) {
            let n = p.value.len();
            let (value, grad) = (p.value.data_mut(), p.grad.data());
            match self.kind {
                OptimizerKind::Sgd => {
                    for i in 0..n {
                        value[i] -= self.lr * grad[i];
                    }
                }
                OptimizerKind::Adam => {
                    let (m, v) = (p.m.data_mut(), p.v.data_mut());
                    for i in 0..n {
                        m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                        v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        value[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}
