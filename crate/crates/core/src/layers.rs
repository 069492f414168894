use crate::autodiff::{Bound, ParamId, ParamStore, Rng, Tensor, Var};
use crate::error::Result;

/// `y = W x + b` applied to every column of `x`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    /// Weights uniform in `±1/√fan_in`, zero bias.
    pub fn init(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = store.add(format!("{name}.w"), rng.uniform_tensor(fan_out, fan_in, bound));
        let b = store.add(format!("{name}.b"), Tensor::zeros(fan_out, 1));
        Self { w, b }
    }

    pub fn lookup(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            w: store.id(&format!("{name}.w"))?,
            b: store.id(&format!("{name}.b"))?,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        p.get(self.w).matmul(x)?.add_bias(p.get(self.b))
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.value(self.w).cols()
    }

    pub fn fan_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).rows()
    }
}
