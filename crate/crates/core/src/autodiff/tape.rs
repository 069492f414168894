//! Append-only computation tape for reverse-mode differentiation.

use std::cell::RefCell;

use super::kernels::{self, Axis, Kernel};
use super::params::ParamId;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug)]
enum Origin {
    /// Differentiable leaf, optionally bound to a stored parameter.
    Leaf(Option<ParamId>),
    /// Leaf whose gradient is never propagated.
    Constant,
    Op { kernel: Kernel, inputs: Vec<NodeId> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    origin: Origin,
}

/// A recording of one forward pass. Nodes only reference earlier nodes, so
/// reverse insertion order is a valid topological order for backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, origin: Origin) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, origin });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Origin::Leaf(None))
    }

    pub(crate) fn param(&self, id: ParamId, value: Tensor) -> Var<'_> {
        self.push(value, Origin::Leaf(Some(id)))
    }

    /// Input that blocks gradient flow.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Origin::Constant)
    }

    /// Records `kernel` applied to `inputs`.
    pub fn apply(&self, kernel: Kernel, inputs: &[Var<'_>]) -> Result<Var<'_>> {
        for v in inputs {
            if !std::ptr::eq(v.tape, self) {
                return Err(Error::invalid(format!(
                    "{kernel}: input recorded on a different tape"
                )));
            }
        }
        let value = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.id].value).collect();
            kernels::forward(&kernel, &values)?
        };
        let ids = inputs.iter().map(|v| v.id).collect();
        Ok(self.push(value, Origin::Op { kernel, inputs: ids }))
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.apply(Kernel::ConcatRows, parts)
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        self.apply(Kernel::ConcatCols, parts)
    }

    /// Reverse sweep from the scalar `loss`. Visits each node at most once.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) || loss.id >= self.len() {
            return Err(Error::NotOnTape);
        }
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape != [1, 1] {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Origin::Op { kernel, inputs } = &node.origin {
                let values: Vec<&Tensor> = inputs.iter().map(|&i| &nodes[i].value).collect();
                let input_grads = kernels::vjp(kernel, &values, &node.value, &g);
                for (&i, gi) in inputs.iter().zip(input_grads) {
                    if matches!(nodes[i].origin, Origin::Constant) {
                        continue;
                    }
                    match &mut grads[i] {
                        Some(acc) => acc.add_assign(&gi),
                        slot => *slot = Some(gi),
                    }
                }
            }
            grads[id] = Some(g);
        }
        let params = nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.origin {
                Origin::Leaf(Some(p)) => Some((p, i)),
                _ => None,
            })
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            grads,
            shapes,
            params,
        })
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
    params: Vec<(ParamId, NodeId)>,
}

impl Gradients {
    /// `∂loss/∂var`; zeros when `var` did not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.by_id(var.id)
    }

    fn by_id(&self, id: NodeId) -> Tensor {
        match self.grads.get(id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => {
                let [r, c] = self.shapes[id];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Gradients of every parameter leaf on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Tensor)> + '_ {
        self.params.iter().map(|&(p, id)| (p, self.by_id(id)))
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    /// Scalar value; panics unless `1 × 1`.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    /// Copy of this value on the tape as a constant.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    fn unary(self, k: Kernel) -> Result<Var<'t>> {
        self.tape.apply(k, &[self])
    }

    fn binary(self, k: Kernel, other: Var<'t>) -> Result<Var<'t>> {
        self.tape.apply(k, &[self, other])
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Kernel::Matmul, other)
    }

    pub fn t(self) -> Result<Var<'t>> {
        self.unary(Kernel::Transpose)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(Kernel::SliceCols { start, end })
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>> {
        self.unary(Kernel::SliceRows { start, end })
    }

    pub fn gather_cols(self, idx: Vec<usize>) -> Result<Var<'t>> {
        self.unary(Kernel::GatherCols(idx))
    }

    pub fn row_mean(self) -> Result<Var<'t>> {
        self.unary(Kernel::RowMean)
    }

    pub fn col_mean(self) -> Result<Var<'t>> {
        self.unary(Kernel::ColMean)
    }

    pub fn col_sum(self) -> Result<Var<'t>> {
        self.unary(Kernel::ColSum)
    }

    pub fn softmax(self, axis: Axis) -> Result<Var<'t>> {
        self.unary(Kernel::Softmax(axis))
    }

    pub fn log_softmax(self, axis: Axis) -> Result<Var<'t>> {
        self.unary(Kernel::LogSoftmax(axis))
    }

    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(Kernel::Log)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Kernel::Exp)
    }

    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Kernel::Softplus)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Kernel::Tanh)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Kernel::Add, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Kernel::Sub, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Kernel::Mul, other)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Kernel::Div, other)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(Kernel::ScalarMul(s))
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t>> {
        self.unary(Kernel::ScalarAdd(s))
    }

    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        self.binary(Kernel::BiasAdd, bias)
    }

    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(Kernel::MulRowBroadcast, row)
    }

    pub fn dot(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(Kernel::Dot, other)
    }

    pub fn l2_norm(self) -> Result<Var<'t>> {
        self.unary(Kernel::L2Norm)
    }

    pub fn hinge(self) -> Result<Var<'t>> {
        self.unary(Kernel::Hinge)
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Kernel::Square)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Kernel::Sum)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Kernel::Negate)
    }

    pub fn xlogx(self) -> Result<Var<'t>> {
        self.unary(Kernel::XLogX)
    }

    /// Repeats a column vector across `n` columns.
    pub fn repeat_cols(self, n: usize) -> Result<Var<'t>> {
        let ones = self.tape.constant(Tensor::ones(1, n));
        self.matmul(ones)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(2, 3, |r, c| (r + c) as f64));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(x), Tensor::ones(2, 3));
    }

    #[test]
    fn dot_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::column(&[2.0, 3.0]));
        let y = tape.leaf(Tensor::column(&[4.0, 5.0]));
        let g = tape.backward(x.dot(y).unwrap()).unwrap();
        assert_eq!(g.wrt(x).data(), &[4.0, 5.0]);
        assert_eq!(g.wrt(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn squared_norm_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::column(&[1.0, 2.0]));
        let loss = x.l2_norm().unwrap().square().unwrap();
        let g = tape.backward(loss).unwrap().wrt(x);
        assert!((g.data()[0] - 2.0).abs() < 1e-9);
        assert!((g.data()[1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn unused_input_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(2, 2));
        let unused = tape.leaf(Tensor::ones(3, 1));
        let g = tape.backward(x.sum().unwrap()).unwrap();
        assert_eq!(g.wrt(unused), Tensor::zeros(3, 1));
    }

    #[test]
    fn constants_block_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::column(&[1.0, 2.0]));
        let y = x.detach();
        let loss = x.dot(y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(2, 1));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn foreign_loss_rejected() {
        let tape = Tape::new();
        let other = Tape::new();
        let _ = tape.leaf(Tensor::ones(1, 1));
        let y = other.leaf(Tensor::ones(1, 1));
        assert!(matches!(tape.backward(y), Err(Error::NotOnTape)));
        let x = tape.leaf(Tensor::ones(1, 1));
        assert!(x.add(y).is_err());
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let x0 = Tensor::from_fn(3, 2, |r, c| 0.3 * r as f64 - 0.7 * c as f64 + 0.1);
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let l1 = x.softmax(Axis::Rows).unwrap().square().unwrap().sum().unwrap();
            let l2 = x.tanh().unwrap().col_mean().unwrap().sum().unwrap();
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => l1.add(l2).unwrap(),
            };
            tape.backward(loss).unwrap().wrt(x)
        };
        let mut sum = grad_of(1);
        sum.add_assign(&grad_of(2));
        assert!(sum.max_abs_diff(&grad_of(0)) < 1e-14);
    }
}
