//! Forward kernels and their vector-Jacobian products.
//!
//! Kernels are pure: they read their inputs and allocate a fresh output.
//! Denominators and norms are guarded by [`DELTA`].

use std::fmt;
use std::str::FromStr;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Guard added to every denominator and norm.
pub const DELTA: f64 = 1e-12;

/// Reduction direction for softmax-like kernels.
///
/// `Rows` normalizes down each column (every column sums to one);
/// `Cols` normalizes across each row.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Kernel {
    Matmul,
    Transpose,
    ConcatRows,
    ConcatCols,
    SliceCols { start: usize, end: usize },
    SliceRows { start: usize, end: usize },
    GatherCols(Vec<usize>),
    RowMean,
    ColMean,
    ColSum,
    Softmax(Axis),
    LogSoftmax(Axis),
    Log,
    Exp,
    Softplus,
    Tanh,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul(f64),
    ScalarAdd(f64),
    /// `m × n` plus an `m × 1` bias repeated across columns.
    BiasAdd,
    /// `m × n` times a `1 × n` row repeated down the rows.
    MulRowBroadcast,
    Dot,
    L2Norm,
    Hinge,
    Square,
    Sum,
    Negate,
    /// `x ln x` with the convention `0 ln 0 = 0`.
    XLogX,
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::Matmul => "matmul",
            Kernel::Transpose => "transpose",
            Kernel::ConcatRows => "concat-rows",
            Kernel::ConcatCols => "concat-cols",
            Kernel::SliceCols { .. } => "slice-cols",
            Kernel::SliceRows { .. } => "slice-rows",
            Kernel::GatherCols(_) => "gather-cols",
            Kernel::RowMean => "row-mean",
            Kernel::ColMean => "col-mean",
            Kernel::ColSum => "col-sum",
            Kernel::Softmax(_) => "softmax",
            Kernel::LogSoftmax(_) => "log-softmax",
            Kernel::Log => "log",
            Kernel::Exp => "exp",
            Kernel::Softplus => "softplus",
            Kernel::Tanh => "tanh",
            Kernel::Add => "add",
            Kernel::Sub => "sub",
            Kernel::Mul => "mul",
            Kernel::Div => "div",
            Kernel::ScalarMul(_) => "scalar-mul",
            Kernel::ScalarAdd(_) => "scalar-add",
            Kernel::BiasAdd => "bias-add",
            Kernel::MulRowBroadcast => "mul-row-broadcast",
            Kernel::Dot => "dot",
            Kernel::L2Norm => "l2-norm",
            Kernel::Hinge => "hinge",
            Kernel::Square => "square",
            Kernel::Sum => "sum",
            Kernel::Negate => "negate",
            Kernel::XLogX => "xlogx",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Kernel::ConcatRows | Kernel::ConcatCols => None,
            Kernel::Matmul
            | Kernel::Add
            | Kernel::Sub
            | Kernel::Mul
            | Kernel::Div
            | Kernel::BiasAdd
            | Kernel::MulRowBroadcast
            | Kernel::Dot => Some(2),
            _ => Some(1),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses `name` or `name:arg[:arg]`, e.g. `softmax:0`, `slice-cols:1:3`,
/// `scalar-mul:0.5`.
impl FromStr for Kernel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let name = parts.next().unwrap_or_default();
        let args: Vec<&str> = parts.collect();
        let unknown = || Error::UnknownKernel(s.to_string());
        let usize_arg = |i: usize| -> Result<usize> {
            args.get(i)
                .and_then(|a| a.parse().ok())
                .ok_or_else(unknown)
        };
        let f64_arg = || -> Result<f64> {
            args.first()
                .and_then(|a| a.parse().ok())
                .ok_or_else(unknown)
        };
        let axis_arg = || -> Result<Axis> {
            match args.first().copied().unwrap_or("0") {
                "0" => Ok(Axis::Rows),
                "1" => Ok(Axis::Cols),
                _ => Err(unknown()),
            }
        };
        let kernel = match name {
            "matmul" => Kernel::Matmul,
            "transpose" => Kernel::Transpose,
            "concat-rows" => Kernel::ConcatRows,
            "concat-cols" => Kernel::ConcatCols,
            "slice-cols" => Kernel::SliceCols {
                start: usize_arg(0)?,
                end: usize_arg(1)?,
            },
            "slice-rows" => Kernel::SliceRows {
                start: usize_arg(0)?,
                end: usize_arg(1)?,
            },
            "row-mean" => Kernel::RowMean,
            "col-mean" => Kernel::ColMean,
            "col-sum" => Kernel::ColSum,
            "softmax" | "softmax-over-axis" => Kernel::Softmax(axis_arg()?),
            "log-softmax" => Kernel::LogSoftmax(axis_arg()?),
            "log" => Kernel::Log,
            "exp" => Kernel::Exp,
            "softplus" => Kernel::Softplus,
            "tanh" => Kernel::Tanh,
            "add" => Kernel::Add,
            "sub" => Kernel::Sub,
            "mul" | "mul-elementwise" => Kernel::Mul,
            "div" | "div-elementwise" => Kernel::Div,
            "scalar-mul" => Kernel::ScalarMul(f64_arg()?),
            "scalar-add" => Kernel::ScalarAdd(f64_arg()?),
            "bias-add" | "broadcast-bias-add" => Kernel::BiasAdd,
            "mul-row-broadcast" => Kernel::MulRowBroadcast,
            "dot" => Kernel::Dot,
            "l2-norm" => Kernel::L2Norm,
            "hinge" => Kernel::Hinge,
            "square" => Kernel::Square,
            "sum" => Kernel::Sum,
            "negate" => Kernel::Negate,
            "xlogx" => Kernel::XLogX,
            _ => return Err(unknown()),
        };
        Ok(kernel)
    }
}

fn shape_err(k: &Kernel, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        kernel: k.name().to_string(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn same_shape(k: &Kernel, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(shape_err(k, a, b))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new([m, n], out).expect("matmul extents")
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    Tensor::from_fn(a.cols(), a.rows(), |r, c| a.get(c, r))
}

fn softmax_slices(x: &Tensor, axis: Axis, log: bool) -> Tensor {
    let mut out = x.clone();
    let (rows, cols) = (x.rows(), x.cols());
    let (outer, inner) = match axis {
        Axis::Rows => (cols, rows),
        Axis::Cols => (rows, cols),
    };
    let idx = |o: usize, i: usize| match axis {
        Axis::Rows => i * cols + o,
        Axis::Cols => o * cols + i,
    };
    let data = out.data_mut();
    for o in 0..outer {
        let mut top = 0;
        for i in 1..inner {
            if data[idx(o, i)] > data[idx(o, top)] {
                top = i;
            }
        }
        let max = data[idx(o, top)];
        // Mass outside the maximum; ln_1p keeps saturated slices accurate.
        let rest: f64 = (0..inner)
            .filter(|&i| i != top)
            .map(|i| (data[idx(o, i)] - max).exp())
            .sum();
        let log_z = rest.ln_1p();
        for i in 0..inner {
            let shifted = data[idx(o, i)] - max;
            data[idx(o, i)] = if log {
                shifted - log_z
            } else {
                (shifted - log_z).exp()
            };
        }
    }
    out
}

/// Evaluates `kernel` on `inputs`.
pub fn forward(kernel: &Kernel, inputs: &[&Tensor]) -> Result<Tensor> {
    if let Some(n) = kernel.arity() {
        if inputs.len() != n {
            return Err(Error::Arity {
                kernel: kernel.name().into(),
                expected: n.to_string(),
                got: inputs.len(),
            });
        }
    } else if inputs.is_empty() {
        return Err(Error::Arity {
            kernel: kernel.name().into(),
            expected: "at least 1".into(),
            got: 0,
        });
    }
    let a = inputs[0];
    let out = match kernel {
        Kernel::Matmul => {
            let b = inputs[1];
            if a.cols() != b.rows() {
                return Err(shape_err(kernel, a, b));
            }
            matmul(a, b)
        }
        Kernel::Transpose => transpose(a),
        Kernel::ConcatRows => {
            let cols = a.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for t in inputs {
                if t.cols() != cols {
                    return Err(shape_err(kernel, a, t));
                }
                data.extend_from_slice(t.data());
                rows += t.rows();
            }
            Tensor::new([rows, cols], data)?
        }
        Kernel::ConcatCols => {
            let rows = a.rows();
            for t in inputs {
                if t.rows() != rows {
                    return Err(shape_err(kernel, a, t));
                }
            }
            let cols: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                for t in inputs {
                    data.extend_from_slice(&t.data()[r * t.cols()..(r + 1) * t.cols()]);
                }
            }
            Tensor::new([rows, cols], data)?
        }
        Kernel::SliceCols { start, end } => {
            if start >= end || *end > a.cols() {
                return Err(Error::InvalidInput(format!(
                    "slice-cols: range {start}..{end} invalid for shape {:?}",
                    a.shape()
                )));
            }
            Tensor::from_fn(a.rows(), end - start, |r, c| a.get(r, start + c))
        }
        Kernel::SliceRows { start, end } => {
            if start >= end || *end > a.rows() {
                return Err(Error::InvalidInput(format!(
                    "slice-rows: range {start}..{end} invalid for shape {:?}",
                    a.shape()
                )));
            }
            Tensor::new(
                [end - start, a.cols()],
                a.data()[start * a.cols()..end * a.cols()].to_vec(),
            )?
        }
        Kernel::GatherCols(idx) => {
            if idx.is_empty() {
                return Err(Error::invalid("gather-cols: empty index list"));
            }
            if let Some(bad) = idx.iter().find(|&&i| i >= a.cols()) {
                return Err(Error::InvalidInput(format!(
                    "gather-cols: index {bad} out of range for shape {:?}",
                    a.shape()
                )));
            }
            Tensor::from_fn(a.rows(), idx.len(), |r, c| a.get(r, idx[c]))
        }
        Kernel::RowMean => {
            let n = a.cols() as f64;
            Tensor::from_fn(a.rows(), 1, |r, _| {
                a.data()[r * a.cols()..(r + 1) * a.cols()].iter().sum::<f64>() / n
            })
        }
        Kernel::ColMean => {
            let n = a.rows() as f64;
            Tensor::from_fn(1, a.cols(), |_, c| {
                (0..a.rows()).map(|r| a.get(r, c)).sum::<f64>() / n
            })
        }
        Kernel::ColSum => {
            Tensor::from_fn(1, a.cols(), |_, c| (0..a.rows()).map(|r| a.get(r, c)).sum())
        }
        Kernel::Softmax(axis) => softmax_slices(a, *axis, false),
        Kernel::LogSoftmax(axis) => softmax_slices(a, *axis, true),
        Kernel::Log => a.map(|x| x.max(DELTA).ln()),
        Kernel::Exp => a.map(f64::exp),
        Kernel::Softplus => a.map(softplus),
        Kernel::Tanh => a.map(f64::tanh),
        Kernel::Add | Kernel::Sub | Kernel::Mul | Kernel::Div => {
            let b = inputs[1];
            same_shape(kernel, a, b)?;
            match kernel {
                Kernel::Add => a.zip_map(b, |x, y| x + y),
                Kernel::Sub => a.zip_map(b, |x, y| x - y),
                Kernel::Mul => a.zip_map(b, |x, y| x * y),
                _ => a.zip_map(b, |x, y| x / (y + DELTA)),
            }
        }
        Kernel::ScalarMul(s) => a.map(|x| x * s),
        Kernel::ScalarAdd(s) => a.map(|x| x + s),
        Kernel::BiasAdd => {
            let b = inputs[1];
            if b.rows() != a.rows() || b.cols() != 1 {
                return Err(shape_err(kernel, a, b));
            }
            Tensor::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) + b.get(r, 0))
        }
        Kernel::MulRowBroadcast => {
            let b = inputs[1];
            if b.rows() != 1 || b.cols() != a.cols() {
                return Err(shape_err(kernel, a, b));
            }
            Tensor::from_fn(a.rows(), a.cols(), |r, c| a.get(r, c) * b.get(0, c))
        }
        Kernel::Dot => {
            let b = inputs[1];
            same_shape(kernel, a, b)?;
            Tensor::scalar(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
        }
        Kernel::L2Norm => Tensor::scalar(a.norm()),
        Kernel::Hinge => a.map(|x| x.max(0.0)),
        Kernel::Square => a.map(|x| x * x),
        Kernel::Sum => Tensor::scalar(a.sum()),
        Kernel::Negate => a.map(|x| -x),
        Kernel::XLogX => a.map(|x| if x > 0.0 { x * x.ln() } else { 0.0 }),
    };
    Ok(out)
}

/// Gradients with respect to each input, given the upstream gradient `g`
/// of the output `out`.
pub(crate) fn vjp(kernel: &Kernel, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    let a = inputs[0];
    match kernel {
        Kernel::Matmul => {
            let b = inputs[1];
            vec![matmul(g, &transpose(b)), matmul(&transpose(a), g)]
        }
        Kernel::Transpose => vec![transpose(g)],
        Kernel::ConcatRows => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let n = t.rows() * t.cols();
                    let part = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    Tensor::new(t.shape(), part).expect("concat-rows grad")
                })
                .collect()
        }
        Kernel::ConcatCols => {
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let part = Tensor::from_fn(t.rows(), t.cols(), |r, c| g.get(r, offset + c));
                    offset += t.cols();
                    part
                })
                .collect()
        }
        Kernel::SliceCols { start, end } => {
            let mut ga = Tensor::zeros(a.rows(), a.cols());
            for r in 0..a.rows() {
                for c in *start..*end {
                    ga.set(r, c, g.get(r, c - start));
                }
            }
            vec![ga]
        }
        Kernel::SliceRows { start, .. } => {
            let mut ga = Tensor::zeros(a.rows(), a.cols());
            let w = a.cols();
            ga.data_mut()[start * w..start * w + g.len()].copy_from_slice(g.data());
            vec![ga]
        }
        Kernel::GatherCols(idx) => {
            let mut ga = Tensor::zeros(a.rows(), a.cols());
            for (c, &src) in idx.iter().enumerate() {
                for r in 0..a.rows() {
                    let v = ga.get(r, src) + g.get(r, c);
                    ga.set(r, src, v);
                }
            }
            vec![ga]
        }
        Kernel::RowMean => {
            let n = a.cols() as f64;
            vec![Tensor::from_fn(a.rows(), a.cols(), |r, _| g.get(r, 0) / n)]
        }
        Kernel::ColMean => {
            let n = a.rows() as f64;
            vec![Tensor::from_fn(a.rows(), a.cols(), |_, c| g.get(0, c) / n)]
        }
        Kernel::ColSum => vec![Tensor::from_fn(a.rows(), a.cols(), |_, c| g.get(0, c))],
        Kernel::Softmax(axis) => {
            let dot = slice_dot(out, g, *axis);
            vec![Tensor::from_fn(a.rows(), a.cols(), |r, c| {
                let k = match axis {
                    Axis::Rows => c,
                    Axis::Cols => r,
                };
                out.get(r, c) * (g.get(r, c) - dot[k])
            })]
        }
        Kernel::LogSoftmax(axis) => {
            let gsum = slice_dot(&Tensor::ones(a.rows(), a.cols()), g, *axis);
            vec![Tensor::from_fn(a.rows(), a.cols(), |r, c| {
                let k = match axis {
                    Axis::Rows => c,
                    Axis::Cols => r,
                };
                g.get(r, c) - out.get(r, c).exp() * gsum[k]
            })]
        }
        Kernel::Log => vec![a.zip_map(g, |x, gv| if x > DELTA { gv / x } else { 0.0 })],
        Kernel::Exp => vec![out.zip_map(g, |y, gv| y * gv)],
        Kernel::Softplus => vec![a.zip_map(g, |x, gv| sigmoid(x) * gv)],
        Kernel::Tanh => vec![out.zip_map(g, |y, gv| (1.0 - y * y) * gv)],
        Kernel::Add => vec![g.clone(), g.clone()],
        Kernel::Sub => vec![g.clone(), g.map(|x| -x)],
        Kernel::Mul => {
            let b = inputs[1];
            vec![g.zip_map(b, |gv, y| gv * y), g.zip_map(a, |gv, x| gv * x)]
        }
        Kernel::Div => {
            let b = inputs[1];
            let ga = g.zip_map(b, |gv, y| gv / (y + DELTA));
            let mut gb = g.zip_map(a, |gv, x| gv * x);
            for (v, &y) in gb.data_mut().iter_mut().zip(b.data()) {
                *v = -*v / ((y + DELTA) * (y + DELTA));
            }
            vec![ga, gb]
        }
        Kernel::ScalarMul(s) => vec![g.map(|x| x * s)],
        Kernel::ScalarAdd(_) => vec![g.clone()],
        Kernel::BiasAdd => {
            let gb = Tensor::from_fn(a.rows(), 1, |r, _| {
                g.data()[r * a.cols()..(r + 1) * a.cols()].iter().sum()
            });
            vec![g.clone(), gb]
        }
        Kernel::MulRowBroadcast => {
            let b = inputs[1];
            let ga = Tensor::from_fn(a.rows(), a.cols(), |r, c| g.get(r, c) * b.get(0, c));
            let gb = Tensor::from_fn(1, a.cols(), |_, c| {
                (0..a.rows()).map(|r| g.get(r, c) * a.get(r, c)).sum()
            });
            vec![ga, gb]
        }
        Kernel::Dot => {
            let s = g.item();
            vec![inputs[1].map(|y| y * s), a.map(|x| x * s)]
        }
        Kernel::L2Norm => {
            let s = g.item() / (out.item() + DELTA);
            vec![a.map(|x| x * s)]
        }
        // Subgradient at exactly zero is zero.
        Kernel::Hinge => vec![a.zip_map(g, |x, gv| if x > 0.0 { gv } else { 0.0 })],
        Kernel::Square => vec![a.zip_map(g, |x, gv| 2.0 * x * gv)],
        Kernel::Sum => {
            let s = g.item();
            vec![Tensor::full(a.rows(), a.cols(), s)]
        }
        Kernel::Negate => vec![g.map(|x| -x)],
        Kernel::XLogX => vec![a.zip_map(g, |x, gv| if x > 0.0 { (x.ln() + 1.0) * gv } else { 0.0 })],
    }
}

/// Per-slice inner products `Σ a ⊙ b` along `axis`.
fn slice_dot(a: &Tensor, b: &Tensor, axis: Axis) -> Vec<f64> {
    match axis {
        Axis::Rows => (0..a.cols())
            .map(|c| (0..a.rows()).map(|r| a.get(r, c) * b.get(r, c)).sum())
            .collect(),
        Axis::Cols => (0..a.rows())
            .map(|r| (0..a.cols()).map(|c| a.get(r, c) * b.get(r, c)).sum())
            .collect(),
    }
}
