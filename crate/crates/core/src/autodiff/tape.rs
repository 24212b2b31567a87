use std::sync::Arc;

use crate::error::{LensError, Result};
use crate::numerics::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded primitive. Inputs always precede the node that uses them.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// Matrix plus a row vector broadcast over rows.
    AddRow(Var, Var),
    /// Matrix times a row vector broadcast over rows.
    MulRow(Var, Var),
    /// Tensor times a one-element tensor.
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Sqrt(Var),
    Recip(Var),
    Square(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Sum(Var),
    RowSum(Var),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<usize>>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulScalar(..) => "mul_scalar",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Sqrt(_) => "sqrt",
            Op::Recip(_) => "recip",
            Op::Square(_) => "square",
            Op::SoftmaxRows(_) => "softmax",
            Op::LayerNormRows(..) => "layer_norm",
            Op::Sum(_) => "sum",
            Op::RowSum(_) => "row_sum",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Gather(..) => "gather",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(_) => "concat_rows",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::Recip(a)
            | Op::Square(a)
            | Op::SoftmaxRows(a)
            | Op::LayerNormRows(a, _)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _) => vec![*a],
            Op::ConcatCols(v) | Op::ConcatRows(v) => v.clone(),
        }
    }
}

/// Elementwise primitives addressable by name through [`Tape::apply`].
const NAMED_UNARY: &[&str] = &[
    "tanh",
    "sigmoid",
    "exp",
    "sqrt",
    "recip",
    "square",
    "softmax",
    "layer_norm",
    "sum",
    "row_sum",
    "transpose",
];
const NAMED_BINARY: &[&str] = &[
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_row",
    "mul_scalar",
];

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) value: Arc<Tensor>,
    pub(crate) needs_grad: bool,
}

/// Define-by-run record of primitive applications.
///
/// Every method evaluates its primitive immediately and appends a node, so
/// the tape is always in topological order. Leaves created with
/// [`Tape::var`] receive gradients; leaves created with [`Tape::constant`]
/// do not, and neither does anything computed only from constants.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

pub const LN_EPS_DEFAULT: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shared_value(&self, v: Var) -> Arc<Tensor> {
        Arc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Multiply-adds of every recorded matmul, m·k·n each.
    pub fn matmul_macs(&self) -> u64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(a), self.shape(b));
                    Some((sa[0] * sa[1] * sb[1]) as u64)
                }
                _ => None,
            })
            .sum()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.push_shared(op, Arc::new(value))
    }

    fn push_shared(&mut self, op: Op, value: Arc<Tensor>) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn var(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(Arc::new(value), false)
    }

    /// Leaf sharing storage with an existing tensor (no copy).
    pub fn leaf(&mut self, value: Arc<Tensor>, differentiable: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: differentiable,
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op) -> Result<Var> {
        let value = evaluate(&op, |v| &self.nodes[v.0].value)?;
        if !value.is_finite() {
            return Err(LensError::Numerical(format!(
                "{} produced a non-finite value",
                op.name()
            )));
        }
        Ok(self.push(op, value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul(a, b))
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add(a, b))
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub(a, b))
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul(a, b))
    }
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::AddRow(a, row))
    }
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.record(Op::MulRow(a, row))
    }
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        self.record(Op::MulScalar(a, s))
    }
    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        self.record(Op::Scale(a, alpha))
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::AddScalar(a, c))
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh(a))
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sigmoid(a))
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Exp(a))
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sqrt(a))
    }
    pub fn recip(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Recip(a))
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Square(a))
    }
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Op::SoftmaxRows(a))
    }
    /// Per-row standardization without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNormRows(a, eps))
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum(a))
    }
    /// r×c → r×1.
    pub fn row_sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::RowSum(a))
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// `out[i] = a.flat[indices[i]]`, shaped as `shape`.
    pub fn gather(&mut self, a: Var, indices: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if shape.iter().product::<usize>() != indices.len() {
            return Err(LensError::shape("gather", &[indices.len()], shape));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(LensError::invalid(format!(
                "gather index {bad} out of range for {} values",
                src.len()
            )));
        }
        let data = indices.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(Op::Gather(a, indices), value))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        if src.shape().len() != 2 || start + len > src.cols() || len == 0 {
            return Err(LensError::invalid(format!(
                "slice_cols {start}..{} on shape {:?}",
                start + len,
                src.shape()
            )));
        }
        let value = Tensor::from_fn(src.rows(), len, |i, j| src.get(i, start + j));
        Ok(self.push(Op::SliceCols(a, start), value))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        if src.shape().len() != 2 || start + len > src.rows() || len == 0 {
            return Err(LensError::invalid(format!(
                "slice_rows {start}..{} on shape {:?}",
                start + len,
                src.shape()
            )));
        }
        let c = src.cols();
        let value = Tensor::matrix(len, c, src.data()[start * c..(start + len) * c].to_vec())?;
        Ok(self.push(Op::SliceRows(a, start), value))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.record(Op::ConcatRows(parts.to_vec()))
    }

    /// Applies a registered primitive by name. Unknown names are rejected.
    pub fn apply(&mut self, name: &str, inputs: &[Var]) -> Result<Var> {
        let arity_err = |n: usize| {
            LensError::invalid(format!(
                "primitive `{name}` takes {n} inputs, got {}",
                inputs.len()
            ))
        };
        if NAMED_UNARY.contains(&name) {
            let &[a] = inputs else {
                return Err(arity_err(1));
            };
            let op = match name {
                "tanh" => Op::Tanh(a),
                "sigmoid" => Op::Sigmoid(a),
                "exp" => Op::Exp(a),
                "sqrt" => Op::Sqrt(a),
                "recip" => Op::Recip(a),
                "square" => Op::Square(a),
                "softmax" => Op::SoftmaxRows(a),
                "layer_norm" => Op::LayerNormRows(a, LN_EPS_DEFAULT),
                "sum" => Op::Sum(a),
                "row_sum" => Op::RowSum(a),
                _ => Op::Transpose(a),
            };
            return self.record(op);
        }
        if NAMED_BINARY.contains(&name) {
            let &[a, b] = inputs else {
                return Err(arity_err(2));
            };
            let op = match name {
                "matmul" => Op::MatMul(a, b),
                "add" => Op::Add(a, b),
                "sub" => Op::Sub(a, b),
                "mul" => Op::Mul(a, b),
                "add_row" => Op::AddRow(a, b),
                "mul_row" => Op::MulRow(a, b),
                _ => Op::MulScalar(a, b),
            };
            return self.record(op);
        }
        Err(LensError::UnknownPrimitive(name.to_string()))
    }

    /// Re-executes every recorded primitive with some leaves replaced.
    ///
    /// Leaves not listed keep their recorded values. Replaying with the
    /// original leaf values reproduces every node bit-for-bit.
    pub fn replay(&self, leaves: &[(Var, Tensor)]) -> Result<Tape> {
        let mut out = Tape {
            nodes: Vec::with_capacity(self.nodes.len()),
        };
        for (i, node) in self.nodes.iter().enumerate() {
            let value = match &node.op {
                Op::Leaf => match leaves.iter().find(|(v, _)| v.0 == i) {
                    Some((_, t)) => {
                        if t.shape() != node.value.shape() {
                            return Err(LensError::shape("replay", node.value.shape(), t.shape()));
                        }
                        Arc::new(t.clone())
                    }
                    None => Arc::clone(&node.value),
                },
                Op::Reshape(a) => Arc::new(out.nodes[a.0].value.reshape(node.value.shape())?),
                op => Arc::new(evaluate_with_shape(op, node.value.shape(), |v| {
                    &out.nodes[v.0].value
                })?),
            };
            out.nodes.push(Node {
                op: node.op.clone(),
                value,
                needs_grad: node.needs_grad,
            });
        }
        Ok(out)
    }
}

fn expect_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(LensError::invalid(format!(
            "{op} expects a 2-D tensor, got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn row_vector_len(t: &Tensor) -> Option<usize> {
    match t.shape() {
        [n] => Some(*n),
        [1, n] => Some(*n),
        _ => None,
    }
}

fn evaluate_with_shape<'a>(
    op: &Op,
    shape: &[usize],
    get: impl Fn(Var) -> &'a Tensor,
) -> Result<Tensor> {
    match op {
        Op::Gather(a, idx) => {
            let src = get(*a);
            Tensor::new(shape.to_vec(), idx.iter().map(|&i| src.data()[i]).collect())
        }
        Op::SliceCols(a, start) => {
            let src = get(*a);
            Ok(Tensor::from_fn(shape[0], shape[1], |i, j| {
                src.get(i, start + j)
            }))
        }
        Op::SliceRows(a, start) => {
            let src = get(*a);
            let c = src.cols();
            Tensor::matrix(
                shape[0],
                c,
                src.data()[start * c..(start + shape[0]) * c].to_vec(),
            )
        }
        other => evaluate(other, get),
    }
}

/// Forward rule of every non-structural primitive.
pub(crate) fn evaluate<'a>(op: &Op, get: impl Fn(Var) -> &'a Tensor) -> Result<Tensor> {
    Ok(match op {
        Op::Leaf | Op::Reshape(_) | Op::Gather(..) | Op::SliceCols(..) | Op::SliceRows(..) => {
            unreachable!("structural op evaluated without shape")
        }
        Op::MatMul(a, b) => get(*a).matmul(get(*b))?,
        Op::Add(a, b) => get(*a).add(get(*b))?,
        Op::Sub(a, b) => get(*a).sub(get(*b))?,
        Op::Mul(a, b) => get(*a).hadamard(get(*b))?,
        Op::AddRow(a, b) | Op::MulRow(a, b) => {
            let (x, row) = (get(*a), get(*b));
            let (r, c) = expect_2d(x, op.name())?;
            if row_vector_len(row) != Some(c) {
                return Err(LensError::shape(op.name(), x.shape(), row.shape()));
            }
            let add = matches!(op, Op::AddRow(..));
            let mut data = x.data().to_vec();
            for i in 0..r {
                for (j, v) in data[i * c..(i + 1) * c].iter_mut().enumerate() {
                    if add {
                        *v += row.data()[j];
                    } else {
                        *v *= row.data()[j];
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::MulScalar(a, s) => {
            let s = get(*s);
            if s.len() != 1 {
                return Err(LensError::shape("mul_scalar", get(*a).shape(), s.shape()));
            }
            get(*a).scale(s.data()[0])
        }
        Op::Scale(a, alpha) => get(*a).scale(*alpha),
        Op::AddScalar(a, c) => get(*a).add_scalar(*c),
        Op::Tanh(a) => get(*a).map(f64::tanh),
        Op::Sigmoid(a) => get(*a).map(sigmoid),
        Op::Exp(a) => get(*a).map(f64::exp),
        Op::Sqrt(a) => get(*a).map(f64::sqrt),
        Op::Recip(a) => get(*a).map(|v| 1.0 / v),
        Op::Square(a) => get(*a).map(|v| v * v),
        Op::SoftmaxRows(a) => {
            let x = get(*a);
            let (r, c) = expect_2d(x, "softmax")?;
            let mut data = x.data().to_vec();
            for i in 0..r {
                let row = &mut data[i * c..(i + 1) * c];
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::LayerNormRows(a, eps) => {
            let x = get(*a);
            let (r, c) = expect_2d(x, "layer_norm")?;
            let mut data = x.data().to_vec();
            for i in 0..r {
                let row = &mut data[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for v in row.iter_mut() {
                    *v = (*v - mean) * inv;
                }
            }
            Tensor::new(x.shape().to_vec(), data)?
        }
        Op::Sum(a) => Tensor::scalar(get(*a).sum()),
        Op::RowSum(a) => {
            let x = get(*a);
            let (r, c) = expect_2d(x, "row_sum")?;
            Tensor::matrix(
                r,
                1,
                (0..r)
                    .map(|i| x.data()[i * c..(i + 1) * c].iter().sum())
                    .collect(),
            )?
        }
        Op::Transpose(a) => get(*a).transpose()?,
        Op::ConcatCols(parts) => {
            let first = get(*parts
                .first()
                .ok_or_else(|| LensError::invalid("empty concat"))?);
            let (r, _) = expect_2d(first, "concat_cols")?;
            let mut total = 0;
            for p in parts {
                let t = get(*p);
                let (pr, pc) = expect_2d(t, "concat_cols")?;
                if pr != r {
                    return Err(LensError::shape("concat_cols", first.shape(), t.shape()));
                }
                total += pc;
            }
            let mut data = Vec::with_capacity(r * total);
            for i in 0..r {
                for p in parts {
                    data.extend_from_slice(get(*p).row(i));
                }
            }
            Tensor::matrix(r, total, data)?
        }
        Op::ConcatRows(parts) => {
            let first = get(*parts
                .first()
                .ok_or_else(|| LensError::invalid("empty concat"))?);
            let (_, c) = expect_2d(first, "concat_rows")?;
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let t = get(*p);
                let (pr, pc) = expect_2d(t, "concat_rows")?;
                if pc != c {
                    return Err(LensError::shape("concat_rows", first.shape(), t.shape()));
                }
                rows += pr;
                data.extend_from_slice(t.data());
            }
            Tensor::matrix(rows, c, data)?
        }
    })
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
