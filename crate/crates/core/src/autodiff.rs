//! Tape-style reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass as a node; [`Var`]
//! is a cheap index into it. Nodes are appended in evaluation order, so the
//! tape is already topologically sorted and [`Graph::backward`] is a single
//! reverse sweep. Build a fresh graph per forward pass and drop it once the
//! gradients have been read out.
//!
//! ```
//! use tkto_core::autodiff::Graph;
//! use tkto_core::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};

/// Value used for masked attention scores. Finite so every tensor stays finite.
const MASKED: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy)]
enum Broadcast {
    None,
    /// Left operand is a single value.
    Left,
    /// Right operand is a single value.
    Right,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Detached,
    Unary(Unary, Var),
    Binary(Binary, Var, Var, Broadcast),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    LogSoftmax {
        input: Var,
        axis: usize,
    },
    Clamp {
        input: Var,
        lo: f64,
        hi: f64,
    },
    Sum(Var),
    Rows {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Concat(Vec<Var>),
    AddRowBias(Var, Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalMask(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient; `None` until a backward pass reaches the node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Accumulated gradient, or zeros of the value's shape.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Var {
        let value = match kind {
            Unary::Neg => self.value(a).map(|x| -x),
            Unary::Exp => self.value(a).map(f64::exp),
            Unary::Log => self.value(a).map(f64::ln),
            Unary::Sigmoid => self.value(a).map(sigmoid),
        };
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Unary(kind, a), rg)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }

    /// Elementwise binary op. Shapes must match, or one side must hold a
    /// single value which is broadcast.
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (bcast, shape) = if sa == sb {
            (Broadcast::None, sa.to_vec())
        } else if self.value(b).len() == 1 {
            (Broadcast::Right, sa.to_vec())
        } else if self.value(a).len() == 1 {
            (Broadcast::Left, sb.to_vec())
        } else {
            return Err(Error::ShapeMismatch {
                op: binary_name(kind),
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
        };
        let data: Vec<f64> = match bcast {
            Broadcast::None => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Broadcast::Right => da.iter().map(|&x| f(x, db[0])).collect(),
            Broadcast::Left => db.iter().map(|&y| f(da[0], y)).collect(),
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary(kind, a, b, bcast), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.cols() != vb.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: va.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let (m, k, n) = (va.rows(), va.cols(), vb.cols());
        let data = matmul_raw(va.data(), vb.data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::InvalidAxis {
                op: "transpose",
                axis: 1,
                rank: va.shape().len(),
            });
        }
        let value = transposed(va);
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let va = self.value(a);
        let rank = va.shape().len();
        if axis >= rank {
            return Err(Error::InvalidAxis {
                op: "log_softmax",
                axis,
                rank,
            });
        }
        let (outer, n, inner) = axis_split(va.shape(), axis);
        let src = va.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..n).map(|j| (src[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..n {
                    out[idx(j)] = src[idx(j)] - lse;
                }
            }
        }
        let value = Tensor::new(va.shape().to_vec(), out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::LogSoftmax { input: a, axis }, rg))
    }

    /// `min(max(x, lo), hi)`. The gradient is 1 strictly inside `(lo, hi)`
    /// and 0 elsewhere, including at the bounds themselves.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(Error::InvalidClamp { lo, hi });
        }
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Clamp { input: a, lo, hi }, rg))
    }

    /// Same value, cut off from the graph: nothing upstream receives gradient
    /// through the returned node.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Detached, false)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Selects rows of a 2-D table (embedding lookup). Output is `ids.len() × cols`.
    pub fn rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = self.value(table);
        if vt.shape().len() != 2 {
            return Err(Error::InvalidAxis {
                op: "rows",
                axis: 0,
                rank: vt.shape().len(),
            });
        }
        let (r, c) = (vt.rows(), vt.cols());
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::IndexOutOfRange {
                    op: "rows",
                    index: id,
                    bound: r,
                });
            }
            data.extend_from_slice(vt.row(id));
        }
        let value = Tensor::matrix(ids.len(), c, data)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            value,
            Op::Rows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Picks elements by flat (row-major) index into a 1-D result.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let bound = va.len();
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= bound {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    bound,
                });
            }
            data.push(va.data()[i]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::vector(data),
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `(row, col)` entries of a matrix into a 1-D result.
    pub fn pick(&mut self, a: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 {
            return Err(Error::InvalidAxis {
                op: "pick",
                axis: 1,
                rank: va.shape().len(),
            });
        }
        let (r, c) = (va.rows(), va.cols());
        let mut flat = Vec::with_capacity(coords.len());
        for &(i, j) in coords {
            if i >= r || j >= c {
                return Err(Error::IndexOutOfRange {
                    op: "pick",
                    index: i.max(j),
                    bound: if i >= r { r } else { c },
                });
            }
            flat.push(i * c + j);
        }
        self.gather(a, &flat)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 || start + width > va.cols() {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + width,
                bound: va.shape().get(1).copied().unwrap_or(0),
            });
        }
        let rows = va.rows();
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            data.extend_from_slice(&va.row(i)[start..start + width]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(
            Tensor::matrix(rows, width, data)?,
            Op::SliceCols { input: a, start },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat_cols input"))?;
        let rows = self.value(*first).rows();
        let mut width = 0;
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 2 || v.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(*first).shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            width += v.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Tensor::matrix(rows, width, data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Flattens and concatenates into a 1-D result.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let data: Vec<f64> = parts
            .iter()
            .flat_map(|&p| self.value(p).data().iter().copied())
            .collect();
        let rg = self.any_grad(parts);
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), rg)
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vx.shape().len() != 2 || vb.shape() != [vx.cols()] {
            return Err(Error::ShapeMismatch {
                op: "add_row_bias",
                left: vx.shape().to_vec(),
                right: vb.shape().to_vec(),
            });
        }
        let c = vx.cols();
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb.data()[i % c])
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let vx = self.value(x);
        let (vg, vb) = (self.value(gamma), self.value(beta));
        if vx.shape().len() != 2 || vg.shape() != [vx.cols()] || vb.shape() != [vx.cols()] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                left: vx.shape().to_vec(),
                right: vg.shape().to_vec(),
            });
        }
        let (r, c) = (vx.rows(), vx.cols());
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = vx.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                let n = (row[j] - mean) * inv;
                normalized[i * c + j] = n;
                out[i * c + j] = n * vg.data()[j] + vb.data()[j];
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Replaces entries above the diagonal of a square score matrix with a
    /// large negative constant so that softmax assigns them zero weight.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.shape().len() != 2 || va.rows() != va.cols() {
            return Err(Error::ShapeMismatch {
                op: "causal_mask",
                left: va.shape().to_vec(),
                right: va.shape().to_vec(),
            });
        }
        let n = va.rows();
        let mut value = va.clone();
        for i in 0..n {
            for j in i + 1..n {
                value.data_mut()[i * n + j] = MASKED;
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::CausalMask(a), rg))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are added to whatever
    /// each node already holds; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0];
        if !root.value.is_scalar() {
            return Err(Error::NotScalar(root.value.shape().to_vec()));
        }
        if !root.requires_grad {
            return Ok(());
        }
        let mut pending: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        pending[loss.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = pending[idx].take() else {
                continue;
            };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut pending);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.add_assign(&g),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, pending: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contribution: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut pending[v.0] {
                Some(acc) => acc.add_assign(&contribution),
                slot @ None => *slot = Some(contribution),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Detached => {}
            Op::Unary(kind, a) => {
                let x = self.value(*a).data();
                let y = node.value.data();
                let data: Vec<f64> = match kind {
                    Unary::Neg => gd.iter().map(|v| -v).collect(),
                    Unary::Exp => gd.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => gd.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Sigmoid => gd.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
                };
                send(*a, same_shape(g, data));
            }
            Op::Binary(kind, a, b, bcast) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (ga, gb): (Vec<f64>, Vec<f64>) = match kind {
                    Binary::Add => (gd.to_vec(), gd.to_vec()),
                    Binary::Sub => (gd.to_vec(), gd.iter().map(|v| -v).collect()),
                    Binary::Mul => {
                        let at = |d: &[f64], i: usize| if d.len() == 1 { d[0] } else { d[i] };
                        (
                            (0..gd.len()).map(|i| gd[i] * at(vb.data(), i)).collect(),
                            (0..gd.len()).map(|i| gd[i] * at(va.data(), i)).collect(),
                        )
                    }
                };
                let reduce = |d: Vec<f64>, like: &Tensor| {
                    if d.len() == like.len() {
                        Tensor::new(like.shape().to_vec(), d).expect("shape checked")
                    } else {
                        Tensor::new(like.shape().to_vec(), vec![d.iter().sum()])
                            .expect("single value")
                    }
                };
                match bcast {
                    Broadcast::None => {
                        send(*a, same_shape(va, ga));
                        send(*b, same_shape(vb, gb));
                    }
                    Broadcast::Left => {
                        send(*a, reduce(ga, va));
                        send(*b, same_shape(vb, gb));
                    }
                    Broadcast::Right => {
                        send(*a, same_shape(va, ga));
                        send(*b, reduce(gb, vb));
                    }
                }
            }
            Op::Scale(a, factor) => send(*a, g.map(|v| v * factor)),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if self.nodes[a.0].requires_grad {
                    let ga = matmul_nt(gd, vb.data(), m, n, k);
                    send(*a, same_shape(va, ga));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = matmul_tn(va.data(), gd, m, k, n);
                    send(*b, same_shape(vb, gb));
                }
            }
            Op::Transpose(a) => send(*a, transposed(g)),
            Op::LogSoftmax { input, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut out = vec![0.0; gd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let total: f64 = (0..n).map(|j| gd[idx(j)]).sum();
                        for j in 0..n {
                            out[idx(j)] = gd[idx(j)] - y[idx(j)].exp() * total;
                        }
                    }
                }
                send(*input, same_shape(g, out));
            }
            Op::Clamp { input, lo, hi } => {
                let x = self.value(*input).data();
                let data = gd
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                    .collect();
                send(*input, same_shape(g, data));
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                send(*a, Tensor::full(va.shape(), gd[0]));
            }
            Op::Rows { table, ids } => {
                let vt = self.value(*table);
                let c = vt.cols();
                let mut out = Tensor::zeros(vt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut out.data_mut()[id * c..(id + 1) * c];
                    for (d, s) in dst.iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
                send(*table, out);
            }
            Op::Gather { input, indices } => {
                let mut out = Tensor::zeros(self.value(*input).shape());
                for (k, &i) in indices.iter().enumerate() {
                    out.data_mut()[i] += gd[k];
                }
                send(*input, out);
            }
            Op::SliceCols { input, start } => {
                let vi = self.value(*input);
                let (rows, cols) = (vi.rows(), vi.cols());
                let width = node.value.cols();
                let mut out = vec![0.0; rows * cols];
                for i in 0..rows {
                    out[i * cols + start..i * cols + start + width]
                        .copy_from_slice(&gd[i * width..(i + 1) * width]);
                }
                send(*input, same_shape(vi, out));
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut out = Vec::with_capacity(rows * w);
                    for i in 0..rows {
                        out.extend_from_slice(&gd[i * total + offset..i * total + offset + w]);
                    }
                    send(p, same_shape(self.value(p), out));
                    offset += w;
                }
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let vp = self.value(p);
                    let n = vp.len();
                    send(p, same_shape(vp, gd[offset..offset + n].to_vec()));
                    offset += n;
                }
            }
            Op::AddRowBias(x, bias) => {
                let c = node.value.cols();
                let mut gb = vec![0.0; c];
                for (i, v) in gd.iter().enumerate() {
                    gb[i % c] += v;
                }
                send(*x, g.clone());
                send(*bias, Tensor::vector(gb));
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (r, c) = (node.value.rows(), node.value.cols());
                let gamma_v = self.value(*gamma).data();
                let mut d_gamma = vec![0.0; c];
                let mut d_beta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let mut sum_dn = 0.0;
                    let mut sum_dn_n = 0.0;
                    for j in 0..c {
                        let k = i * c + j;
                        d_gamma[j] += gd[k] * normalized[k];
                        d_beta[j] += gd[k];
                        let dn = gd[k] * gamma_v[j];
                        sum_dn += dn;
                        sum_dn_n += dn * normalized[k];
                    }
                    let scale = inv_std[i] / c as f64;
                    for j in 0..c {
                        let k = i * c + j;
                        let dn = gd[k] * gamma_v[j];
                        dx[k] = scale * (c as f64 * dn - sum_dn - normalized[k] * sum_dn_n);
                    }
                }
                send(*input, same_shape(g, dx));
                send(*gamma, Tensor::vector(d_gamma));
                send(*beta, Tensor::vector(d_beta));
            }
            Op::CausalMask(a) => {
                let n = node.value.rows();
                let mut out = g.clone();
                for i in 0..n {
                    for j in i + 1..n {
                        out.data_mut()[i * n + j] = 0.0;
                    }
                }
                send(*a, out);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn binary_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "mul",
    }
}

fn same_shape(like: &Tensor, data: Vec<f64>) -> Tensor {
    Tensor::new(like.shape().to_vec(), data).expect("gradient shape equals value shape")
}

fn transposed(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, data).expect("transpose preserves size")
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_graph(x: f64) -> (Graph, Var) {
        let mut g = Graph::new();
        let v = g.param(Tensor::scalar(x));
        (g, v)
    }

    #[test]
    fn sigmoid_and_exp_anchors() {
        let (mut g, x) = scalar_graph(0.0);
        let s = g.sigmoid(x);
        let e = g.exp(x);
        assert_eq!(g.value(s).item(), 0.5);
        assert_eq!(g.value(e).item(), 1.0);
        let one = g.constant(Tensor::scalar(1.0));
        let s1 = g.sigmoid(one);
        assert_relative_eq!(
            g.value(s1).item(),
            1.0 / (1.0 + (-1.0f64).exp()),
            epsilon = 1e-15
        );
        assert_relative_eq!(g.value(s1).item(), 0.731_058_578_630_004_9, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
        assert!(g.matmul(a, a).is_err());
    }

    #[test]
    fn scalar_broadcast_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.param(Tensor::scalar(2.0));
        let p = g.mul(a, s).unwrap();
        let l = g.sum(p);
        g.backward(l).unwrap();
        assert_eq!(g.grad(s).unwrap().item(), 6.0);
        assert_eq!(g.grad(a).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[3.0, 7.0]);

        let eye = g.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let ia = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(ia).data(), g.value(a).data());
    }

    #[test]
    fn log_softmax_anchors() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let lz = g.log_softmax(z, 0).unwrap();
        for &v in g.value(lz).data() {
            assert_relative_eq!(v, -std::f64::consts::LN_2, epsilon = 1e-15);
        }
        let o = g.constant(Tensor::vector(vec![1.0, 0.0]));
        let lo = g.log_softmax(o, 0).unwrap();
        let lse = (1.0f64.exp() + 1.0).ln();
        assert_relative_eq!(g.value(lo).data()[0], 1.0 - lse, epsilon = 1e-15);
        assert_relative_eq!(g.value(lo).data()[1], -lse, epsilon = 1e-15);
        assert_relative_eq!(
            g.value(lo).data()[0],
            -0.313_261_687_518_222_8,
            epsilon = 1e-12
        );
        assert!(g.log_softmax(o, 1).is_err());
    }

    #[test]
    fn log_softmax_columns() {
        let mut g = Graph::new();
        let m = g.constant(Tensor::matrix(2, 2, vec![0.0, 3.0, 0.0, 3.0]).unwrap());
        let l = g.log_softmax(m, 0).unwrap();
        for &v in g.value(l).data() {
            assert_relative_eq!(v, -std::f64::consts::LN_2, epsilon = 1e-15);
        }
    }

    #[test]
    fn clamp_values_and_bounds() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.22, -3.1, 5.0, 2.0]));
        let c = g.clamp(x, -2.0, 2.0).unwrap();
        assert_eq!(g.value(c).data(), &[0.22, -2.0, 2.0, 2.0]);
        let l = g.sum(c);
        g.backward(l).unwrap();
        // exact boundary carries zero gradient
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        let c2 = g.clamp(x, -1.0, 1.0).unwrap();
        assert_eq!(g.value(c2).data()[2], 1.0);
        assert!(matches!(
            g.clamp(x, 1.0, -1.0),
            Err(Error::InvalidClamp { .. })
        ));
    }

    #[test]
    fn detach_freezes_one_factor() {
        let (mut g, x) = scalar_graph(3.0);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 3.0);
        assert!(!g.requires_grad(d));

        let (mut g, x) = scalar_graph(3.0);
        let d = g.detach(x);
        let s = g.sum(d);
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn backward_square_and_constant() {
        let (mut g, x) = scalar_graph(3.0);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);

        let (mut g, x) = scalar_graph(3.0);
        let c = g.constant(Tensor::scalar(4.0));
        g.backward(c).unwrap();
        assert_eq!(g.grad_or_zeros(x).item(), 0.0);
    }

    #[test]
    fn backward_accumulates_additively() {
        let (mut g, x) = scalar_graph(3.0);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let v = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(Error::NotScalar(_))));
    }

    #[test]
    fn causal_mask_zeroes_future_weights() {
        let mut g = Graph::new();
        let s = g.constant(Tensor::zeros(&[3, 3]));
        let m = g.causal_mask(s).unwrap();
        let l = g.log_softmax(m, 1).unwrap();
        let p = g.exp(l);
        let v = g.value(p);
        assert_eq!(v.row(0), &[1.0, 0.0, 0.0]);
        assert_relative_eq!(v.at(1, 0), 0.5);
        assert_eq!(v.at(1, 2), 0.0);
        assert!(v.all_finite());
    }
}
