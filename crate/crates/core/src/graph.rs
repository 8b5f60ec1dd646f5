//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation on a [`Graph`] evaluates eagerly and appends a node, so the
//! node list is topologically ordered by construction. `backward` walks the
//! tape in reverse from a scalar node. Leaves that require gradients keep an
//! accumulating gradient slot; calling `backward` twice adds twice.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Norm below which a vector is considered degenerate for normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Element-wise and reduction kinds exposed through [`Graph::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElemKind {
    Add,
    Sub,
    HadamardMul,
    Scale(f64),
    Sqrt,
    Square,
    Relu,
    HingeClamp,
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    L2Normalize(Var),
    Softmax(Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Column {
        x: Var,
        col: usize,
    },
    ConcatInner(Vec<Var>),
    ConcatRows(Vec<Var>),
    LinComb(Vec<Var>, Vec<f64>),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    Deconv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    MaxPool {
        x: Var,
        idx: Vec<usize>,
    },
    MaxUnpool {
        x: Var,
        idx: Vec<usize>,
    },
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Argmax indices of a max-pool, used by the paired unpooling layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    /// Flat index into the pooled input for every pooled output entry.
    pub flat: Vec<usize>,
    /// Shape of the pooled input (the unpooling target).
    pub input_shape: Vec<usize>,
    /// Shape of the pooled output.
    pub output_shape: Vec<usize>,
}

impl PoolIndices {
    /// `(batch, channel, row, col)` of the input entry selected by output `i`.
    pub fn position(&self, i: usize) -> (usize, usize, usize, usize) {
        let [_, c, h, w] = self.input_shape[..] else {
            unreachable!("pool indices always rank 4")
        };
        let f = self.flat[i];
        (f / (c * h * w), (f / (h * w)) % c, (f / w) % h, f % w)
    }
}

/// Per-channel batch statistics from a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

/// Accumulated leaf gradients returned by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.map.get(&v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Var, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// `(rows, cols)` view of a rank-1 (single row) or rank-2 tensor.
fn as_rows(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [n] => Ok((1, n)),
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid_shape(op, t.shape(), "expected rank 1 or 2")),
    }
}

fn rank4(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(Error::invalid_shape(op, t.shape(), "expected rank 4 [batch, channels, rows, cols]")),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, src: impl IntoIterator<Item = f64>, len: usize) {
    let buf = dst.get_or_insert_with(|| vec![0.0; len]);
    for (d, s) in buf.iter_mut().zip(src) {
        *d += s;
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on a leaf so far.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    /// Registers a leaf; it requires gradients iff the tensor says so.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push_raw(Op::Leaf, t, rg)
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(true);
        self.leaf(t)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `op` if any input requires gradients, otherwise stores the
    /// value as a constant.
    fn push(&mut self, op: Op, inputs: &[Var], value: Tensor) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if rg {
            self.push_raw(op, value, true)
        } else {
            self.push_raw(Op::Leaf, value, false)
        }
    }

    pub fn elementwise(&mut self, kind: ElemKind, inputs: &[Var]) -> Result<Var> {
        let binary = matches!(kind, ElemKind::Add | ElemKind::Sub | ElemKind::HadamardMul);
        let expected = if binary { 2 } else { 1 };
        if inputs.len() != expected {
            return Err(Error::Arity {
                op: "elementwise",
                expected,
                got: inputs.len(),
            });
        }
        let a = inputs[0];
        match kind {
            ElemKind::Add => self.add(a, inputs[1]),
            ElemKind::Sub => self.sub(a, inputs[1]),
            ElemKind::HadamardMul => self.mul(a, inputs[1]),
            ElemKind::Scale(s) => Ok(self.scale(a, s)),
            ElemKind::Sqrt => self.sqrt(a),
            ElemKind::Square => Ok(self.square(a)),
            ElemKind::Relu => Ok(self.relu(a)),
            ElemKind::HingeClamp => Ok(self.hinge(a)),
            ElemKind::Sum => Ok(self.sum(a)),
            ElemKind::Mean => Ok(self.mean(a)),
        }
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        same_shape(op, ta, tb)?;
        Ok(Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect(),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), &[a, b], v))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), &[a, b], v))
    }

    /// Hadamard (element-wise) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("hadamard_mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), &[a, b], v))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * s);
        self.push(Op::Scale(a, s), &[a], v)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.nodes[a.0].value.map(|x| x + s);
        self.push(Op::AddScalar(a), &[a], v)
    }

    /// Element-wise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        same_shape("mul_const", ta, c)?;
        let v = Tensor::from_parts(
            ta.shape().to_vec(),
            ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect(),
        );
        Ok(self.push(Op::MulConst(a, c.data().to_vec()), &[a], v))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let ta = &self.nodes[a.0].value;
        if let Some(x) = ta.data().iter().find(|x| **x < 0.0 || x.is_nan()) {
            return Err(Error::Domain {
                op: "sqrt",
                reason: format!("negative entry {x}"),
            });
        }
        let v = ta.map(f64::sqrt);
        Ok(self.push(Op::Sqrt(a), &[a], v))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x * x);
        self.push(Op::Square(a), &[a], v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.map(|x| x.max(0.0));
        self.push(Op::Relu(a), &[a], v)
    }

    /// `[x]_+`; identical to ReLU, kept as a separate name for loss code.
    pub fn hinge(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.data().iter().sum();
        self.push(Op::Sum(a), &[a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Op::Mean(a), &[a], Tensor::scalar(s))
    }

    /// Row sums of a rank-2 tensor: `[n, d] -> [n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (n, d) = match *t.shape() {
            [n, d] => (n, d),
            _ => return Err(Error::invalid_shape("sum_rows", t.shape(), "expected rank 2")),
        };
        let v: Vec<f64> = t.data().chunks(d).map(|r| r.iter().sum()).collect();
        Ok(self.push(Op::SumRows(a), &[a], Tensor::from_parts(vec![n], v)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (&[_, _], &[_, _]) => return Err(Error::shape("matmul", ta.shape(), tb.shape())),
            _ => {
                return Err(Error::invalid_shape(
                    "matmul",
                    if ta.rank() != 2 { ta.shape() } else { tb.shape() },
                    "expected rank 2 operands",
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut out);
        Ok(self.push(Op::MatMul(a, b), &[a, b], Tensor::from_parts(vec![m, n], out)))
    }

    /// Fully-connected layer `x·Wᵀ + b` for `x: [batch, in]` (or `[in]`),
    /// `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (rows, inner) = as_rows("fully_connected", tx)?;
        let (out_dim, w_in) = match *tw.shape() {
            [o, i] => (o, i),
            _ => return Err(Error::invalid_shape("fully_connected", tw.shape(), "weight must be [out, in]")),
        };
        if w_in != inner {
            return Err(Error::shape("fully_connected", tx.shape(), tw.shape()));
        }
        let mut out = vec![0.0; rows * out_dim];
        if let Some(b) = b {
            let tb = &self.nodes[b.0].value;
            if tb.shape() != [out_dim] {
                return Err(Error::shape("fully_connected", tb.shape(), &[out_dim]));
            }
            for r in out.chunks_mut(out_dim) {
                r.copy_from_slice(tb.data());
            }
        }
        kernels::gemm(rows, inner, out_dim, tx.data(), false, tw.data(), true, 1.0, &mut out);
        let shape = if tx.rank() == 1 { vec![out_dim] } else { vec![rows, out_dim] };
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Linear { x, w, b }, &inputs, Tensor::from_parts(shape, out)))
    }

    /// L2-normalizes a rank-1 vector, or each row of a rank-2 tensor.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (_, d) = as_rows("l2_normalize", t)?;
        let mut out = Vec::with_capacity(t.len());
        for (i, row) in t.data().chunks(d).enumerate() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > NORM_EPS) {
                return Err(Error::Degenerate {
                    op: "l2_normalize",
                    reason: format!("row {i} has norm {n}"),
                });
            }
            out.extend(row.iter().map(|x| x / n));
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(Op::L2Normalize(a), &[a], v))
    }

    /// Softmax of a rank-1 vector, or of each row of a rank-2 tensor, with
    /// max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (_, d) = as_rows("softmax", t)?;
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(d) {
            out.extend(softmax_row(row));
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(Op::Softmax(a), &[a], v))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        let (n, c) = as_rows("softmax_cross_entropy", t)?;
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        if t.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                op: "softmax_cross_entropy",
            });
        }
        let mut total = 0.0;
        for (row, &y) in t.data().chunks(c).zip(labels) {
            if y >= c {
                return Err(Error::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: y,
                    len: c,
                });
            }
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let v = Tensor::scalar(total / n as f64);
        Ok(self.push(
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
            &[logits],
            v,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.nodes[a.0].value.reshape(shape)?;
        Ok(self.push(Op::Reshape(a), &[a], v))
    }

    /// `[b, ...] -> [b, prod(...)]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let b = t.shape()[0];
        let rest = t.len() / b;
        self.reshape(a, &[b, rest])
    }

    /// Selects rows (leading-axis entries) by index, repetitions allowed.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n = t.shape()[0];
        if idx.is_empty() {
            return Err(Error::Empty { op: "gather_rows" });
        }
        let inner = t.len() / n;
        let mut out = Vec::with_capacity(idx.len() * inner);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            out.extend_from_slice(&t.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        Ok(self.push(
            Op::GatherRows {
                x: a,
                idx: idx.to_vec(),
            },
            &[a],
            Tensor::from_parts(shape, out),
        ))
    }

    /// Contiguous range of rows `[start, start + len)` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let n = t.shape()[0];
        if len == 0 || start + len > n {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: n,
            });
        }
        let inner = t.len() / n;
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let v = Tensor::from_parts(shape, t.data()[start * inner..(start + len) * inner].to_vec());
        Ok(self.push(Op::SliceRows { x: a, start }, &[a], v))
    }

    /// Column `col` of a rank-2 tensor as a rank-1 tensor.
    pub fn column(&mut self, a: Var, col: usize) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let (n, c) = match *t.shape() {
            [n, c] => (n, c),
            _ => return Err(Error::invalid_shape("column", t.shape(), "expected rank 2")),
        };
        if col >= c {
            return Err(Error::IndexOutOfRange {
                op: "column",
                index: col,
                len: c,
            });
        }
        let v: Vec<f64> = (0..n).map(|r| t.data()[r * c + col]).collect();
        Ok(self.push(Op::Column { x: a, col }, &[a], Tensor::from_parts(vec![n], v)))
    }

    /// Concatenates along axis 1 (features of `[b, n]`, or channels of
    /// `[b, c, h, w]` maps with equal spatial extent).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat" })?;
        let s0 = self.nodes[first.0].value.shape().to_vec();
        if s0.len() < 2 {
            return Err(Error::invalid_shape("concat", &s0, "expected rank >= 2"));
        }
        let b = s0[0];
        let mut axis = 0;
        for p in parts {
            let s = self.nodes[p.0].value.shape();
            if s.len() != s0.len() || s[0] != b || s[2..] != s0[2..] {
                return Err(Error::shape("concat", &s0, s));
            }
            axis += s[1];
        }
        let mut out = Vec::new();
        for bi in 0..b {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let inner = t.len() / b;
                out.extend_from_slice(&t.data()[bi * inner..(bi + 1) * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = axis;
        Ok(self.push(Op::ConcatInner(parts.to_vec()), parts, Tensor::from_parts(shape, out)))
    }

    /// Concatenates along the leading (batch) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty { op: "concat_rows" })?;
        let s0 = self.nodes[first.0].value.shape().to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let t = &self.nodes[p.0].value;
            if t.shape()[1..] != s0[1..] {
                return Err(Error::shape("concat_rows", &s0, t.shape()));
            }
            rows += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let mut shape = s0;
        shape[0] = rows;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), parts, Tensor::from_parts(shape, out)))
    }

    /// Σ coeff_i · x_i over equally shaped inputs.
    pub fn lin_comb(&mut self, parts: &[Var], coeffs: &[f64]) -> Result<Var> {
        if parts.len() != coeffs.len() || parts.is_empty() {
            return Err(Error::Arity {
                op: "lin_comb",
                expected: coeffs.len(),
                got: parts.len(),
            });
        }
        let s0 = self.nodes[parts[0].0].value.shape().to_vec();
        let mut out = vec![0.0; self.nodes[parts[0].0].value.len()];
        for (p, &c) in parts.iter().zip(coeffs) {
            let t = &self.nodes[p.0].value;
            if t.shape() != s0.as_slice() {
                return Err(Error::shape("lin_comb", &s0, t.shape()));
            }
            out.iter_mut().zip(t.data()).for_each(|(o, x)| *o += c * x);
        }
        Ok(self.push(
            Op::LinComb(parts.to_vec(), coeffs.to_vec()),
            parts,
            Tensor::from_parts(s0, out),
        ))
    }

    fn conv_dims(
        &self,
        op: &'static str,
        x: Var,
        w: Var,
        geom: ConvGeom,
        transposed: bool,
    ) -> Result<ConvDims> {
        let (b, cin, h, wd) = rank4(op, &self.nodes[x.0].value)?;
        let ws = self.nodes[w.0].value.shape().to_vec();
        let (w_in, cout, k1, k2) = match ws[..] {
            [a, c, k1, k2] if transposed => (a, c, k1, k2),
            [c, a, k1, k2] => (a, c, k1, k2),
            _ => return Err(Error::invalid_shape(op, &ws, "weight must be rank 4")),
        };
        if w_in != cin {
            return Err(Error::shape(op, self.nodes[x.0].value.shape(), &ws));
        }
        if k1 != geom.kernel || k2 != geom.kernel {
            return Err(Error::invalid_shape(op, &ws, format!("kernel must be {0}x{0}", geom.kernel)));
        }
        let out = |n: usize| {
            if transposed {
                geom.transposed_out(n)
            } else {
                geom.conv_out(n)
            }
        };
        let (oh, ow) = match (out(h), out(wd)) {
            (Some(a), Some(c)) => (a, c),
            _ => {
                return Err(Error::Geometry(format!(
                    "{op}: input {h}x{wd} with kernel {} stride {} pad {} has no integral output",
                    geom.kernel, geom.stride, geom.pad
                )))
            }
        };
        Ok(ConvDims {
            batch: b,
            cin,
            h,
            w: wd,
            cout,
            oh,
            ow,
            geom,
        })
    }

    fn check_bias(&self, op: &'static str, b: Option<Var>, cout: usize) -> Result<()> {
        if let Some(b) = b {
            let s = self.nodes[b.0].value.shape();
            if s != [cout] {
                return Err(Error::shape(op, s, &[cout]));
            }
        }
        Ok(())
    }

    /// 2-D convolution; `x: [b, cin, h, w]`, `w: [cout, cin, k, k]`, `b: [cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let dims = self.conv_dims("conv2d", x, w, geom, false)?;
        self.check_bias("conv2d", b, dims.cout)?;
        let out = kernels::conv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            dims,
        );
        let v = Tensor::from_parts(vec![dims.batch, dims.cout, dims.oh, dims.ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Conv2d { x, w, b, dims }, &inputs, v))
    }

    /// Transposed convolution; `w: [cin, cout, k, k]`.
    pub fn deconv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let dims = self.conv_dims("deconv2d", x, w, geom, true)?;
        self.check_bias("deconv2d", b, dims.cout)?;
        let out = kernels::deconv2d_forward(
            self.nodes[x.0].value.data(),
            self.nodes[w.0].value.data(),
            b.map(|b| self.nodes[b.0].value.data()),
            dims,
        );
        let v = Tensor::from_parts(vec![dims.batch, dims.cout, dims.oh, dims.ow], out);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Deconv2d { x, w, b, dims }, &inputs, v))
    }

    pub fn maxpool2d(&mut self, x: Var, geom: ConvGeom) -> Result<(Var, PoolIndices)> {
        let t = &self.nodes[x.0].value;
        let (b, c, h, w) = rank4("maxpool2d", t)?;
        if geom.pad * 2 > geom.kernel {
            return Err(Error::Geometry("maxpool2d: padding exceeds half the window".into()));
        }
        let (oh, ow) = match (geom.pool_out(h), geom.pool_out(w)) {
            (Some(a), Some(c)) => (a, c),
            _ => {
                return Err(Error::Geometry(format!(
                    "maxpool2d: window {} larger than {h}x{w}",
                    geom.kernel
                )))
            }
        };
        let (vals, local) = kernels::maxpool_forward(t.data(), b * c, (h, w), geom, (oh, ow));
        let idx = PoolIndices {
            flat: local,
            input_shape: t.shape().to_vec(),
            output_shape: vec![b, c, oh, ow],
        };
        let v = Tensor::from_parts(vec![b, c, oh, ow], vals);
        let var = self.push(
            Op::MaxPool {
                x,
                idx: idx.flat.clone(),
            },
            &[x],
            v,
        );
        Ok((var, idx))
    }

    /// Scatters `x` to the argmax positions recorded by the paired pool.
    pub fn maxunpool2d(&mut self, x: Var, idx: &PoolIndices) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.shape() != idx.output_shape.as_slice() || idx.flat.len() != t.len() {
            return Err(Error::shape("maxunpool2d", t.shape(), &idx.output_shape));
        }
        let total: usize = idx.input_shape.iter().product();
        let mut out = vec![0.0; total];
        for (&i, &v) in idx.flat.iter().zip(t.data()) {
            if i >= total {
                return Err(Error::IndexOutOfRange {
                    op: "maxunpool2d",
                    index: i,
                    len: total,
                });
            }
            out[i] += v;
        }
        let v = Tensor::from_parts(idx.input_shape.clone(), out);
        Ok(self.push(
            Op::MaxUnpool {
                x,
                idx: idx.flat.clone(),
            },
            &[x],
            v,
        ))
    }

    /// Spatial crop `[b, c, h, w] -> [b, c, rows, cols]` starting at `(top, left)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, rows: usize, cols: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let (b, c, h, w) = rank4("crop", t)?;
        if rows == 0 || cols == 0 || top + rows > h || left + cols > w {
            return Err(Error::Geometry(format!(
                "crop {rows}x{cols} at ({top},{left}) exceeds {h}x{w}"
            )));
        }
        let mut out = Vec::with_capacity(b * c * rows * cols);
        for p in 0..b * c {
            for r in 0..rows {
                let off = p * h * w + (top + r) * w + left;
                out.extend_from_slice(&t.data()[off..off + cols]);
            }
        }
        let v = Tensor::from_parts(vec![b, c, rows, cols], out);
        Ok(self.push(Op::Crop { x, top, left }, &[x], v))
    }

    /// Spatial batch normalization of `x: [b, c, h, w]` with per-channel
    /// `gamma`, `beta`. Train mode normalizes with batch statistics and
    /// returns them; eval mode uses `running` (mean, var).
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: NormMode,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<BatchStats>)> {
        if !(eps > 0.0) {
            return Err(Error::Domain {
                op: "batchnorm2d",
                reason: format!("epsilon must be positive, got {eps}"),
            });
        }
        let t = &self.nodes[x.0].value;
        let (b, c, h, w) = rank4("batchnorm2d", t)?;
        for p in [gamma, beta] {
            let s = self.nodes[p.0].value.shape();
            if s != [c] {
                return Err(Error::shape("batchnorm2d", s, &[c]));
            }
        }
        let plane = h * w;
        let n = b * plane;
        let (mean, var, stats) = match mode {
            NormMode::Train => {
                if n < 2 {
                    return Err(Error::Degenerate {
                        op: "batchnorm2d",
                        reason: "training statistics need batch*rows*cols >= 2".into(),
                    });
                }
                let (mean, var) = kernels::channel_stats(t.data(), b, c, plane);
                let unbiased = var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval => {
                let (m, v) = running.ok_or_else(|| Error::Domain {
                    op: "batchnorm2d",
                    reason: "eval mode requires running statistics".into(),
                })?;
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batchnorm2d", &[m.len()], &[c]));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.nodes[gamma.0].value.data();
        let be = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; t.len()];
        let mut out = vec![0.0; t.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (t.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + be[ch];
                }
            }
        }
        let v = Tensor::from_parts(t.shape().to_vec(), out);
        let var_out = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == NormMode::Train,
            },
            &[x, gamma, beta],
            v,
        );
        Ok((var_out, stats))
    }

    /// Reverse pass from the scalar `loss`. Returns the accumulated gradient
    /// of every leaf that requires gradients (zeros for leaves the loss does
    /// not depend on).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Backward(format!(
                "loss node {} is not in this graph ({} nodes)",
                loss.0,
                self.nodes.len()
            )));
        }
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let mut map = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad {
                let grad = match n.value.grad() {
                    Some(g) => g.to_vec(),
                    None => vec![0.0; n.value.len()],
                };
                map.insert(Var(i), Tensor::from_parts(n.value.shape().to_vec(), grad));
            }
        }
        Ok(Gradients { map })
    }

    /// Clears the gradient slots of all leaves.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let len = |v: Var| self.nodes[v.0].value.len();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, it: &mut dyn Iterator<Item = f64>| {
            if wants(v) {
                add_into(&mut grads[v.0], it, len(v));
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut g.iter().copied());
                send(*b, &mut g.iter().copied());
            }
            Op::Sub(a, b) => {
                send(*a, &mut g.iter().copied());
                send(*b, &mut g.iter().map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                send(*a, &mut g.iter().zip(vb).map(|(g, y)| g * y));
                send(*b, &mut g.iter().zip(va).map(|(g, x)| g * x));
            }
            Op::Scale(a, s) => send(*a, &mut g.iter().map(|x| x * s)),
            Op::AddScalar(a) | Op::Reshape(a) => send(*a, &mut g.iter().copied()),
            Op::MulConst(a, c) => send(*a, &mut g.iter().zip(c).map(|(g, c)| g * c)),
            Op::Sqrt(a) => {
                let y = node.value.data();
                send(
                    *a,
                    &mut g
                        .iter()
                        .zip(y)
                        .map(|(g, &y)| if y > 0.0 { g * 0.5 / y } else { 0.0 }),
                );
            }
            Op::Square(a) => send(*a, &mut g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x)),
            Op::Relu(a) => send(
                *a,
                &mut g
                    .iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }),
            ),
            Op::Sum(a) => send(*a, &mut std::iter::repeat_n(g[0], len(*a))),
            Op::Mean(a) => {
                let n = len(*a);
                send(*a, &mut std::iter::repeat_n(g[0] / n as f64, n))
            }
            Op::SumRows(a) => {
                let d = len(*a) / g.len();
                send(*a, &mut g.iter().flat_map(|&x| std::iter::repeat_n(x, d)));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, val(*b), true, 0.0, &mut ga);
                    send(*a, &mut ga.into_iter());
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(k, m, n, val(*a), true, g, false, 0.0, &mut gb);
                    send(*b, &mut gb.into_iter());
                }
            }
            Op::Linear { x, w, b } => {
                let (out_dim, inner) = {
                    let s = self.nodes[w.0].value.shape();
                    (s[0], s[1])
                };
                let rows = g.len() / out_dim;
                if wants(*x) {
                    let mut gx = vec![0.0; rows * inner];
                    kernels::gemm(rows, out_dim, inner, g, false, val(*w), false, 0.0, &mut gx);
                    send(*x, &mut gx.into_iter());
                }
                if wants(*w) {
                    let mut gw = vec![0.0; out_dim * inner];
                    kernels::gemm(out_dim, rows, inner, g, true, val(*x), false, 0.0, &mut gw);
                    send(*w, &mut gw.into_iter());
                }
                if let Some(b) = b {
                    let mut gb = vec![0.0; out_dim];
                    for r in g.chunks(out_dim) {
                        gb.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                    }
                    send(*b, &mut gb.into_iter());
                }
            }
            Op::L2Normalize(a) => {
                // d(x/|x|) = (g - y (y·g)) / |x|
                let x = val(*a);
                let y = node.value.data();
                let d = *node.value.shape().last().expect("rank >= 1");
                let mut out = Vec::with_capacity(x.len());
                for ((xr, yr), gr) in x.chunks(d).zip(y.chunks(d)).zip(g.chunks(d)) {
                    let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * yg) / n));
                }
                send(*a, &mut out.into_iter());
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *node.value.shape().last().expect("rank >= 1");
                let mut out = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                    let yg: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    out.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - yg)));
                }
                send(*a, &mut out.into_iter());
            }
            Op::SoftmaxXent { logits, labels } => {
                let t = &self.nodes[logits.0].value;
                let c = *t.shape().last().expect("rank >= 1");
                let n = labels.len() as f64;
                let mut out = Vec::with_capacity(t.len());
                for (row, &y) in t.data().chunks(c).zip(labels) {
                    let p = softmax_row(row);
                    out.extend(p.iter().enumerate().map(|(j, &pj)| {
                        g[0] * (pj - if j == y { 1.0 } else { 0.0 }) / n
                    }));
                }
                send(*logits, &mut out.into_iter());
            }
            Op::GatherRows { x, idx } => {
                if wants(*x) {
                    let inner = g.len() / idx.len();
                    let mut gx = vec![0.0; len(*x)];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..inner {
                            gx[i * inner + j] += g[r * inner + j];
                        }
                    }
                    send(*x, &mut gx.into_iter());
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let t = &self.nodes[x.0].value;
                    let inner = t.len() / t.shape()[0];
                    let mut gx = vec![0.0; t.len()];
                    gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                    send(*x, &mut gx.into_iter());
                }
            }
            Op::Column { x, col } => {
                if wants(*x) {
                    let c = self.nodes[x.0].value.shape()[1];
                    let mut gx = vec![0.0; len(*x)];
                    for (r, gv) in g.iter().enumerate() {
                        gx[r * c + col] = *gv;
                    }
                    send(*x, &mut gx.into_iter());
                }
            }
            Op::ConcatInner(parts) => {
                let b = node.value.shape()[0];
                let total_inner = g.len() / b;
                let mut offset = 0;
                for p in parts {
                    let inner = len(*p) / b;
                    if wants(*p) {
                        let mut gp = Vec::with_capacity(len(*p));
                        for bi in 0..b {
                            let s = bi * total_inner + offset;
                            gp.extend_from_slice(&g[s..s + inner]);
                        }
                        send(*p, &mut gp.into_iter());
                    }
                    offset += inner;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = len(*p);
                    send(*p, &mut g[offset..offset + n].iter().copied());
                    offset += n;
                }
            }
            Op::LinComb(parts, coeffs) => {
                for (p, c) in parts.iter().zip(coeffs) {
                    send(*p, &mut g.iter().map(|x| x * c));
                }
            }
            Op::Conv2d { x, w, b, dims } => {
                let (gx, gw, gb) = kernels::conv2d_backward(val(*x), val(*w), g, *dims, wants(*x));
                if let Some(gx) = gx {
                    send(*x, &mut gx.into_iter());
                }
                send(*w, &mut gw.into_iter());
                if let Some(b) = b {
                    send(*b, &mut gb.into_iter());
                }
            }
            Op::Deconv2d { x, w, b, dims } => {
                let (gx, gw, gb) = kernels::deconv2d_backward(val(*x), val(*w), g, *dims, wants(*x));
                if let Some(gx) = gx {
                    send(*x, &mut gx.into_iter());
                }
                send(*w, &mut gw.into_iter());
                if let Some(b) = b {
                    send(*b, &mut gb.into_iter());
                }
            }
            Op::MaxPool { x, idx } => {
                if wants(*x) {
                    let mut gx = vec![0.0; len(*x)];
                    for (&i, gv) in idx.iter().zip(g) {
                        gx[i] += gv;
                    }
                    send(*x, &mut gx.into_iter());
                }
            }
            Op::MaxUnpool { x, idx } => send(*x, &mut idx.iter().map(|&i| g[i])),
            Op::Crop { x, top, left } => {
                if wants(*x) {
                    let t = &self.nodes[x.0].value;
                    let [b, c, h, w] = t.shape()[..] else { unreachable!() };
                    let [_, _, rows, cols] = node.value.shape()[..] else { unreachable!() };
                    let mut gx = vec![0.0; t.len()];
                    for p in 0..b * c {
                        for r in 0..rows {
                            let dst = p * h * w + (top + r) * w + left;
                            let src = (p * rows + r) * cols;
                            gx[dst..dst + cols].copy_from_slice(&g[src..src + cols]);
                        }
                    }
                    send(*x, &mut gx.into_iter());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, h, w] = node.value.shape()[..] else { unreachable!() };
                let plane = h * w;
                let n = (b * plane) as f64;
                let gam = val(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for i in off..off + plane {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if wants(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for bi in 0..b {
                        for ch in 0..c {
                            let off = (bi * c + ch) * plane;
                            for i in off..off + plane {
                                gx[i] = if *train {
                                    gam[ch] * inv_std[ch] / n
                                        * (n * g[i] - dbeta[ch] - xhat[i] * dgamma[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * g[i]
                                };
                            }
                        }
                    }
                    send(*x, &mut gx.into_iter());
                }
                send(*gamma, &mut dgamma.into_iter());
                send(*beta, &mut dbeta.into_iter());
            }
        }
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}
