//! Eager tape for reverse-mode differentiation.
//!
//! Every op evaluates immediately and records how to route gradients back to
//! its inputs. Nodes are appended in evaluation order, so the tape is
//! topologically sorted by construction and `backward` is a single reverse
//! sweep.

use std::collections::HashMap;

use super::array::{gemm, DenseArray};
use crate::error::{Error, Result};

/// Named parameter arrays in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    arrays: Vec<DenseArray>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces a parameter and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, array: DenseArray) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.arrays[i] = array;
            return i;
        }
        let i = self.arrays.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.arrays.push(array);
        i
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&DenseArray> {
        Ok(&self.arrays[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        let i = self.id(name)?;
        Ok(&mut self.arrays[i])
    }

    pub fn by_index(&self, i: usize) -> &DenseArray {
        &self.arrays[i]
    }

    pub fn by_index_mut(&mut self, i: usize) -> &mut DenseArray {
        &mut self.arrays[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.names.iter().map(String::as_str).zip(self.arrays.iter())
    }

    /// Total number of scalar weights.
    pub fn num_values(&self) -> usize {
        self.arrays.iter().map(DenseArray::len).sum()
    }
}

/// Gradients aligned with the slots of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<DenseArray>>,
}

impl Gradients {
    /// No gradient for any of `n` parameters.
    pub fn empty(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    /// Global L2 norm over all gradient entries.
    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.values().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.grads.iter_mut().flatten() {
                for v in g.values_mut() {
                    *v *= s;
                }
            }
        }
        norm
    }

    pub fn get(&self, param: usize) -> Option<&DenseArray> {
        self.grads.get(param).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Largest absolute gradient entry across all parameters.
    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.values().iter())
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Value {
    Owned(DenseArray),
    Param(usize),
}

enum Op {
    Leaf,
    Param(usize),
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(NodeId, NodeId),
    AddBroadcast(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(NodeId),
    Gelu {
        x: NodeId,
        tanh: Vec<f64>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    Concat {
        inputs: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
        len: usize,
    },
    Reshape(NodeId),
    Mean(NodeId),
    Mse {
        pred: NodeId,
        target: Vec<f64>,
        row_weights: Vec<f64>,
        norm: f64,
    },
    Bce {
        logits: NodeId,
        target: Vec<f64>,
        weights: Vec<f64>,
        norm: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "input",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Gelu { .. } => "gelu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Mean(_) => "mean",
            Op::Mse { .. } => "mse_loss",
            Op::Bce { .. } => "bce_loss",
        }
    }
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

/// `tanh` via a single `exp`; the libm `tanh` dominates GELU-heavy profiles otherwise.
fn fast_tanh(u: f64) -> f64 {
    if u.abs() < 1e-4 {
        return u.tanh();
    }
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

fn gelu_tanh(x: f64) -> f64 {
    fast_tanh(GELU_C * (x + GELU_A * x * x * x))
}

fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis + 1..].iter().product(),
    )
}

/// A forward evaluation recorded for differentiation.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        match &self.nodes[id.0].value {
            Value::Owned(a) => a,
            Value::Param(i) => self.params.by_index(*i),
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn push(&mut self, value: DenseArray, op: Op, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; gradients are not propagated into it.
    pub fn input(&mut self, value: DenseArray) -> NodeId {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let i = self.params.id(name)?;
        Ok(self.param_at(i))
    }

    pub fn param_at(&mut self, index: usize) -> NodeId {
        self.nodes.push(Node {
            value: Value::Param(index),
            op: Op::Param(index),
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// `a[..., k] @ b[k, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} @ {sb:?}")));
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).values(),
            (k as isize, 1),
            self.value(b).values(),
            (n as isize, 1),
            0.0,
            &mut out,
            (n as isize, 1),
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let v = DenseArray::new(shape, out)?;
        Ok(self.push(v, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Batched `a[b, m, k] @ b[b, k, n]`, or `a @ b^T` with `b[b, n, k]` when `trans_b`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::shape("batch_matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            if sb[2] != k {
                return Err(bad());
            }
            sb[1]
        } else {
            if sb[1] != k {
                return Err(bad());
            }
            sb[2]
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).values();
            let bv = self.value(b).values();
            let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    (k as isize, 1),
                    &bv[i * k * n..(i + 1) * k * n],
                    b_strides,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                    (n as isize, 1),
                );
            }
        }
        let v = DenseArray::new(vec![batch, m, n], out)?;
        Ok(self.push(
            v,
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x + y)
            .collect();
        let v = DenseArray::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    /// Adds `b` to every trailing block of `a`; `b`'s shape must equal `a`'s trailing dims.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", format!("{sa:?} + {sb:?}")));
        }
        let bv = self.value(b).values();
        let blk = bv.len().max(1);
        let mut out = self.value(a).values().to_vec();
        for chunk in out.chunks_mut(blk) {
            for (o, y) in chunk.iter_mut().zip(bv) {
                *o += y;
            }
        }
        let v = DenseArray::new(sa.to_vec(), out)?;
        Ok(self.push(v, Op::AddBroadcast(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} * {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<f64> = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(x, y)| x * y)
            .collect();
        let v = DenseArray::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let out: Vec<f64> = self.value(a).values().iter().map(|x| x * s).collect();
        let v = DenseArray::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(v, Op::Scale(a, s), &[a])
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let out: Vec<f64> = self.value(a).values().iter().map(|&x| f(x)).collect();
        let v = DenseArray::new(self.shape(a).to_vec(), out).expect("same shape");
        self.push(v, op, &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let tanh: Vec<f64> = src.values().iter().map(|&x| gelu_tanh(x)).collect();
        let out = src
            .values()
            .iter()
            .zip(&tanh)
            .map(|(x, t)| 0.5 * x * (1.0 + t))
            .collect();
        let v = DenseArray::new(src.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::Gelu { x: a, tanh }, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let d = src.last_dim();
        let mut out = src.values().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let v = DenseArray::new(src.shape().to_vec(), out).expect("same shape");
        self.push(v, Op::Softmax(a), &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x);
        let rows = xv.rows();
        let mut normed = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for (o, v) in normed[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let g = self.value(gain).values();
        let b = self.value(bias).values();
        let out: Vec<f64> = normed
            .iter()
            .enumerate()
            .map(|(i, n)| n * g[i % d] + b[i % d])
            .collect();
        let v = DenseArray::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Selects rows of a 2-D `table`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(Error::shape("gather", format!("table {:?}", tv.shape())));
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {n} rows"),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let v = DenseArray::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &i in inputs {
            let s = self.shape(i);
            let ok = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in inputs {
                let v = self.value(i);
                let blk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.values()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let v = DenseArray::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    pub fn slice(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("{s:?} axis {axis} [{start}, {})", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let xv = self.value(x).values();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let v = DenseArray::new(shape, out)?;
        Ok(self.push(
            v,
            Op::Slice {
                x,
                axis,
                start,
                len,
            },
            &[x],
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let m = xv.values().iter().sum::<f64>() / xv.len().max(1) as f64;
        self.push(DenseArray::scalar(m), Op::Mean(x), &[x])
    }

    /// Mean squared error over the rows of `pred` (last axis = features).
    ///
    /// `row_weights` (one per row) masks rows out of the average; `None` weights all rows 1.
    pub fn mse_loss(
        &mut self,
        pred: NodeId,
        target: &DenseArray,
        row_weights: Option<&[f64]>,
    ) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(
                "mse_loss",
                format!("pred {:?} vs target {:?}", pv.shape(), target.shape()),
            ));
        }
        let (rows, d) = (pv.rows(), pv.last_dim());
        let w = match row_weights {
            Some(w) if w.len() != rows => {
                return Err(Error::shape(
                    "mse_loss",
                    format!("{} weights for {rows} rows", w.len()),
                ))
            }
            Some(w) => w.to_vec(),
            None => vec![1.0; rows],
        };
        let norm = w.iter().sum::<f64>() * d as f64;
        let mut total = 0.0;
        for r in 0..rows {
            if w[r] == 0.0 {
                continue;
            }
            let s: f64 = pv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            total += w[r] * s;
        }
        let loss = if norm > 0.0 { total / norm } else { 0.0 };
        Ok(self.push(
            DenseArray::scalar(loss),
            Op::Mse {
                pred,
                target: target.values().to_vec(),
                row_weights: w,
                norm,
            },
            &[pred],
        ))
    }

    /// Binary cross-entropy on logits, weighted per element.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        target: &[f64],
        weights: Option<&[f64]>,
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.len() != target.len() || weights.is_some_and(|w| w.len() != target.len()) {
            return Err(Error::shape(
                "bce_loss",
                format!("{} logits, {} targets", lv.len(), target.len()),
            ));
        }
        let w = weights.map_or_else(|| vec![1.0; target.len()], <[f64]>::to_vec);
        let norm: f64 = w.iter().sum();
        let mut total = 0.0;
        for ((x, t), wi) in lv.values().iter().zip(target).zip(&w) {
            if *wi == 0.0 {
                continue;
            }
            total += wi * (x.max(0.0) - x * t + (-x.abs()).exp().ln_1p());
        }
        let loss = if norm > 0.0 { total / norm } else { 0.0 };
        Ok(self.push(
            DenseArray::scalar(loss),
            Op::Bce {
                logits,
                target: target.to_vec(),
                weights: w,
                norm,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar node; returns gradients for every parameter reached.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out: Vec<Option<DenseArray>> = vec![None; self.params.len()];

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.route(idx, &g, &mut grads, &mut out)?;
        }
        Ok(Gradients { grads: out })
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let len = self.value(id).len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn add_into(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl Fn(usize) -> f64) {
        if let Some(b) = self.buf(grads, id) {
            for (i, v) in b.iter_mut().enumerate() {
                *v += f(i);
            }
        }
    }

    /// `grads[id] += g`, taking a copy of `g` when nothing has accumulated yet.
    fn add_slice(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, g: &[f64]) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(b) => {
                for (v, x) in b.iter_mut().zip(g) {
                    *v += x;
                }
            }
            slot => *slot = Some(g.to_vec()),
        }
    }

    fn route(
        &self,
        idx: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut [Option<DenseArray>],
    ) -> Result<()> {
        let nodes = &self.nodes;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Param(p) => {
                let shape = self.params.by_index(*p).shape().to_vec();
                match &mut out[*p] {
                    Some(acc) => {
                        for (a, v) in acc.values_mut().iter_mut().zip(g) {
                            *a += v;
                        }
                    }
                    slot => *slot = Some(DenseArray::new(shape, g.to_vec())?),
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                if let Some(da) = self.buf(grads, *a) {
                    // dA = G @ B^T
                    gemm(m, n, k, g, (n as isize, 1), bv, (1, n as isize), 1.0, da, (k as isize, 1));
                }
                if let Some(db) = self.buf(grads, *b) {
                    // dB = A^T @ G
                    gemm(k, m, n, av, (1, k as isize), g, (n as isize, 1), 1.0, db, (n as isize, 1));
                }
            }
            Op::BatchMatMul {
                a,
                b,
                trans_b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                if let Some(da) = self.buf(grads, *a) {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let dai = &mut da[i * m * k..(i + 1) * m * k];
                        if *trans_b {
                            // C = A B^T, B is [n, k]: dA = G B
                            gemm(m, n, k, gi, (n as isize, 1), bi, (k as isize, 1), 1.0, dai, (k as isize, 1));
                        } else {
                            // B is [k, n]: dA = G B^T
                            gemm(m, n, k, gi, (n as isize, 1), bi, (1, n as isize), 1.0, dai, (k as isize, 1));
                        }
                    }
                }
                if let Some(db) = self.buf(grads, *b) {
                    for i in 0..*batch {
                        let gi = &g[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let dbi = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // dB = G^T A, [n, k]
                            gemm(n, m, k, gi, (1, n as isize), ai, (k as isize, 1), 1.0, dbi, (k as isize, 1));
                        } else {
                            // dB = A^T G, [k, n]
                            gemm(k, m, n, ai, (1, k as isize), gi, (n as isize, 1), 1.0, dbi, (n as isize, 1));
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.add_slice(grads, *a, g);
                self.add_slice(grads, *b, g);
            }
            Op::AddBroadcast(a, b) => {
                self.add_slice(grads, *a, g);
                if let Some(db) = self.buf(grads, *b) {
                    let blk = db.len().max(1);
                    for gc in g.chunks(blk) {
                        for (d, v) in db.iter_mut().zip(gc) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).values();
                let bv = self.value(*b).values();
                self.add_into(grads, *a, |i| g[i] * bv[i]);
                self.add_into(grads, *b, |i| g[i] * av[i]);
            }
            Op::Scale(a, s) => self.add_into(grads, *a, |i| g[i] * s),
            Op::Gelu { x, tanh } => {
                let xv = self.value(*x).values();
                self.add_into(grads, *x, |i| g[i] * gelu_grad(xv[i], tanh[i]));
            }
            Op::Relu(a) => {
                let av = self.value(*a).values();
                self.add_into(grads, *a, |i| if av[i] > 0.0 { g[i] } else { 0.0 });
            }
            Op::Sigmoid(a) => {
                let y = self.value(NodeId(idx)).values();
                self.add_into(grads, *a, |i| g[i] * y[i] * (1.0 - y[i]));
            }
            Op::Softmax(a) => {
                let y = self.value(NodeId(idx));
                let d = y.last_dim().max(1);
                if let Some(da) = self.buf(grads, *a) {
                    for (r, (yr, gr)) in y.values().chunks(d).zip(g.chunks(d)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            da[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain).values();
                let d = gv.len();
                if let Some(dg) = self.buf(grads, *gain) {
                    for (i, v) in g.iter().enumerate() {
                        dg[i % d] += v * normed[i];
                    }
                }
                if let Some(db) = self.buf(grads, *bias) {
                    for (i, v) in g.iter().enumerate() {
                        db[i % d] += v;
                    }
                }
                if let Some(dx) = self.buf(grads, *x) {
                    for (r, is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let nr = &normed[r * d..(r + 1) * d];
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..d {
                            let dn = gr[j] * gv[j];
                            mean_dn += dn;
                            mean_dn_n += dn * nr[j];
                        }
                        mean_dn /= d as f64;
                        mean_dn_n /= d as f64;
                        for j in 0..d {
                            let dn = gr[j] * gv[j];
                            dx[r * d + j] += is * (dn - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(dt) = self.buf(grads, *table) {
                    let d = self.value(*table).last_dim();
                    for (row, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = self.shape(NodeId(idx)).to_vec();
                let (outer, inner) = outer_inner(&shape, *axis);
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &i in inputs {
                    let blk = self.shape(i)[*axis] * inner;
                    if let Some(di) = self.buf(grads, i) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + blk];
                            for (d, s) in di[o * blk..(o + 1) * blk].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += blk;
                }
            }
            Op::Slice {
                x,
                axis,
                start,
                len,
            } => {
                let s = self.shape(*x).to_vec();
                let (outer, inner) = outer_inner(&s, *axis);
                if let Some(dx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        let base = o * s[*axis] * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, v) in dx[base..base + len * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Reshape(x) => self.add_slice(grads, *x, g),
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                self.add_into(grads, *x, |_| g[0] / n);
            }
            Op::Mse {
                pred,
                target,
                row_weights,
                norm,
            } => {
                if *norm > 0.0 {
                    let pv = self.value(*pred).values();
                    let d = self.value(*pred).last_dim().max(1);
                    self.add_into(grads, *pred, |i| {
                        g[0] * 2.0 * row_weights[i / d] * (pv[i] - target[i]) / norm
                    });
                }
            }
            Op::Bce {
                logits,
                target,
                weights,
                norm,
            } => {
                if *norm > 0.0 {
                    let lv = self.value(*logits).values();
                    self.add_into(grads, *logits, |i| {
                        g[0] * weights[i] * (sigmoid(lv[i]) - target[i]) / norm
                    });
                }
            }
        }
        Ok(())
    }

    /// Name of the op that produced a node, for diagnostics.
    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }
}
