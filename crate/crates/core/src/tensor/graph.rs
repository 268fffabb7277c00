use super::kernels::{broadcast_index, gemm_acc, sigmoid, split_axis};
use super::{Mask, Tensor};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use std::collections::HashMap;

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug)]
enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        /// `b` is shared across the batch (3D × 2D).
        shared_b: bool,
    },
    Transpose {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        /// Broadcast map from positions of `a` into `b`; `None` when shapes match.
        bmap: Option<Vec<usize>>,
    },
    Affine {
        x: Var,
        scale: f64,
    },
    Unary {
        op: UnaryOp,
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
        d1: usize,
        d2: usize,
    },
    Reduce {
        op: ReduceOp,
        x: Var,
        axis: usize,
    },
    Reshape {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Softmax { .. } => "row_softmax",
            Op::Binary { op: BinaryOp::Add, .. } => "add",
            Op::Binary { op: BinaryOp::Sub, .. } => "sub",
            Op::Binary { op: BinaryOp::Mul, .. } => "mul",
            Op::Affine { .. } => "affine",
            Op::Unary { op: UnaryOp::Sigmoid, .. } => "sigmoid",
            Op::Unary { op: UnaryOp::Tanh, .. } => "tanh",
            Op::Unary { op: UnaryOp::Relu, .. } => "relu",
            Op::Concat { .. } => "concat_features",
            Op::Reduce { .. } => "reduce",
            Op::Reshape { .. } => "reshape",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation record.
///
/// Nodes are appended in execution order; backward visits them in exact
/// reverse order. Parameters from a [`ParamStore`] are bound at most once
/// per graph so repeated uses accumulate into a single gradient.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
    params: HashMap<(u64, usize), Var>,
}

/// Additive mask value applied before the softmax exponent.
const MASK_FILL: f64 = -1e30;

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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds a stored parameter as a differentiable leaf, reusing the
    /// existing node if it was already bound on this graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let key = (store.uid(), id.index());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(store.get(id).clone());
        self.params.insert(key, v);
        v
    }

    /// Makes later [`Graph::param`] calls for `id` resolve to `v`. Lets a
    /// caller substitute its own leaves for stored parameters, e.g. to
    /// differentiate with respect to them numerically.
    pub fn bind_param(&mut self, store: &ParamStore, id: ParamId, v: Var) {
        self.params.insert((store.uid(), id.index()), v);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated by the last backward pass, if `v` received one.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shape(v).to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradient for every parameter of `store` bound on this graph, indexed
    /// by parameter id. Unbound or unreached parameters get `None`.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Option<Tensor>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&(store.uid(), i))
                    .and_then(|&v| self.grad(v))
            })
            .collect()
    }

    /// Clears gradients so backward may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Name of the first recorded operation whose output is not finite.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Smallest distance of any ReLU input from the kink at zero, or `None`
    /// if the graph has no ReLU. Finite differences with a step larger
    /// than this straddle a non-differentiable point.
    pub fn kink_margin(&self) -> Option<f64> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Unary { op: UnaryOp::Relu, x } => {
                    Some(self.nodes[x.0].value.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())))
                }
                _ => None,
            })
            .reduce(f64::min)
    }

    // ---- operations -------------------------------------------------------

    /// Matrix product. Supports `[m×k]·[k×n]`, `[B×m×k]·[k×n]` (shared
    /// right operand) and `[B×m×k]·[B×k×n]` (batched).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::dim("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        let (batch, m, k, n, shared_b) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1], true),
            (3, 2) if sa[2] == sb[0] => (1, sa[0] * sa[1], sa[2], sb[1], true),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2], false),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let b_off = if shared_b { 0 } else { bi * k * n };
                gemm_acc(
                    &av[bi * m * k..(bi + 1) * m * k],
                    false,
                    &bv[b_off..b_off + k * n],
                    false,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::dim("transpose", format!("need rank ≥ 2, got {s:?}")));
        }
        let r = s.len();
        let (rows, cols) = (s[r - 2], s[r - 1]);
        let batch = s[..r - 2].iter().product::<usize>();
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let off = b * rows * cols;
            for i in 0..rows {
                for j in 0..cols {
                    out[off + j * rows + i] = src[off + i * cols + j];
                }
            }
        }
        let mut shape = s.clone();
        shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Transpose { x }, rg))
    }

    /// Softmax over the last axis. Masked positions (`false`) receive
    /// exactly zero probability and zero gradient.
    pub fn row_softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if let Some(m) = mask {
            if m.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "row_softmax",
                    format!("mask {:?} does not match input {shape:?}", m.shape()),
                ));
            }
        }
        let cols = *shape.last().unwrap_or(&1);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (row, (xr, yr)) in src.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let mr = mask.map(|m| &m.data()[row * cols..(row + 1) * cols]);
            let keep = |j: usize| mr.is_none_or(|m| m[j]);
            let filled = |j: usize| if keep(j) { xr[j] } else { MASK_FILL };
            if !(0..cols).any(keep) {
                return Err(Error::DegenerateMask {
                    op: "row_softmax",
                    row,
                });
            }
            let max = (0..cols).map(filled).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, y) in yr.iter_mut().enumerate() {
                *y = if keep(j) { (filled(j) - max).exp() } else { 0.0 };
                total += *y;
            }
            for y in yr.iter_mut() {
                *y /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax { x },
            rg,
        ))
    }

    /// Pointwise `a op b`, where `b` either matches `a` or broadcasts onto
    /// it (right-aligned, each axis equal or 1).
    pub fn elementwise(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bmap = if sa == sb {
            None
        } else {
            Some(broadcast_index(&sb, &sa).ok_or_else(|| {
                Error::dim("elementwise", format!("{sb:?} does not broadcast onto {sa:?}"))
            })?)
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let out: Vec<f64> = match &bmap {
            None => av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect(),
            Some(map) => av.iter().zip(map).map(|(&x, &j)| f(x, bv[j])).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(sa, out)?, Op::Binary { op, a, b, bmap }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(BinaryOp::Mul, a, b)
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| scale * v + shift).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let t = self.value(x);
        let f = match op {
            UnaryOp::Sigmoid => sigmoid,
            UnaryOp::Tanh => f64::tanh,
            UnaryOp::Relu => |v: f64| v.max(0.0),
        };
        let out: Vec<f64> = t.data().iter().map(|&v| f(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::Unary { op, x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Relu, x)
    }

    /// Concatenation along the last (feature) axis.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::dim(
                "concat_features",
                format!("row counts differ: {sa:?} vs {sb:?}"),
            ));
        }
        let d1 = *sa.last().unwrap();
        let d2 = *sb.last().unwrap();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for (ra, rb) in av.chunks(d1).zip(bv.chunks(d2)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = d1 + d2;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat { a, b, d1, d2 }, rg))
    }

    /// Sum or mean over `axis`, removing that axis.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(
                "reduce",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        if op == ReduceOp::Mean {
            let inv = 1.0 / len as f64;
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let mut new_shape = shape.clone();
        new_shape.remove(axis);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(new_shape, out)?, Op::Reduce { op, x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, axis)
    }

    /// Sum of every element, as a rank-0 scalar.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape { x }, rg))
    }

    /// Per-row normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d < 2 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {shape:?}, gain {:?}, bias {:?}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mu) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row lookup: output shape is `index_shape ++ [d]` for a `[V×d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize], index_shape: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::dim("gather", format!("table must be 2-D, got {ts:?}")));
        }
        if index_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::dim("gather", "index shape does not match id count"));
        }
        let (vocab, d) = (ts[0], ts[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Data(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let mut shape = index_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-softmax of
    /// `[B×C]` logits, computed with log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {s:?} vs {} labels", labels.len()),
            ));
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} outside {c} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for r in 0..b {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[labels[r]];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        loss /= b as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout_with(&mut self, x: Var, keep: &[bool], rate: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let s = 1.0 / (1.0 - rate);
        let m: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let mv = self.constant(Tensor::new(shape, m)?);
        self.mul(x, mv)
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every node that
    /// requires them, accumulating over repeated uses.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::State(
                "backward already ran on this graph; call reset_grads first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        contrib(slot);
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64]) {
        // Temporarily take the op so saved activations can be borrowed while
        // gradients of the inputs are mutated.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_b,
            } => {
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                self.acc(a, |ga| {
                    for bi in 0..batch {
                        let b_off = if shared_b { 0 } else { bi * k * n };
                        gemm_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &bv[b_off..b_off + k * n],
                            true,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(b, |gb| {
                    for bi in 0..batch {
                        let b_off = if shared_b { 0 } else { bi * k * n };
                        gemm_acc(
                            &av[bi * m * k..(bi + 1) * m * k],
                            true,
                            &g[bi * m * n..(bi + 1) * m * n],
                            false,
                            &mut gb[b_off..b_off + k * n],
                            k,
                            m,
                            n,
                        );
                    }
                });
            }
            &Op::Transpose { x } => {
                let s = self.nodes[idx].value.shape().to_vec();
                let r = s.len();
                // Output is [.., cols, rows] of the input [.., rows, cols].
                let (cols, rows) = (s[r - 2], s[r - 1]);
                let batch = s[..r - 2].iter().product::<usize>();
                self.acc(x, |gx| {
                    for bt in 0..batch {
                        let off = bt * rows * cols;
                        for i in 0..rows {
                            for j in 0..cols {
                                gx[off + i * cols + j] += g[off + j * rows + i];
                            }
                        }
                    }
                });
            }
            &Op::Softmax { x } => {
                let y = self.nodes[idx].value.data().to_vec();
                let cols = *self.nodes[idx].value.shape().last().unwrap_or(&1);
                self.acc(x, |gx| {
                    for ((yr, gr), dx) in y
                        .chunks(cols)
                        .zip(g.chunks(cols))
                        .zip(gx.chunks_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            dx[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Binary { op, a, b, bmap } => {
                let (a, b, op) = (*a, *b, *op);
                let av = self.nodes[a.0].value.data().to_vec();
                let bv = self.nodes[b.0].value.data().to_vec();
                let bi = |i: usize| bmap.as_ref().map_or(i, |m| m[i]);
                self.acc(a, |ga| match op {
                    BinaryOp::Add | BinaryOp::Sub => {
                        ga.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
                    }
                    BinaryOp::Mul => {
                        for i in 0..ga.len() {
                            ga[i] += g[i] * bv[bi(i)];
                        }
                    }
                });
                self.acc(b, |gb| {
                    for i in 0..g.len() {
                        gb[bi(i)] += match op {
                            BinaryOp::Add => g[i],
                            BinaryOp::Sub => -g[i],
                            BinaryOp::Mul => g[i] * av[i],
                        };
                    }
                });
            }
            &Op::Affine { x, scale } => {
                self.acc(x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, &s)| *d += scale * s);
                });
            }
            &Op::Unary { op, x } => {
                let y = self.nodes[idx].value.data().to_vec();
                let xv = self.nodes[x.0].value.data().to_vec();
                self.acc(x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i]
                            * match op {
                                UnaryOp::Sigmoid => y[i] * (1.0 - y[i]),
                                UnaryOp::Tanh => 1.0 - y[i] * y[i],
                                UnaryOp::Relu => {
                                    if xv[i] > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            };
                    }
                });
            }
            &Op::Concat { a, b, d1, d2 } => {
                let w = d1 + d2;
                self.acc(a, |ga| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..d1 {
                            ga[r * d1 + j] += gr[j];
                        }
                    }
                });
                self.acc(b, |gb| {
                    for (r, gr) in g.chunks(w).enumerate() {
                        for j in 0..d2 {
                            gb[r * d2 + j] += gr[d1 + j];
                        }
                    }
                });
            }
            &Op::Reduce { op, x, axis } => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let (outer, len, inner) = split_axis(&shape, axis);
                let s = if op == ReduceOp::Mean {
                    1.0 / len as f64
                } else {
                    1.0
                };
                self.acc(x, |gx| {
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                gx[base + i] += s * g[o * inner + i];
                            }
                        }
                    }
                });
            }
            &Op::Reshape { x } => {
                self.acc(x, |gx| gx.iter_mut().zip(g).for_each(|(d, &s)| *d += s));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let gv = self.nodes[gain.0].value.data().to_vec();
                let d = gv.len();
                self.acc(gain, |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                self.acc(bias, |gb| {
                    for gr in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += gr[j];
                        }
                    }
                });
                self.acc(x, |gx| {
                    let df = d as f64;
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let dh: Vec<f64> = (0..d).map(|j| gr[j] * gv[j]).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] +=
                                inv_std[r] / df * (df * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[table.0].value.shape()[1];
                self.acc(*table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += g[r * d + j];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                let s = g[0] / b as f64;
                self.acc(*logits, |gl| {
                    for r in 0..b {
                        for j in 0..c {
                            let target = if j == labels[r] { 1.0 } else { 0.0 };
                            gl[r * c + j] += s * (probs[r * c + j] - target);
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }
}
