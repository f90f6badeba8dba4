//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the computation record of one forward pass. Every primitive
//! op appends a node holding its output value and enough context to run the
//! vector-Jacobian product later; node order is therefore a topological
//! order. [`Graph::backward`] walks the tape once in reverse and consumes it.
//!
//! All outputs are checked for NaN/Inf at creation time, so a non-finite
//! value surfaces as an error at the op that produced it.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_shape, broadcast_walk, numel, split_axis, strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Exp,
    Log,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Reduce {
        input: Var,
        kind: Reduction,
        out_strides: Vec<usize>,
        count: usize,
        argmax: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax {
        input: Var,
        axis: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

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

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    /// Records a leaf. Leaves with `requires_grad` receive a gradient in
    /// [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Tensor::from_parts(shape, data), op, requires_grad)
    }

    // ---- elementwise ------------------------------------------------------

    /// Dispatches a named elementwise op; binary ops require `b`.
    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| {
                Error::InvalidArgument(alloc::format!("{op:?} needs two operands"))
            })
        };
        match op {
            Elementwise::Add => self.add(a, need_b()?),
            Elementwise::Sub => self.sub(a, need_b()?),
            Elementwise::Mul => self.mul(a, need_b()?),
            Elementwise::Relu => self.relu(a),
            Elementwise::Exp => self.exp(a),
            Elementwise::Log => self.log(a),
            Elementwise::Square => self.square(a),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = broadcast_shape(sa, sb).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; numel(&out)];
        broadcast_walk(sa, sb, &out, |i, ia, ib| data[i] = f(va[ia], vb[ib]));
        self.push_checked(name, out, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let x = self.value(a);
        let shape = x.shape().to_vec();
        let data = x.data().iter().map(|&v| f(v)).collect();
        self.push_checked(name, shape, data, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, libm::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::LogDomain);
        }
        self.unary("log", a, libm::log, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary("square", a, |x| x * x, Op::Square(a))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        if !factor.is_finite() {
            return Err(Error::NonFinite("scale"));
        }
        self.unary("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    // ---- linear algebra ---------------------------------------------------

    /// Matrix product over the last two axes. Leading (batch) axes of `a` and
    /// `b` must match, or `b` may be a plain matrix shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let dims = matmul_dims(&sa, &sb)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = vec![0.0; dims.batch * dims.m * dims.n];
        for t in 0..dims.batch {
            mm(
                &va[t * dims.m * dims.k..(t + 1) * dims.m * dims.k],
                &vb[dims.b_offset(t)..dims.b_offset(t) + dims.k * dims.n],
                &mut data[t * dims.m * dims.n..(t + 1) * dims.m * dims.n],
                dims.m,
                dims.k,
                dims.n,
            );
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(dims.n);
        self.push_checked("matmul", shape, data, Op::MatMul(a, b), &[a, b])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidArgument(alloc::format!(
                "permutation {perm:?} invalid for rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let in_strides = strides(&shape);
        let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(x.len());
        walk_strided(&out_shape, &walk, |_, src| data.push(x[src]));
        self.push_checked("permute", out_shape, data, Op::Permute(a, perm.to_vec()), &[a])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::InvalidAxis { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(a, &perm)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let requires_grad = self.requires_grad(a);
        self.push(value, Op::Reshape(a), requires_grad)
    }

    // ---- reductions -------------------------------------------------------

    /// Reduces over `axes` (which are removed from the shape). Accumulation
    /// runs in row-major input order.
    pub fn reduce(&mut self, kind: Reduction, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
            reduced[ax] = true;
        }
        let out_shape: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| shape[i]).collect();
        let kept_strides = strides(&out_shape);
        let mut out_strides = vec![0; rank];
        let mut k = 0;
        for i in 0..rank {
            if !reduced[i] {
                out_strides[i] = kept_strides[k];
                k += 1;
            }
        }
        let n_out = numel(&out_shape);
        let count = numel(&shape) / n_out;
        let x = self.value(a).data();
        let mut argmax = Vec::new();
        let data = match kind {
            Reduction::Sum | Reduction::Mean => {
                let mut acc = vec![0.0; n_out];
                walk_strided(&shape, &out_strides, |i, o| acc[o] += x[i]);
                if kind == Reduction::Mean {
                    let c = count as f64;
                    acc.iter_mut().for_each(|v| *v /= c);
                }
                acc
            }
            Reduction::Max => {
                let mut best = vec![f64::NEG_INFINITY; n_out];
                argmax = vec![usize::MAX; n_out];
                walk_strided(&shape, &out_strides, |i, o| {
                    if argmax[o] == usize::MAX || x[i] > best[o] {
                        best[o] = x[i];
                        argmax[o] = i;
                    }
                });
                best
            }
        };
        let op = Op::Reduce {
            input: a,
            kind,
            out_strides,
            count,
            argmax,
        };
        self.push_checked("reduce", out_shape, data, op, &[a])
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(Reduction::Sum, a, axes)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(Reduction::Mean, a, axes)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes)
    }

    // ---- structural -------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * block..(o + 1) * block]);
            }
        }
        let op = Op::Concat {
            inputs: inputs.to_vec(),
            axis,
        };
        self.push_checked("concat", out_shape, data, op, inputs)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::IndexOutOfRange {
                index: start + len,
                extent: shape[axis],
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            data.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push_checked("slice", out_shape, data, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Row lookup: `table[ids[i], :]` stacked into `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument("gather_rows expects a matrix".into()));
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no ids".into()));
        }
        let (rows, d) = (shape[0], shape[1]);
        let x = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    index: id,
                    extent: rows,
                });
            }
            data.extend_from_slice(&x[id * d..(id + 1) * d]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push_checked("gather_rows", vec![ids.len(), d], data, op, &[table])
    }

    // ---- fused numerics ---------------------------------------------------

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut data = vec![0.0; x.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * n * inner + i * inner + j;
                let max = (0..n).map(|i| x[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for i in 0..n {
                    let e = libm::exp(x[at(i)] - max);
                    data[at(i)] = e;
                    total += e;
                }
                for i in 0..n {
                    data[at(i)] /= total;
                }
            }
        }
        self.push_checked("softmax", shape, data, Op::Softmax { input: a, axis }, &[a])
    }

    /// Normalizes over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::InvalidArgument("layer_norm of a scalar".into()))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                data[r * d + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            input: x,
            gamma,
            beta,
            xhat,
            rstd,
        };
        self.push_checked("layer_norm", shape, data, op, &[x, gamma, beta])
    }

    /// Mean token-level cross-entropy of `logits [t, vocab]` against integer
    /// targets, skipping positions whose target equals `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        let (t, v) = (shape[0], shape[1]);
        let x = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..t {
            let row = &x[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&l| libm::exp(l - max)).sum();
            for j in 0..v {
                probs[r * v + j] = libm::exp(row[j] - max) / z;
            }
            if Some(targets[r]) == ignore {
                continue;
            }
            if targets[r] >= v {
                return Err(Error::IndexOutOfRange {
                    index: targets[r],
                    extent: v,
                });
            }
            total += max + libm::log(z) - row[targets[r]];
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument("every target position is padding".into()));
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            ignore,
            probs,
            count,
        };
        self.push_checked("cross_entropy", Vec::new(), vec![total / count as f64], op, &[logits])
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates gradients from a scalar `loss` to every node that requires
    /// them. The record is consumed: a second call fails, as does recording
    /// further ops.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&self.nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last backward loss with respect to `v`. Nodes that
    /// require gradients but did not influence the loss get zeros; nodes
    /// that do not require gradients (or before backward) give `None`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        if !self.consumed || !self.nodes[v.0].requires_grad {
            return None;
        }
        let shape = self.nodes[v.0].value.shape().to_vec();
        let data = match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; numel(&shape)],
        };
        Some(Tensor::from_parts(shape, data))
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(e, c)| *e += c),
        slot => *slot = Some(contribution),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    let needs = |v: Var| nodes[v.0].requires_grad;
    let out_shape = node.value.shape();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            let mut ga = vec![0.0; numel(shp(a))];
            let mut gb = vec![0.0; numel(shp(b))];
            let (va, vb) = (val(a), val(b));
            match node.op {
                Op::Add(..) => broadcast_walk(shp(a), shp(b), out_shape, |i, ia, ib| {
                    ga[ia] += g[i];
                    gb[ib] += g[i];
                }),
                Op::Sub(..) => broadcast_walk(shp(a), shp(b), out_shape, |i, ia, ib| {
                    ga[ia] += g[i];
                    gb[ib] -= g[i];
                }),
                _ => broadcast_walk(shp(a), shp(b), out_shape, |i, ia, ib| {
                    ga[ia] += g[i] * vb[ib];
                    gb[ib] += g[i] * va[ia];
                }),
            }
            accumulate(nodes, grads, a, ga);
            accumulate(nodes, grads, b, gb);
        }
        Op::Relu(a) => {
            let x = val(*a);
            let ga = g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Exp(a) => {
            let y = node.value.data();
            let ga = g.iter().zip(y).map(|(g, y)| g * y).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Log(a) => {
            let ga = g.iter().zip(val(*a)).map(|(g, x)| g / x).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Square(a) => {
            let ga = g.iter().zip(val(*a)).map(|(g, x)| 2.0 * x * g).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::Scale(a, c) => {
            let ga = g.iter().map(|g| g * c).collect();
            accumulate(nodes, grads, *a, ga);
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let dims = matmul_dims(shp(a), shp(b)).expect("validated in forward");
            let (va, vb) = (val(a), val(b));
            let (mk, kn, mn) = (dims.m * dims.k, dims.k * dims.n, dims.m * dims.n);
            if needs(a) {
                let mut ga = vec![0.0; va.len()];
                for t in 0..dims.batch {
                    mm_bt(
                        &g[t * mn..(t + 1) * mn],
                        &vb[dims.b_offset(t)..dims.b_offset(t) + kn],
                        &mut ga[t * mk..(t + 1) * mk],
                        dims.m,
                        dims.n,
                        dims.k,
                    );
                }
                accumulate(nodes, grads, a, ga);
            }
            if needs(b) {
                let mut gb = vec![0.0; vb.len()];
                for t in 0..dims.batch {
                    let off = dims.b_offset(t);
                    mm_at(
                        &va[t * mk..(t + 1) * mk],
                        &g[t * mn..(t + 1) * mn],
                        &mut gb[off..off + kn],
                        dims.m,
                        dims.k,
                        dims.n,
                    );
                }
                accumulate(nodes, grads, b, gb);
            }
        }
        Op::Permute(a, perm) => {
            let in_strides = strides(shp(*a));
            let walk: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut ga = vec![0.0; g.len()];
            walk_strided(out_shape, &walk, |i, src| ga[src] += g[i]);
            accumulate(nodes, grads, *a, ga);
        }
        Op::Reshape(a) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Reduce {
            input,
            kind,
            out_strides,
            count,
            argmax,
        } => {
            let in_shape = shp(*input);
            let mut ga = vec![0.0; numel(in_shape)];
            match kind {
                Reduction::Sum => walk_strided(in_shape, out_strides, |i, o| ga[i] = g[o]),
                Reduction::Mean => {
                    let c = *count as f64;
                    walk_strided(in_shape, out_strides, |i, o| ga[i] = g[o] / c)
                }
                Reduction::Max => {
                    for (o, &src) in argmax.iter().enumerate() {
                        ga[src] += g[o];
                    }
                }
            }
            accumulate(nodes, grads, *input, ga);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_axis(out_shape, *axis);
            let mut offset = 0;
            for &v in inputs {
                let ext = shp(v)[*axis];
                let block = ext * inner;
                let mut gv = Vec::with_capacity(outer * block);
                for o in 0..outer {
                    let base = o * total * inner + offset * inner;
                    gv.extend_from_slice(&g[base..base + block]);
                }
                offset += ext;
                accumulate(nodes, grads, v, gv);
            }
        }
        Op::Slice { input, axis, start } => {
            let in_shape = shp(*input);
            let (outer, ext, inner) = split_axis(in_shape, *axis);
            let len = out_shape[*axis];
            let mut ga = vec![0.0; numel(in_shape)];
            for o in 0..outer {
                let dst = o * ext * inner + start * inner;
                let src = o * len * inner;
                ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
            }
            accumulate(nodes, grads, *input, ga);
        }
        Op::Gather { table, ids } => {
            let d = shp(*table)[1];
            let mut gt = vec![0.0; numel(shp(*table))];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..d {
                    gt[id * d + j] += g[r * d + j];
                }
            }
            accumulate(nodes, grads, *table, gt);
        }
        Op::Softmax { input, axis } => {
            let y = node.value.data();
            let (outer, n, inner) = split_axis(out_shape, *axis);
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for j in 0..inner {
                    let at = |i: usize| o * n * inner + i * inner + j;
                    let dot: f64 = (0..n).map(|i| g[at(i)] * y[at(i)]).sum();
                    for i in 0..n {
                        ga[at(i)] = y[at(i)] * (g[at(i)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *input, ga);
        }
        Op::LayerNorm {
            input,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gam = val(*gamma);
            let d = gam.len();
            let rows = xhat.len() / d;
            let mut gx = vec![0.0; xhat.len()];
            let mut gg = vec![0.0; d];
            let mut gb = vec![0.0; d];
            for r in 0..rows {
                let (gr, hr) = (&g[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                let mut mean_gg = 0.0;
                let mut mean_ggx = 0.0;
                for j in 0..d {
                    let t = gr[j] * gam[j];
                    mean_gg += t;
                    mean_ggx += t * hr[j];
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                }
                mean_gg /= d as f64;
                mean_ggx /= d as f64;
                for j in 0..d {
                    gx[r * d + j] = rstd[r] * (gr[j] * gam[j] - mean_gg - hr[j] * mean_ggx);
                }
            }
            accumulate(nodes, grads, *input, gx);
            accumulate(nodes, grads, *gamma, gg);
            accumulate(nodes, grads, *beta, gb);
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore,
            probs,
            count,
        } => {
            let v = shp(*logits)[1];
            let scale = g[0] / *count as f64;
            let mut gl = vec![0.0; probs.len()];
            for (r, &t) in targets.iter().enumerate() {
                if Some(t) == *ignore {
                    continue;
                }
                for j in 0..v {
                    gl[r * v + j] = probs[r * v + j] * scale;
                }
                gl[r * v + t] -= scale;
            }
            accumulate(nodes, grads, *logits, gl);
        }
    }
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
}

impl MatmulDims {
    fn b_offset(&self, t: usize) -> usize {
        if self.shared_b {
            0
        } else {
            t * self.k * self.n
        }
    }
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatmulDims> {
    let mismatch = || Error::ShapeMismatch {
        op: "matmul",
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    };
    if sa.len() < 2 || sb.len() < 2 {
        return Err(mismatch());
    }
    let (ra, rb) = (sa.len(), sb.len());
    let (m, k) = (sa[ra - 2], sa[ra - 1]);
    let (k2, n) = (sb[rb - 2], sb[rb - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let shared_b = rb == 2;
    if !shared_b && sa[..ra - 2] != sb[..rb - 2] {
        return Err(mismatch());
    }
    Ok(MatmulDims {
        batch: numel(&sa[..ra - 2]),
        m,
        k,
        n,
        shared_b,
    })
}

/// `out[m x n] += a[m x k] * b[k x n]`
fn mm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m x k] += g[m x n] * b[k x n]^T`
fn mm_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[k x n] += a[m x k]^T * g[m x n]`
fn mm_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let row = &mut out[p * n..(p + 1) * n];
            for (o, gv) in row.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

/// Walks all indices of `shape` in row-major order, reporting the flat index
/// and the offset under `other` strides.
fn walk_strided(shape: &[usize], other: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    let rank = shape.len();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for i in 0..n {
        f(i, off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += other[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= other[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_difference_grad, max_rel_error};
    use crate::rng::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.uniform(-1.0, 1.0))
    }

    #[test]
    fn hadamard_and_identity() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 2.0])).unwrap();
        let b = g.constant(t(&[2], &[3.0, 4.0])).unwrap();
        let c = g.mul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3.0, 8.0]);
        let z = g.constant(Tensor::zeros(&[2])).unwrap();
        let d = g.add(a, z).unwrap();
        assert_eq!(g.value(d), g.value(a));
    }

    #[test]
    fn elementwise_errors() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2], &[1.0, 0.0])).unwrap();
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
        assert_eq!(g.log(a), Err(Error::LogDomain));
        assert!(g.elementwise(Elementwise::Mul, a, None).is_err());
        let big = g.constant(t(&[1], &[800.0])).unwrap();
        assert_eq!(g.exp(big), Err(Error::NonFinite("exp")));
    }

    #[test]
    fn matmul_small_cases() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let ones = g.constant(t(&[2, 1], &[1.0, 1.0])).unwrap();
        let c = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(c), &t(&[2, 1], &[3.0, 7.0]));
        let eye = g.constant(Tensor::eye(2)).unwrap();
        let d = g.matmul(a, eye).unwrap();
        assert_eq!(g.value(d), g.value(a));
        let bad = g.constant(Tensor::zeros(&[3, 1])).unwrap();
        assert!(g.matmul(a, bad).is_err());
    }

    #[test]
    fn reductions() {
        let mut g = Graph::new();
        let a = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let s = g.sum(a, &[0]).unwrap();
        assert_eq!(g.value(s).item(), Some(6.0));
        let c = g.constant(Tensor::full(&[2, 3, 2], 1.5)).unwrap();
        let m = g.mean_all(c).unwrap();
        assert_eq!(g.value(m).item(), Some(1.5));
        assert_eq!(g.sum(a, &[1]), Err(Error::InvalidAxis { axis: 1, rank: 1 }));
        let mx = g.reduce(Reduction::Max, a, &[0]).unwrap();
        assert_eq!(g.value(mx).item(), Some(3.0));
    }

    #[test]
    fn backward_square_sum() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let sq = g.square(x).unwrap();
        let loss = g.sum_all(sq).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.param(t(&[2], &[5.0, 6.0])).unwrap();
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(g.backward(x), Err(Error::NonScalarLoss(vec![2])));
        let loss = g.sum_all(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss), Err(Error::RecordConsumed));
        assert_eq!(g.square(x), Err(Error::RecordConsumed));
    }

    #[test]
    fn softmax_and_cross_entropy_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, libm::log(2.0)])).unwrap();
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s).data();
        assert!((v[0] - 1.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);
        let logits = g.constant(Tensor::zeros(&[3, 5])).unwrap();
        let ce = g.cross_entropy(logits, &[1, 0, 4], Some(0)).unwrap();
        assert!((g.value(ce).item().unwrap() - libm::log(5.0)).abs() < 1e-14);
        assert!(g.cross_entropy(logits, &[0, 0, 0], Some(0)).is_err());
    }

    // Every primitive's reverse-mode gradient against central differences,
    // over 100 seeds each.
    #[test]
    fn primitive_gradients_match_finite_differences() {
        type Build = fn(&mut Graph, Var, Var) -> Result<Var>;
        let cases: &[(&str, &[usize], &[usize], Build)] = &[
            ("add-broadcast", &[3, 4], &[4], |g, a, b| g.add(a, b)),
            ("sub-broadcast", &[2, 1, 3], &[4, 1], |g, a, b| g.sub(a, b)),
            ("mul-broadcast", &[2, 3], &[2, 1], |g, a, b| g.mul(a, b)),
            ("mul-self", &[5], &[5], |g, a, _| g.mul(a, a)),
            ("relu", &[6], &[1], |g, a, _| g.relu(a)),
            ("exp", &[2, 3], &[1], |g, a, _| g.exp(a)),
            ("log", &[4], &[1], |g, a, _| {
                let e = g.exp(a)?;
                g.log(e)
            }),
            ("square", &[3, 2], &[1], |g, a, _| g.square(a)),
            ("scale", &[3], &[1], |g, a, _| g.scale(a, -2.5)),
            ("matmul", &[3, 4], &[4, 2], |g, a, b| g.matmul(a, b)),
            ("matmul-batched", &[2, 3, 4], &[2, 4, 5], |g, a, b| g.matmul(a, b)),
            ("matmul-shared", &[2, 3, 4], &[4, 2], |g, a, b| g.matmul(a, b)),
            ("permute", &[2, 3, 4], &[1], |g, a, _| g.permute(a, &[2, 0, 1])),
            ("reshape", &[2, 6], &[1], |g, a, _| g.reshape(a, &[3, 4])),
            ("sum-axis", &[3, 4], &[1], |g, a, _| g.sum(a, &[1])),
            ("mean-axes", &[2, 3, 4], &[1], |g, a, _| g.mean(a, &[0, 2])),
            ("max", &[4, 5], &[1], |g, a, _| g.reduce(Reduction::Max, a, &[1])),
            ("concat", &[2, 3], &[2, 2], |g, a, b| g.concat(&[a, b], 1)),
            ("slice", &[4, 3], &[1], |g, a, _| g.slice(a, 0, 1, 2)),
            ("gather", &[4, 3], &[1], |g, a, _| g.gather_rows(a, &[2, 0, 2])),
            ("softmax-0", &[3, 4], &[1], |g, a, _| g.softmax(a, 0)),
            ("softmax-1", &[3, 4], &[1], |g, a, _| g.softmax(a, 1)),
            ("layer-norm", &[3, 5], &[5], |g, a, b| {
                let beta = g.scale(b, 0.5)?;
                g.layer_norm(a, b, beta)
            }),
            ("cross-entropy", &[3, 5], &[1], |g, a, _| g.cross_entropy(a, &[1, 0, 4], Some(0))),
        ];
        for (name, sa, sb, build) in cases {
            for seed in 0..100u64 {
                let mut rng = Rng::new(seed * 7919 + 13);
                let xa = random(&mut rng, sa);
                let xb = random(&mut rng, sb);
                // fixed weights turn any output into a scalar
                let weights = |g: &mut Graph, out: Var| -> Result<Var> {
                    let mut wr = Rng::new(seed);
                    let w = Tensor::from_fn(g.shape(out), |_| wr.uniform(-1.0, 1.0));
                    let w = g.constant(w)?;
                    let p = g.mul(out, w)?;
                    g.sum_all(p)
                };
                let mut g = Graph::new();
                let a = g.param(xa.clone()).unwrap();
                let b = g.param(xb.clone()).unwrap();
                let out = build(&mut g, a, b).unwrap();
                let loss = weights(&mut g, out).unwrap();
                g.backward(loss).unwrap();
                let (ga, gb) = (g.grad(a).unwrap(), g.grad(b).unwrap());
                let eval = |xa: &Tensor, xb: &Tensor| -> Result<f64> {
                    let mut g = Graph::new();
                    let a = g.param(xa.clone())?;
                    let b = g.param(xb.clone())?;
                    let out = build(&mut g, a, b)?;
                    let loss = weights(&mut g, out)?;
                    Ok(g.value(loss).item().unwrap())
                };
                let na = finite_difference_grad(|x| eval(x, &xb), &xa, 1e-5).unwrap();
                let nb = finite_difference_grad(|x| eval(&xa, x), &xb, 1e-5).unwrap();
                let err = max_rel_error(&ga, &na).max(max_rel_error(&gb, &nb));
                assert!(err <= 1e-6, "{name} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn permute_matches_index_oracle() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let mut g = Graph::new();
        let a = g.constant(x.clone()).unwrap();
        let p = g.permute(a, &[2, 0, 1]).unwrap();
        let out = g.value(p);
        assert_eq!(out.shape(), &[4, 2, 3]);
        for i in 0..4 {
            for j in 0..2 {
                for k in 0..3 {
                    assert_eq!(out.at(&[i, j, k]).unwrap(), x.at(&[j, k, i]).unwrap());
                }
            }
        }
    }
}
