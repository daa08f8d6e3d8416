//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape in reverse and accumulates vector-Jacobian products into inputs that
//! require gradients. Constants and frozen parameters never receive a
//! gradient buffer.

use std::sync::Arc;

use super::kernels::{axis_split, matmul_into, order_free_sum, sigmoid, softmax_in_place};
use super::{ParamSet, Tensor};
use crate::error::{Error, Result};

/// Cross-entropy floor applied to the target probability.
pub const CE_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Compressed per-node neighbor lists.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Csr {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Csr {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut targets = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        offsets.push(0);
        for l in lists {
            targets.extend_from_slice(l);
            offsets.push(targets.len());
        }
        Csr { offsets, targets }
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn n_edges(&self) -> usize {
        self.targets.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.targets[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    /// Edge index range of node `i`.
    pub fn edge_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn to_lists(&self) -> Vec<Vec<usize>> {
        (0..self.n_nodes()).map(|i| self.neighbors(i).to_vec()).collect()
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    Relu(usize),
    Softmax { x: usize, axis: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Mean { x: usize, axis: usize },
    Sum(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy { p: usize, targets: Vec<usize> },
    SliceCols { x: usize, start: usize },
    GatherRows { x: usize, idx: Vec<usize> },
    SegmentMean { x: usize, adj: Arc<Csr>, self_fallback: bool },
    EdgeDot { q: usize, k: usize, adj: Arc<Csr> },
    SegmentSoftmax { s: usize, adj: Arc<Csr> },
    SegmentWeightedSum { alpha: usize, v: usize, adj: Arc<Csr> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<String>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn broadcast_ok(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.val(v)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t;
        value.set_requires_grad(false);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that tracks gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t;
        value.clear_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter; frozen parameters become constants.
    pub fn param(&mut self, params: &ParamSet, id: &str) -> Result<Var> {
        let t = params.tensor(id)?;
        let v = self.leaf(t.clone());
        if t.requires_grad() {
            self.nodes[v.0].param = Some(id.to_string());
        }
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(
            self.val(a).data(),
            self.val(b).data(),
            &mut out,
            m,
            k,
            n,
            false,
            false,
            0.0,
        );
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.val(a).shape();
        if s.len() != 2 {
            return Err(Error::dim(format!("transpose needs 2-d, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let src = self.val(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.val(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a.0), &[a.0]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.val(a), self.val(b));
        if !broadcast_ok(ta.shape(), tb.shape()) {
            return Err(Error::dim(format!(
                "cannot broadcast {:?} onto {:?}",
                tb.shape(),
                ta.shape()
            )));
        }
        let nb = tb.numel();
        let bd = tb.data();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a + b`, broadcasting `b` over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.val(a);
        let data = src.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(src.shape().to_vec(), data).unwrap();
        self.push(t, Op::Scale(a.0, c), &[a.0])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let src = self.val(a);
        let data = src.data().iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).unwrap();
        self.push(t, Op::Silu(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.val(a);
        let data = src.data().iter().map(|&x| x.max(0.0)).collect();
        let t = Tensor::new(src.shape().to_vec(), data).unwrap();
        self.push(t, Op::Relu(a.0), &[a.0])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.val(x);
        if axis >= src.ndim() {
            return Err(Error::dim(format!("softmax axis {axis} on {:?}", src.shape())));
        }
        let (outer, len, inner) = axis_split(src.shape(), axis);
        let mut data = src.data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for j in 0..inner {
                let base = o * len * inner + j;
                for (t, b) in buf.iter_mut().enumerate() {
                    *b = data[base + t * inner];
                }
                softmax_in_place(&mut buf);
                for (t, b) in buf.iter().enumerate() {
                    data[base + t * inner] = *b;
                }
            }
        }
        let t = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax { x: x.0, axis }, &[x.0]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.val(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} on {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.val(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::dim(format!("concat {s:?} with {base:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.val(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let idx: Vec<usize> = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(
            t,
            Op::Concat {
                inputs: idx.clone(),
                axis,
            },
            &idx,
        ))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let src = self.val(x);
        if axis >= src.ndim() || src.shape()[axis] == 0 {
            return Err(Error::dim(format!("mean axis {axis} on {:?}", src.shape())));
        }
        let (outer, len, inner) = axis_split(src.shape(), axis);
        let d = src.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let mut s = 0.0;
                for t in 0..len {
                    s += d[o * len * inner + t * inner + j];
                }
                out[o * inner + j] = s / len as f64;
            }
        }
        let mut shape = src.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Mean { x: x.0, axis }, &[x.0]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x.0), &[x.0])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("layernorm eps must be positive"));
        }
        let src = self.val(x);
        let n = src.cols();
        if self.val(gamma).shape() != [n] || self.val(beta).shape() != [n] {
            return Err(Error::dim(format!(
                "layernorm affine {:?}/{:?} vs width {n}",
                self.val(gamma).shape(),
                self.val(beta).shape()
            )));
        }
        let rows = src.rows();
        let (g, b) = (self.val(gamma).data(), self.val(beta).data());
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &src.data()[r * n..(r + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..n {
                let h = (row[c] - mu) * inv;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let t = Tensor::new(src.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Sum over rows of `-ln(max(p[row, target], 1e-12))`. `p` is a
    /// distribution vector (one target) or a matrix with one target per row.
    pub fn cross_entropy_from_probs(&mut self, p: Var, targets: &[usize]) -> Result<Var> {
        let src = self.val(p);
        let classes = src.cols();
        let rows = if src.ndim() <= 1 { 1 } else { src.rows() };
        if targets.len() != rows {
            return Err(Error::dim(format!(
                "{} targets for {rows} probability rows",
                targets.len()
            )));
        }
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(Error::Index {
                    index: t,
                    len: classes,
                });
            }
            loss -= src.data()[r * classes + t].max(CE_FLOOR).ln();
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                p: p.0,
                targets: targets.to_vec(),
            },
            &[p.0],
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let src = self.val(x);
        if src.ndim() != 2 || start > end || end > src.cols() {
            return Err(Error::dim(format!(
                "slice {start}..{end} of {:?}",
                src.shape()
            )));
        }
        let (rows, cols) = (src.rows(), src.cols());
        let w = end - start;
        let mut out = Vec::with_capacity(rows * w);
        for r in 0..rows {
            out.extend_from_slice(&src.data()[r * cols + start..r * cols + end]);
        }
        let t = Tensor::new(vec![rows, w], out)?;
        Ok(self.push(t, Op::SliceCols { x: x.0, start }, &[x.0]))
    }

    /// Rows of a matrix selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.val(x);
        if src.ndim() != 2 {
            return Err(Error::dim(format!("gather_rows on {:?}", src.shape())));
        }
        let (rows, cols) = (src.rows(), src.cols());
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index { index: i, len: rows });
            }
            out.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        ))
    }

    fn check_graph_rows(&self, x: Var, adj: &Csr) -> Result<()> {
        let s = self.val(x).shape();
        if s.len() != 2 || s[0] != adj.n_nodes() {
            return Err(Error::dim(format!(
                "node features {s:?} vs graph of {} nodes",
                adj.n_nodes()
            )));
        }
        if let Some(&bad) = adj.targets.iter().find(|&&j| j >= s[0]) {
            return Err(Error::Index {
                index: bad,
                len: s[0],
            });
        }
        Ok(())
    }

    /// Per-node mean of neighbor rows. Nodes with no neighbors take their own
    /// row when `self_fallback`, else zeros. The reduction is order-free so
    /// the result is invariant to how neighbors are listed.
    pub fn segment_mean(&mut self, x: Var, adj: &Arc<Csr>, self_fallback: bool) -> Result<Var> {
        self.check_graph_rows(x, adj)?;
        let src = self.val(x);
        let (n, d) = (src.rows(), src.cols());
        let mut out = vec![0.0; n * d];
        let mut buf = Vec::new();
        for i in 0..n {
            let nb = adj.neighbors(i);
            let row = &mut out[i * d..(i + 1) * d];
            if nb.is_empty() {
                if self_fallback {
                    row.copy_from_slice(src.row(i));
                }
                continue;
            }
            for (c, o) in row.iter_mut().enumerate() {
                buf.clear();
                buf.extend(nb.iter().map(|&j| src.data()[j * d + c]));
                *o = order_free_sum(&mut buf) / nb.len() as f64;
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            t,
            Op::SegmentMean {
                x: x.0,
                adj: adj.clone(),
                self_fallback,
            },
            &[x.0],
        ))
    }

    /// One score per edge `(i, j)`: the dot product of `q[i]` and `k[j]`.
    pub fn edge_dot(&mut self, q: Var, k: Var, adj: &Arc<Csr>) -> Result<Var> {
        self.check_graph_rows(q, adj)?;
        self.check_graph_rows(k, adj)?;
        let (tq, tk) = (self.val(q), self.val(k));
        if tq.cols() != tk.cols() {
            return Err(Error::dim("edge_dot width mismatch"));
        }
        let mut out = Vec::with_capacity(adj.n_edges());
        for i in 0..adj.n_nodes() {
            for &j in adj.neighbors(i) {
                out.push(tq.row(i).iter().zip(tk.row(j)).map(|(a, b)| a * b).sum());
            }
        }
        let t = Tensor::vector(out);
        Ok(self.push(
            t,
            Op::EdgeDot {
                q: q.0,
                k: k.0,
                adj: adj.clone(),
            },
            &[q.0, k.0],
        ))
    }

    /// Softmax of edge scores within each node's segment.
    pub fn segment_softmax(&mut self, s: Var, adj: &Arc<Csr>) -> Result<Var> {
        let src = self.val(s);
        if src.shape() != [adj.n_edges()] {
            return Err(Error::dim(format!(
                "segment scores {:?} vs {} edges",
                src.shape(),
                adj.n_edges()
            )));
        }
        let mut out = src.data().to_vec();
        let mut buf = Vec::new();
        for i in 0..adj.n_nodes() {
            let seg = &mut out[adj.edge_range(i)];
            if seg.is_empty() {
                continue;
            }
            let max = seg.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in seg.iter_mut() {
                *v = (*v - max).exp();
            }
            buf.clear();
            buf.extend_from_slice(seg);
            let z = order_free_sum(&mut buf);
            for v in seg.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::vector(out);
        Ok(self.push(
            t,
            Op::SegmentSoftmax {
                s: s.0,
                adj: adj.clone(),
            },
            &[s.0],
        ))
    }

    /// `out[i] = sum over edges (i, j) of alpha[e] * v[j]`, order-free.
    pub fn segment_weighted_sum(&mut self, alpha: Var, v: Var, adj: &Arc<Csr>) -> Result<Var> {
        self.check_graph_rows(v, adj)?;
        if self.val(alpha).shape() != [adj.n_edges()] {
            return Err(Error::dim("segment weights vs edge count"));
        }
        let (ta, tv) = (self.val(alpha), self.val(v));
        let (n, d) = (tv.rows(), tv.cols());
        let mut out = vec![0.0; n * d];
        let mut buf = Vec::new();
        for i in 0..n {
            let range = adj.edge_range(i);
            if range.is_empty() {
                continue;
            }
            for c in 0..d {
                buf.clear();
                buf.extend(range.clone().map(|e| ta.data()[e] * tv.data()[adj.targets[e] * d + c]));
                out[i * d + c] = order_free_sum(&mut buf);
            }
        }
        let t = Tensor::new(vec![n, d], out)?;
        Ok(self.push(
            t,
            Op::SegmentWeightedSum {
                alpha: alpha.0,
                v: v.0,
                adj: adj.clone(),
            },
            &[alpha.0, v.0],
        ))
    }

    /// Smallest per-row standard deviation seen by any layernorm on the
    /// tape, or infinity without one.
    pub fn min_layernorm_std(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::LayerNorm { inv_std, .. } => Some(inv_std.iter().map(|s| 1.0 / s).fold(f64::INFINITY, f64::min)),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.val(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    /// Runs [`Tape::backward`] and accumulates into the bound parameters.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            let (Some(id), Some(g)) = (&node.param, grads.grads[i].as_ref()) else {
                continue;
            };
            if let Some(p) = params.get_mut(id) {
                if p.tensor.requires_grad() {
                    p.tensor.accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], idx: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[idx].requires_grad {
            return None;
        }
        let n = self.nodes[idx].value.numel();
        Some(grads[idx].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if let Some(ga) = self.buf(grads, *a) {
                    matmul_into(g, tb.data(), ga, m, n, k, false, true, 1.0);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    matmul_into(ta.data(), g, gb, k, m, n, true, false, 1.0);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[1], out.shape()[0]);
                if let Some(ga) = self.buf(grads, *a) {
                    for x in 0..r {
                        for y in 0..c {
                            ga[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(self.nodes[i].op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                if let Some(ga) = self.buf(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.buf(grads, *b) {
                    let nb = gb.len();
                    for (j, v) in g.iter().enumerate() {
                        gb[j % nb] += sign * v;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let nb = tb.numel();
                if let Some(ga) = self.buf(grads, *a) {
                    for (j, v) in g.iter().enumerate() {
                        ga[j] += v * tb.data()[j % nb];
                    }
                }
                if let Some(gb) = self.buf(grads, *b) {
                    for (j, v) in g.iter().enumerate() {
                        gb[j % nb] += v * ta.data()[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.buf(grads, *a) {
                    for (x, v) in ga.iter_mut().zip(g) {
                        *x += c * v;
                    }
                }
            }
            Op::Silu(a) => {
                let x = &self.nodes[*a].value;
                if let Some(ga) = self.buf(grads, *a) {
                    for ((o, &xv), v) in ga.iter_mut().zip(x.data()).zip(g) {
                        let s = sigmoid(xv);
                        *o += v * (s + xv * s * (1.0 - s));
                    }
                }
            }
            Op::Relu(a) => {
                let x = &self.nodes[*a].value;
                if let Some(ga) = self.buf(grads, *a) {
                    for ((o, &xv), v) in ga.iter_mut().zip(x.data()).zip(g) {
                        if xv > 0.0 {
                            *o += v;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let y = out.data();
                if let Some(gx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for j in 0..inner {
                            let base = o * len * inner + j;
                            let dot: f64 = (0..len)
                                .map(|t| g[base + t * inner] * y[base + t * inner])
                                .sum();
                            for t in 0..len {
                                let p = base + t * inner;
                                gx[p] += y[p] * (g[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = out.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &inp in inputs {
                    let chunk = self.nodes[inp].value.shape()[*axis] * inner;
                    if let Some(gi) = self.buf(grads, inp) {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gi[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) = axis_split(self.nodes[*x].value.shape(), *axis);
                if let Some(gx) = self.buf(grads, *x) {
                    for o in 0..outer {
                        for t in 0..len {
                            for j in 0..inner {
                                gx[o * len * inner + t * inner + j] += g[o * inner + j] / len as f64;
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.buf(grads, *x) {
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = out.cols();
                let rows = out.rows();
                let gm = self.nodes[*gamma].value.data();
                if let Some(gg) = self.buf(grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                if let Some(gb) = self.buf(grads, *beta) {
                    for r in 0..rows {
                        add_into(gb, &g[r * n..(r + 1) * n]);
                    }
                }
                if let Some(gx) = self.buf(grads, *x) {
                    let nf = n as f64;
                    for r in 0..rows {
                        let gh: Vec<f64> = (0..n).map(|c| g[r * n + c] * gm[c]).collect();
                        let s1: f64 = gh.iter().sum();
                        let s2: f64 = (0..n).map(|c| gh[c] * xhat[r * n + c]).sum();
                        for c in 0..n {
                            gx[r * n + c] +=
                                inv_std[r] / nf * (nf * gh[c] - s1 - xhat[r * n + c] * s2);
                        }
                    }
                }
            }
            Op::CrossEntropy { p, targets } => {
                let tp = &self.nodes[*p].value;
                let classes = tp.cols();
                if let Some(gp) = self.buf(grads, *p) {
                    for (r, &t) in targets.iter().enumerate() {
                        let pv = tp.data()[r * classes + t];
                        if pv > CE_FLOOR {
                            gp[r * classes + t] -= g[0] / pv;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let cols = self.nodes[*x].value.cols();
                let w = out.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for r in 0..out.rows() {
                        add_into(
                            &mut gx[r * cols + start..r * cols + start + w],
                            &g[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let d = out.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut gx[src * d..(src + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::SegmentMean {
                x,
                adj,
                self_fallback,
            } => {
                let d = out.cols();
                if let Some(gx) = self.buf(grads, *x) {
                    for i in 0..adj.n_nodes() {
                        let nb = adj.neighbors(i);
                        let gi = &g[i * d..(i + 1) * d];
                        if nb.is_empty() {
                            if *self_fallback {
                                add_into(&mut gx[i * d..(i + 1) * d], gi);
                            }
                            continue;
                        }
                        let w = 1.0 / nb.len() as f64;
                        for &j in nb {
                            for c in 0..d {
                                gx[j * d + c] += w * gi[c];
                            }
                        }
                    }
                }
            }
            Op::EdgeDot { q, k, adj } => {
                let (tq, tk) = (&self.nodes[*q].value, &self.nodes[*k].value);
                let d = tq.cols();
                if let Some(gq) = self.buf(grads, *q) {
                    for i in 0..adj.n_nodes() {
                        for e in adj.edge_range(i) {
                            let j = adj.targets[e];
                            for c in 0..d {
                                gq[i * d + c] += g[e] * tk.data()[j * d + c];
                            }
                        }
                    }
                }
                if let Some(gk) = self.buf(grads, *k) {
                    for i in 0..adj.n_nodes() {
                        for e in adj.edge_range(i) {
                            let j = adj.targets[e];
                            for c in 0..d {
                                gk[j * d + c] += g[e] * tq.data()[i * d + c];
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax { s, adj } => {
                let y = out.data();
                if let Some(gs) = self.buf(grads, *s) {
                    for i in 0..adj.n_nodes() {
                        let r = adj.edge_range(i);
                        let dot: f64 = r.clone().map(|e| g[e] * y[e]).sum();
                        for e in r {
                            gs[e] += y[e] * (g[e] - dot);
                        }
                    }
                }
            }
            Op::SegmentWeightedSum { alpha, v, adj } => {
                let (ta, tv) = (&self.nodes[*alpha].value, &self.nodes[*v].value);
                let d = tv.cols();
                if let Some(ga) = self.buf(grads, *alpha) {
                    for i in 0..adj.n_nodes() {
                        for e in adj.edge_range(i) {
                            let j = adj.targets[e];
                            ga[e] += (0..d).map(|c| g[i * d + c] * tv.data()[j * d + c]).sum::<f64>();
                        }
                    }
                }
                if let Some(gv) = self.buf(grads, *v) {
                    for i in 0..adj.n_nodes() {
                        for e in adj.edge_range(i) {
                            let j = adj.targets[e];
                            for c in 0..d {
                                gv[j * d + c] += ta.data()[e] * g[i * d + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let p = tape.constant(t2(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let b = tape.constant(t2(2, 2, &[5.0, 6.0, 7.0, 8.0]));
        let out = tape.matmul(p, b).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::vector(vec![1000.0, 1000.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(Tensor::vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        for (got, want) in tape.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_over_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 2, &[0.0, 5.0, 0.0, 5.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![3.0, 3.0, 3.0]));
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.layernorm(c, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.silu(z);
        assert_eq!(tape.value(s).item(), 0.0);

        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0]));
        let cat = tape.concat(&[a, b], 0).unwrap();
        assert_eq!(tape.value(cat).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t2(2, 4, &[1.0, 2.0, 4.0, 9.0, -3.0, 0.5, 0.25, 8.0]));
        let g = tape.constant(Tensor::full(&[4], 1.0));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layernorm(x, g, b, 1e-12).unwrap();
        for r in 0..2 {
            let row = tape.value(y).row(r);
            let mu: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn broadcast_add_over_leading_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(Tensor::vector(vec![10.0, 20.0]));
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let bad = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(tape.add(a, bad).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let l = tape.cross_entropy_from_probs(p, &[0]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let p = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = tape.cross_entropy_from_probs(p, &[0]).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);

        let p = tape.constant(Tensor::vector(vec![0.25, 0.75]));
        let l = tape.cross_entropy_from_probs(p, &[1]).unwrap();
        assert!((tape.value(l).item() - 0.287_682_072_451_780_9).abs() < 1e-12);

        assert!(matches!(
            tape.cross_entropy_from_probs(p, &[2]),
            Err(Error::Index { index: 2, len: 2 })
        ));
    }

    #[test]
    fn cross_entropy_floor_keeps_loss_finite() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        let l = tape.cross_entropy_from_probs(p, &[1]).unwrap();
        assert!((tape.value(l).item() - (-CE_FLOOR.ln())).abs() < 1e-12);
    }

    #[test]
    fn backward_polynomial() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_softmax_cross_entropy_closed_form() {
        let z = vec![0.3, -1.2, 2.0, 0.7];
        let y = 2;
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(z.clone()).with_grad());
        let p = tape.softmax(x, 0).unwrap();
        let loss = tape.cross_entropy_from_probs(p, &[y]).unwrap();
        let g = tape.backward(loss).unwrap();
        let mut s = z.clone();
        softmax_in_place(&mut s);
        for (i, (gi, si)) in g.get(x).unwrap().iter().zip(&s).enumerate() {
            let want = si - if i == y { 1.0 } else { 0.0 };
            assert!((gi - want).abs() < 1e-14, "{gi} vs {want}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).with_grad());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_params() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&ps, "w").unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        tape.backward_into(loss, &mut ps).unwrap();
        tape.backward_into(loss, &mut ps).unwrap();
        assert_eq!(ps.tensor("w").unwrap().grad().unwrap(), &[4.0, 8.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        ps.set_trainable(false);
        let mut tape = Tape::new();
        let w = tape.param(&ps, "w").unwrap();
        let loss = tape.sum(w);
        assert!(!tape.requires_grad(loss));
        tape.backward_into(loss, &mut ps).unwrap();
        assert!(ps.tensor("w").unwrap().grad().is_none());
    }

    #[test]
    fn segment_mean_isolated_node_uses_self() {
        let adj = Arc::new(Csr::from_lists(&[vec![1], vec![0], vec![]]));
        let mut tape = Tape::new();
        let x = tape.constant(t2(3, 1, &[1.0, 3.0, 7.0]));
        let y = tape.segment_mean(x, &adj, true).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 1.0, 7.0]);
    }
}
