//! A small reverse-mode differentiation tape over 2-D [`Tensor`]s.
//!
//! Every trainable computation in the crate (location head, query
//! initialisation, key position embedding, decoder, prediction heads and
//! losses) is expressed as a sequence of graph operations, so one backward
//! sweep yields exact gradients for every named parameter.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    SinCos(NodeId, Vec<bool>),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    MaskedSoftmax(NodeId, Vec<bool>),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols(NodeId, usize, usize),
    SliceRows(NodeId, usize, usize),
    MeanRows(NodeId),
    Sum(NodeId),
    Focal {
        logits: NodeId,
        targets: Tensor,
        alpha: f64,
        gamma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Computation tape. Nodes are appended in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Logit clamp applied inside [`Graph::focal_loss`].
pub const FOCAL_LOGIT_CLAMP: f64 = 30.0;

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

/// Per-entry sigmoid focal loss and its derivative w.r.t. the logit.
pub(crate) fn focal_term(logit: f64, target: f64, alpha: f64, gamma: f64) -> (f64, f64) {
    let clamped = logit.clamp(-FOCAL_LOGIT_CLAMP, FOCAL_LOGIT_CLAMP);
    let live = if logit.abs() < FOCAL_LOGIT_CLAMP { 1.0 } else { 0.0 };
    let p = sigmoid(clamped);
    if target > 0.5 {
        let nll = softplus(-clamped);
        let w = (1.0 - p).powf(gamma);
        let loss = alpha * w * nll;
        let d = alpha * w * (-gamma * p * nll - (1.0 - p));
        (loss, d * live)
    } else {
        let nll = softplus(clamped);
        let w = p.powf(gamma);
        let loss = (1.0 - alpha) * w * nll;
        let d = (1.0 - alpha) * w * (gamma * (1.0 - p) * nll + p);
        (loss, d * live)
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1);
        v.data[0]
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        assert_eq!(value.shape.len(), 2, "graph values are 2-D");
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "add_row expects a single row");
        assert_eq!(av.cols(), rv.cols(), "add_row width");
        let cols = av.cols();
        let mut v = av.clone();
        for (i, x) in v.data.iter_mut().enumerate() {
            *x += rv.data[i % cols];
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scaled(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    /// Element-wise `sin`, or `cos` where `use_cos` is set for that column.
    pub fn sin_cos(&mut self, a: NodeId, use_cos: Vec<bool>) -> NodeId {
        let av = self.value(a);
        assert_eq!(av.cols(), use_cos.len(), "sin_cos column mask");
        let cols = av.cols();
        let data = av
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| if use_cos[i % cols] { x.cos() } else { x.sin() })
            .collect();
        let v = Tensor::matrix(av.rows(), cols, data);
        self.push(v, Op::SinCos(a, use_cos))
    }

    /// Row-wise layer normalisation with learned `1×n` scale and offset.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let mut normalized = Tensor::zeros(&[rows, cols]);
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            for c in 0..cols {
                let n = (row[c] - mean) * inv;
                normalized.data[r * cols + c] = n;
                out.data[r * cols + c] = g[c] * n + b[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        )
    }

    /// Row-wise softmax where `mask[r*cols + c] == false` excludes an entry.
    pub fn masked_softmax(&mut self, a: NodeId, mask: Vec<bool>) -> Result<NodeId> {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        if mask.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask has {} entries for a {rows}x{cols} score matrix",
                mask.len()
            )));
        }
        let mut out = Tensor::zeros(&[rows, cols]);
        for r in 0..rows {
            let row = av.row(r);
            let allowed = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(allowed)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::AllMasked { row: r });
            }
            let mut total = 0.0;
            for c in 0..cols {
                if allowed[c] {
                    let e = (row[c] - max).exp();
                    out.data[r * cols + c] = e;
                    total += e;
                }
            }
            for c in 0..cols {
                out.data[r * cols + c] /= total;
            }
        }
        Ok(self.push(out, Op::MaskedSoftmax(a, mask)))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[rows, total]);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row count");
            for r in 0..rows {
                out.data[r * total + offset..r * total + offset + pv.cols()]
                    .copy_from_slice(pv.row(r));
            }
            offset += pv.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows column count");
            data.extend_from_slice(&pv.data);
            rows += pv.rows();
        }
        self.push(Tensor::matrix(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(start <= end && end <= cols, "slice_cols range");
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&av.data[r * cols + start..r * cols + end]);
        }
        self.push(Tensor::matrix(rows, w, data), Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        let av = self.value(a);
        let cols = av.cols();
        assert!(start <= end && end <= av.rows(), "slice_rows range");
        let data = av.data[start * cols..end * cols].to_vec();
        self.push(Tensor::matrix(end - start, cols, data), Op::SliceRows(a, start, end))
    }

    /// Column means, giving a `1×n` row.
    pub fn mean_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(av.row(r)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        self.push(Tensor::row_vector(out), Op::MeanRows(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::matrix(1, 1, vec![s]), Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean sigmoid focal loss over all entries of `logits`.
    pub fn focal_loss(&mut self, logits: NodeId, targets: Tensor, alpha: f64, gamma: f64) -> NodeId {
        let lv = self.value(logits);
        assert_eq!(lv.shape, targets.shape, "focal targets shape");
        let n = lv.len().max(1) as f64;
        let total: f64 = lv
            .data
            .iter()
            .zip(&targets.data)
            .map(|(&x, &t)| focal_term(x, t, alpha, gamma).0)
            .sum();
        self.push(
            Tensor::matrix(1, 1, vec![total / n]),
            Op::Focal {
                logits,
                targets,
                alpha,
                gamma,
            },
        )
    }

    /// `x·w + b` with `b` a `1×n` row.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::matrix(1, 1, vec![1.0]));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul_t(self.value(*b));
                    let gb = self.value(*a).t_matmul(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.matmul(self.value(*b));
                    let gb = g.t_matmul(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, g.scaled(-1.0));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(self.value(*b), |x, y| x * y);
                    let gb = g.zip_map(self.value(*a), |x, y| x * y);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let cols = g.cols();
                    let mut gr = vec![0.0; cols];
                    for (i, v) in g.data.iter().enumerate() {
                        gr[i % cols] += v;
                    }
                    acc(&mut grads, *row, Tensor::row_vector(gr));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.scaled(*s)),
                Op::Relu(a) => {
                    let ga = g.zip_map(self.value(*a), |d, x| if x > 0.0 { d } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, |d, y| d * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let ga = g.zip_map(self.value(*a), |d, x| {
                        if x > 0.0 {
                            d
                        } else if x < 0.0 {
                            -d
                        } else {
                            0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SinCos(a, use_cos) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let data = g
                        .data
                        .iter()
                        .zip(&av.data)
                        .enumerate()
                        .map(|(i, (&d, &x))| {
                            if use_cos[i % cols] {
                                -d * x.sin()
                            } else {
                                d * x.cos()
                            }
                        })
                        .collect();
                    acc(&mut grads, *a, Tensor::matrix(av.rows(), cols, data));
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let (rows, cols) = (g.rows(), g.cols());
                    let gam = &self.value(*gamma).data;
                    let mut gx = Tensor::zeros(&[rows, cols]);
                    let mut gg = vec![0.0; cols];
                    let mut gb = vec![0.0; cols];
                    let n = cols as f64;
                    for r in 0..rows {
                        let dy = g.row(r);
                        let xh = normalized.row(r);
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let dxh = dy[c] * gam[c];
                            sum_d += dxh;
                            sum_dx += dxh * xh[c];
                            gg[c] += dy[c] * xh[c];
                            gb[c] += dy[c];
                        }
                        for c in 0..cols {
                            let dxh = dy[c] * gam[c];
                            gx.data[r * cols + c] =
                                inv_std[r] / n * (n * dxh - sum_d - xh[c] * sum_dx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, Tensor::row_vector(gg));
                    acc(&mut grads, *beta, Tensor::row_vector(gb));
                }
                Op::MaskedSoftmax(a, mask) => {
                    let y = &node.value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut ga = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        let yr = y.row(r);
                        let dr = g.row(r);
                        let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            if mask[r * cols + c] {
                                ga.data[r * cols + c] = yr[c] * (dr[c] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = (g.rows(), g.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let mut data = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &g.data[r * total + offset..r * total + offset + w],
                            );
                        }
                        acc(&mut grads, p, Tensor::matrix(rows, w, data));
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).rows();
                        let data = g.data[offset * cols..(offset + h) * cols].to_vec();
                        acc(&mut grads, p, Tensor::matrix(h, cols, data));
                        offset += h;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let av = self.value(*a);
                    let (rows, cols) = (av.rows(), av.cols());
                    let w = end - start;
                    let mut ga = Tensor::zeros(&[rows, cols]);
                    for r in 0..rows {
                        ga.data[r * cols + start..r * cols + end]
                            .copy_from_slice(&g.data[r * w..(r + 1) * w]);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let av = self.value(*a);
                    let cols = av.cols();
                    let mut ga = Tensor::zeros(&av.shape);
                    ga.data[start * cols..end * cols].copy_from_slice(&g.data);
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let rows = av.rows();
                    let cols = av.cols();
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        data.extend(g.data.iter().map(|v| v / rows as f64));
                    }
                    acc(&mut grads, *a, Tensor::matrix(rows, cols, data));
                }
                Op::Sum(a) => {
                    let shape = self.value(*a).shape.clone();
                    acc(&mut grads, *a, Tensor::filled(&shape, g.data[0]));
                }
                Op::Focal {
                    logits,
                    targets,
                    alpha,
                    gamma,
                } => {
                    let lv = self.value(*logits);
                    let n = lv.len().max(1) as f64;
                    let up = g.data[0] / n;
                    let data = lv
                        .data
                        .iter()
                        .zip(&targets.data)
                        .map(|(&x, &t)| focal_term(x, t, *alpha, *gamma).1 * up)
                        .collect();
                    acc(
                        &mut grads,
                        *logits,
                        Tensor {
                            shape: lv.shape.clone(),
                            data,
                        },
                    );
                }
            }
            grads[id] = Some(g);
        }
        Gradients { grads }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, `None` when the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    /// Gradients keyed by parameter name, zero-filled where the root does not
    /// depend on a parameter.
    pub fn by_name(&self, graph: &Graph, bound: &BTreeMap<String, NodeId>) -> BTreeMap<String, Tensor> {
        bound
            .iter()
            .map(|(name, &id)| {
                let g = self
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&graph.value(id).shape));
                (name.clone(), g)
            })
            .collect()
    }
}
