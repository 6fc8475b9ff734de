//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order. Because inputs
//! always precede outputs on the tape, a single reverse sweep visits each
//! node after all of its consumers, which is all reverse-mode needs.
//!
//! Gradients of leaf nodes accumulate across [`Graph::backward`] calls until
//! [`Graph::zero_grad`]; intermediate gradients live only for one sweep.

use std::collections::HashMap;

use crate::attention::{self, AttentionDims};
use crate::error::{NumericsError, Result};
use crate::gemm::{gemm, View, ViewMut};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a user-supplied operation:
/// `(input values, output value, upstream grad) -> grad per input`.
pub type CustomBackward = dyn Fn(&[&[f64]], &[f64], &[f64]) -> Vec<Vec<f64>>;

pub(crate) enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    ScaleBy { a: Var, s: Var, idx: usize },
    Sum { a: Var },
    MeanRows { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    Reshape { a: Var },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<f64> },
    Custom { inputs: Vec<Var>, backward: Box<CustomBackward> },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub requires_grad: bool,
    pub op: Op,
    pub param: Option<usize>,
}

impl Node {
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }
}

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: HashMap<usize, Var>,
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

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf holding a copy of `t`; differentiable iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Records the parameter `key` once per graph; later calls return the same node.
    pub fn param(&mut self, key: usize, t: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.input(t);
        self.nodes[v.0].param = Some(key);
        self.params.insert(key, v);
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is valid")
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Accumulated gradient of a leaf node, if any reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(Vec::as_slice)
    }

    /// Accumulated gradients keyed by the `key` passed to [`Graph::param`], in key order.
    pub fn param_grads(&self) -> Vec<(usize, &[f64])> {
        let mut out: Vec<_> = self
            .params
            .iter()
            .filter_map(|(&key, v)| self.grad(*v).map(|g| (key, g)))
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Reverse sweep from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Like [`Graph::backward`] with the seed gradient set to `seed` instead of 1.
    pub fn backward_scaled(&mut self, loss: Var, seed: f64) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.shape
            )));
        }
        if !node.requires_grad {
            return Err(NumericsError::Contract(
                "loss does not depend on any tensor that requires grad".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![seed]);
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                leaves.push((i, g));
            } else {
                self.backprop(i, &g, &mut grads);
            }
        }
        for (i, g) in leaves {
            match self.leaf_grads.get_mut(&i) {
                Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.leaf_grads.insert(i, g);
                }
            }
        }
        Ok(())
    }

    fn backprop(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        // Adds into the gradient buffer of `v` when it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[v.0];
            if n.requires_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
                f(buf);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                let m = na.rows();
                let k = na.cols();
                let n = node.cols();
                acc(*a, &mut |da| {
                    let bt = if *trans_b { View::rm(&nb.value, k) } else { View::tr(&nb.value, n) };
                    gemm(m, n, k, View::rm(g, n), bt, 1.0, ViewMut::rm(da, k));
                });
                acc(*b, &mut |db| {
                    if *trans_b {
                        gemm(n, m, k, View::tr(g, n), View::rm(&na.value, k), 1.0, ViewMut::rm(db, k));
                    } else {
                        gemm(k, m, n, View::tr(&na.value, k), View::rm(g, n), 1.0, ViewMut::rm(db, n));
                    }
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |da| add_into(da, g));
                acc(*b, &mut |db| add_into(db, g));
            }
            Op::AddRow { a, bias } => {
                acc(*a, &mut |da| add_into(da, g));
                let n = node.cols();
                acc(*bias, &mut |db| {
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                acc(*a, &mut |da| {
                    for ((d, &gg), &y) in da.iter_mut().zip(g).zip(vb) {
                        *d += gg * y;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gg), &x) in db.iter_mut().zip(g).zip(va) {
                        *d += gg * x;
                    }
                });
            }
            Op::Scale { a, c } => {
                acc(*a, &mut |da| {
                    for (d, &gg) in da.iter_mut().zip(g) {
                        *d += gg * c;
                    }
                });
            }
            Op::ScaleBy { a, s, idx } => {
                let sv = nodes[s.0].value[*idx];
                let va = &nodes[a.0].value;
                acc(*a, &mut |da| {
                    for (d, &gg) in da.iter_mut().zip(g) {
                        *d += gg * sv;
                    }
                });
                acc(*s, &mut |ds| {
                    ds[*idx] += g.iter().zip(va).map(|(x, y)| x * y).sum::<f64>();
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::MeanRows { a } => {
                let m = nodes[a.0].rows() as f64;
                let n = node.value.len();
                acc(*a, &mut |da| {
                    for row in da.chunks_mut(n) {
                        for (d, &gg) in row.iter_mut().zip(g) {
                            *d += gg / m;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let n = node.cols();
                acc(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(node.value.chunks(n)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(x, y)| x * y).sum();
                        for ((d, &gg), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gg - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = node.cols();
                let gam = &nodes[gamma.0].value;
                acc(*x, &mut |dx| {
                    for (r, ((drow, grow), xrow)) in
                        dx.chunks_mut(n).zip(g.chunks(n)).zip(xhat.chunks(n)).enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..n {
                            let dxh = grow[j] * gam[j];
                            mean_d += dxh;
                            mean_dx += dxh * xrow[j];
                        }
                        mean_d /= n as f64;
                        mean_dx /= n as f64;
                        for j in 0..n {
                            let dxh = grow[j] * gam[j];
                            drow[j] += rstd[r] * (dxh - mean_d - xrow[j] * mean_dx);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (grow, xrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += grow[j] * xrow[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for grow in g.chunks(n) {
                        add_into(db, grow);
                    }
                });
            }
            Op::Gelu { a } => {
                let va = &nodes[a.0].value;
                acc(*a, &mut |da| {
                    for ((d, &gg), &x) in da.iter_mut().zip(g).zip(va) {
                        *d += gg * crate::ops::gelu_grad(x);
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let n = node.cols();
                acc(*table, &mut |dt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * n..(id + 1) * n], &g[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = nodes[logits.0].cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |dl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = t else { continue };
                        let row = &mut dl[r * v..(r + 1) * v];
                        for (d, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *d += scale * p;
                        }
                        row[*t] -= scale;
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |dp| add_into(dp, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows { a, start } => {
                let n = node.cols();
                let off = start * n;
                acc(*a, &mut |da| add_into(&mut da[off..off + g.len()], g));
            }
            Op::Reshape { a } => {
                acc(*a, &mut |da| add_into(da, g));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (nq, nk) = (nodes[q.0].rows(), nodes[k.0].rows());
                let dims = AttentionDims::new(nq, nk, node.cols(), *heads).expect("validated in forward");
                let ag = attention::backward(
                    &dims,
                    &nodes[q.0].value,
                    &nodes[k.0].value,
                    &nodes[v.0].value,
                    probs,
                    g,
                );
                acc(*q, &mut |d| add_into(d, &ag.dq));
                acc(*k, &mut |d| add_into(d, &ag.dk));
                acc(*v, &mut |d| add_into(d, &ag.dv));
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&[f64]> = inputs.iter().map(|v| nodes[v.0].value.as_slice()).collect();
                let gs = backward(&values, &node.value, g);
                for (v, gi) in inputs.iter().zip(gs) {
                    acc(*v, &mut |d| add_into(d, &gi));
                }
            }
        }
    }
}

pub(crate) fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
