//! Reverse-mode differentiation over a flat tape of 2-D tensor ops.
//!
//! A forward pass appends nodes in topological order; `backward` walks the
//! tape in reverse and accumulates adjoints. Parameters enter the tape as
//! named leaves bound from a [`ParamStore`], so one tape can reuse a shared
//! layer many times and its gradient contributions sum.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::tensor::{bce, logistic, softplus, Tensor, BCE_CLAMP};
use crate::nn::ParamStore;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Gradients of a scalar loss with respect to named parameters.
pub type GradMap = BTreeMap<String, Tensor>;

enum Op {
    /// Constant input or named parameter leaf.
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// Elementwise product of same-shape matrices.
    Mul(usize, usize),
    /// Row-broadcast add: (M x N) + (1 x N).
    AddBias(usize, usize),
    Relu(usize),
    Logistic(usize),
    Softplus(usize),
    /// Horizontal concatenation of matrices with equal row counts.
    ConcatCols(Vec<usize>),
    /// Column-wise max over rows: M x N -> 1 x N. Ties route the adjoint to
    /// the lowest row index.
    RowsMax(usize),
    /// 1 x N -> M x N by repeating the row.
    BroadcastRows(usize),
    /// Copy of one row: (M x N, r) -> 1 x N.
    SelectRow(usize, usize),
    /// Vertical stack of 1 x N rows.
    StackRows(Vec<usize>),
    /// Convex combination sum(w_i z_i) / sum(w_i) over 1 x D items with
    /// 1 x 1 weights, summed in argument order.
    WeightedMean { items: Vec<usize>, weights: Vec<usize> },
    MulConst(usize, f64),
    AddConst(usize),
    MeanAll(usize),
    SumAll(usize),
    /// Mean binary cross entropy against constant labels.
    BceMean { pred: usize, labels: Tensor },
    /// Mean absolute error against a constant target.
    L1Mean { pred: usize, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Forward tape. Build one per training step or inference call.
pub struct Graph {
    nodes: Vec<Node>,
    param_nodes: BTreeMap<String, usize>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_nodes: BTreeMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Constant leaf. No gradient is reported for it.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Named parameter leaf bound from the store. Binding the same name
    /// twice returns the same node, so adjoints from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&idx) = self.param_nodes.get(name) {
            return NodeId(idx);
        }
        let t = store.get(name).clone();
        self.nodes.push(Node { value: t, op: Op::Leaf });
        let idx = self.nodes.len() - 1;
        self.param_nodes.insert(name.to_string(), idx);
        NodeId(idx)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value).expect("matmul shapes");
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(av.shape(), bv.shape(), "add shapes");
        let mut v = av.clone();
        v.add_in_place(bv);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        debug_assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let mut v = av.clone();
        for (o, &x) in v.data_mut().iter_mut().zip(bv.data()) {
            *o *= x;
        }
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        debug_assert_eq!(bv.rows(), 1, "bias is a row vector");
        debug_assert_eq!(xv.cols(), bv.cols(), "bias width");
        let mut v = xv.clone();
        for r in 0..v.rows() {
            for (o, &b) in v.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o += b;
            }
        }
        self.push(v, Op::AddBias(x.0, bias.0))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(|a| a.max(0.0));
        self.push(v, Op::Relu(x.0))
    }

    pub fn logistic(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(logistic);
        self.push(v, Op::Logistic(x.0))
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(softplus);
        self.push(v, Op::Softplus(x.0))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.nodes[parts[0].0].value.rows();
        let total: usize = parts.iter().map(|p| self.nodes[p.0].value.cols()).sum();
        let mut v = Tensor::zeros(rows, total);
        let mut at = 0;
        for p in parts {
            let pv = &self.nodes[p.0].value;
            debug_assert_eq!(pv.rows(), rows, "concat row counts");
            for r in 0..rows {
                v.row_mut(r)[at..at + pv.cols()].copy_from_slice(pv.row(r));
            }
            at += pv.cols();
        }
        self.push(v, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn rows_max(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        assert!(xv.rows() > 0, "rows_max of empty matrix");
        let mut v = Tensor::row_vector(xv.row(0));
        for r in 1..xv.rows() {
            for (o, &a) in v.row_mut(0).iter_mut().zip(xv.row(r)) {
                if a > *o {
                    *o = a;
                }
            }
        }
        self.push(v, Op::RowsMax(x.0))
    }

    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> NodeId {
        let xv = &self.nodes[x.0].value;
        debug_assert_eq!(xv.rows(), 1, "broadcast source is a row vector");
        let mut v = Tensor::zeros(rows, xv.cols());
        for r in 0..rows {
            v.row_mut(r).copy_from_slice(xv.row(0));
        }
        self.push(v, Op::BroadcastRows(x.0))
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let v = Tensor::row_vector(self.nodes[x.0].value.row(row));
        self.push(v, Op::SelectRow(x.0, row))
    }

    pub fn stack_rows(&mut self, rows: &[NodeId]) -> NodeId {
        assert!(!rows.is_empty(), "stack of nothing");
        let cols = self.nodes[rows[0].0].value.cols();
        let mut v = Tensor::zeros(rows.len(), cols);
        for (r, id) in rows.iter().enumerate() {
            let rv = &self.nodes[id.0].value;
            debug_assert_eq!(rv.shape(), (1, cols), "stacked rows share width");
            v.row_mut(r).copy_from_slice(rv.row(0));
        }
        self.push(v, Op::StackRows(rows.iter().map(|p| p.0).collect()))
    }

    /// Weighted mean of 1 x D items with scalar weights, summed in argument
    /// order. Weights must be positive for the convexity guarantee.
    pub fn weighted_mean(&mut self, items: &[NodeId], weights: &[NodeId]) -> NodeId {
        assert_eq!(items.len(), weights.len(), "one weight per item");
        assert!(!items.is_empty(), "weighted mean of nothing");
        let d = self.nodes[items[0].0].value.cols();
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for (it, wt) in items.iter().zip(weights) {
            let z = &self.nodes[it.0].value;
            let w = self.nodes[wt.0].value.item();
            debug_assert_eq!(z.shape(), (1, d), "item width");
            for (n, &zv) in num.iter_mut().zip(z.row(0)) {
                *n += w * zv;
            }
            den += w;
        }
        let v = Tensor::row_vector(&num.iter().map(|n| n / den).collect::<Vec<_>>());
        self.push(
            v,
            Op::WeightedMean {
                items: items.iter().map(|p| p.0).collect(),
                weights: weights.iter().map(|p| p.0).collect(),
            },
        )
    }

    pub fn mul_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x.0].value.map(|a| a * c);
        self.push(v, Op::MulConst(x.0, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x.0].value.map(|a| a + c);
        self.push(v, Op::AddConst(x.0))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x.0].value;
        let v = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        self.push(v, Op::MeanAll(x.0))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.nodes[x.0].value.data().iter().sum::<f64>());
        self.push(v, Op::SumAll(x.0))
    }

    /// Mean binary cross entropy of predictions in (0, 1) against constant
    /// {0, 1} labels. Predictions are clamped to [1e-7, 1 - 1e-7]; the
    /// backward pass evaluates the analytic derivative at the clamped value.
    pub fn bce_mean(&mut self, pred: NodeId, labels: &Tensor) -> NodeId {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.shape(), labels.shape(), "bce label shape");
        let total: f64 = pv.data().iter().zip(labels.data()).map(|(&s, &r)| bce(s, r)).sum();
        let v = Tensor::scalar(total / pv.len() as f64);
        self.push(v, Op::BceMean { pred: pred.0, labels: labels.clone() })
    }

    /// Mean absolute error against a constant target.
    pub fn l1_mean(&mut self, pred: NodeId, target: &Tensor) -> NodeId {
        let pv = &self.nodes[pred.0].value;
        assert_eq!(pv.shape(), target.shape(), "l1 target shape");
        let total: f64 =
            pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t).abs()).sum();
        let v = Tensor::scalar(total / pv.len() as f64);
        self.push(v, Op::L1Mean { pred: pred.0, target: target.clone() })
    }

    /// Reverse pass from a scalar loss. Returns gradients for every named
    /// parameter leaf on the tape.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap> {
        let lv = &self.nodes[loss.0].value;
        if lv.shape() != (1, 1) {
            return Err(Error::Numeric("backward from a non-scalar node".into()));
        }
        if !lv.item().is_finite() {
            return Err(Error::Numeric(format!("loss is not finite: {}", lv.item())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul(&self.nodes[*b].value.transpose())?;
                    let db = self.nodes[*a].value.transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let mut da = g.clone();
                    for (d, &x) in da.data_mut().iter_mut().zip(self.nodes[*b].value.data()) {
                        *d *= x;
                    }
                    let mut db = g;
                    for (d, &x) in db.data_mut().iter_mut().zip(self.nodes[*a].value.data()) {
                        *d *= x;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddBias(x, bias) => {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *x, g);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = g;
                    for (d, &a) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Logistic(x) => {
                    let yv = &self.nodes[idx].value;
                    let mut dx = g;
                    for (d, &s) in dx.data_mut().iter_mut().zip(yv.data()) {
                        *d *= s * (1.0 - s);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softplus(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = g;
                    for (d, &a) in dx.data_mut().iter_mut().zip(xv.data()) {
                        *d *= logistic(a);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let pc = self.nodes[*p].value.cols();
                        let mut dp = Tensor::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[at..at + pc]);
                        }
                        accumulate(&mut grads, *p, dp);
                        at += pc;
                    }
                }
                Op::RowsMax(x) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for c in 0..xv.cols() {
                        let mut best_r = 0;
                        let mut best = xv.get(0, c);
                        for r in 1..xv.rows() {
                            let a = xv.get(r, c);
                            if a > best {
                                best = a;
                                best_r = r;
                            }
                        }
                        dx.set(best_r, c, g.get(0, c));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BroadcastRows(x) => {
                    let mut dx = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &gv) in dx.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SelectRow(x, row) => {
                    let xv = &self.nodes[*x].value;
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    dx.row_mut(*row).copy_from_slice(g.row(0));
                    accumulate(&mut grads, *x, dx);
                }
                Op::StackRows(parts) => {
                    for (r, p) in parts.iter().enumerate() {
                        accumulate(&mut grads, *p, Tensor::row_vector(g.row(r)));
                    }
                }
                Op::WeightedMean { items, weights } => {
                    let out = &self.nodes[idx].value;
                    let den: f64 = weights.iter().map(|w| self.nodes[*w].value.item()).sum();
                    for (it, wt) in items.iter().zip(weights) {
                        let w = self.nodes[*wt].value.item();
                        let mut dz = g.clone();
                        dz.scale_in_place(w / den);
                        accumulate(&mut grads, *it, dz);
                        let z = &self.nodes[*it].value;
                        let dw: f64 = g
                            .row(0)
                            .iter()
                            .zip(z.row(0).iter().zip(out.row(0)))
                            .map(|(&gd, (&zd, &od))| gd * (zd - od) / den)
                            .sum();
                        accumulate(&mut grads, *wt, Tensor::scalar(dw));
                    }
                }
                Op::MulConst(x, c) => {
                    let mut dx = g;
                    dx.scale_in_place(*c);
                    accumulate(&mut grads, *x, dx);
                }
                Op::AddConst(x) => {
                    accumulate(&mut grads, *x, g);
                }
                Op::MeanAll(x) => {
                    let xv = &self.nodes[*x].value;
                    let scale = g.item() / xv.len() as f64;
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), scale));
                }
                Op::SumAll(x) => {
                    let xv = &self.nodes[*x].value;
                    accumulate(&mut grads, *x, Tensor::filled(xv.rows(), xv.cols(), g.item()));
                }
                Op::BceMean { pred, labels } => {
                    let pv = &self.nodes[*pred].value;
                    let scale = g.item() / pv.len() as f64;
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for ((d, &s), &r) in dp.data_mut().iter_mut().zip(pv.data()).zip(labels.data())
                    {
                        let sc = s.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        *d = scale * (-r / sc + (1.0 - r) / (1.0 - sc));
                    }
                    accumulate(&mut grads, *pred, dp);
                }
                Op::L1Mean { pred, target } => {
                    let pv = &self.nodes[*pred].value;
                    let scale = g.item() / pv.len() as f64;
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for ((d, &p), &t) in dp.data_mut().iter_mut().zip(pv.data()).zip(target.data())
                    {
                        *d = scale * (p - t).signum() * if p == t { 0.0 } else { 1.0 };
                    }
                    accumulate(&mut grads, *pred, dp);
                }
            }
        }

        let mut out = GradMap::new();
        for (name, &idx) in &self.param_nodes {
            let g = grads[idx]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[idx].value.rows(), self.nodes[idx].value.cols()));
            if !g.is_finite() {
                return Err(Error::Numeric(format!("gradient of `{name}` is not finite")));
            }
            out.insert(name.clone(), g);
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(acc) => acc.add_in_place(&g),
        slot => *slot = Some(g),
    }
}
