//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] records operations on `T × C` matrices (rows are time steps)
//! as they execute. [`Graph::backward`] walks the tape in reverse and returns
//! the gradient of a scalar root with respect to every trainable parameter
//! that took part in the computation. Parameters that are frozen enter the
//! graph as constants, so no gradient work is spent on them.
//!
//! The operation set is exactly what the acoustic models need: affine maps,
//! elementwise arithmetic and activations, column slicing and concatenation,
//! whole-sequence LSTM recurrences, row softmax and frame cross-entropy.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::layers::{lstm_sequence, lstm_sequence_backward, LstmTrace};
use crate::tensor::{ParamStore, Tensor};

pub type NodeId = usize;

enum Op {
    Constant,
    Param(String),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    AddRow { x: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize },
    Lstm { x: NodeId, wx: NodeId, wh: NodeId, b: NodeId, trace: Box<LstmTrace> },
    SoftmaxRows(NodeId),
    MeanRows(NodeId),
    BroadcastRows(NodeId),
    CrossEntropy { logits: NodeId, labels: Vec<usize>, scale: f64, probs: Vec<f64> },
    Sum(Vec<NodeId>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    tag: Option<String>,
}

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Vec<f64>>;

pub struct Graph<'a> {
    store: &'a ParamStore,
    trainable: &'a dyn Fn(&str) -> bool,
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
}

fn all_trainable(_: &str) -> bool {
    true
}

fn no_params(_: &str) -> bool {
    false
}

fn shape_err(op: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::config(format!("{op}: incompatible shapes {:?} and {:?}", a.dims(), b.dims()))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::matrix(rows, cols, data).expect("internal shape")
}

/// Row softmax with max subtraction.
pub(crate) fn softmax_row(z: &[f64], out: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - m).exp();
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

impl<'a> Graph<'a> {
    /// Graph whose parameters all require gradients.
    pub fn new(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, &all_trainable)
    }

    /// Graph for inference: parameters are constants and nothing is differentiated.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::with_trainable(store, &no_params)
    }

    pub fn with_trainable(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Graph { store, trainable, nodes: Vec::new(), params: HashMap::new() }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad, tag: None });
        self.nodes.len() - 1
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Labels a node (typically a layer output) for divergence reports.
    pub fn tag(&mut self, id: NodeId, label: impl Into<String>) {
        self.nodes[id].tag = Some(label.into());
    }

    /// First tagged node, in execution order, holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.nodes
            .iter()
            .filter(|n| n.tag.is_some())
            .find(|n| !n.value.is_finite())
            .and_then(|n| n.tag.as_deref())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let value = if value.dims().len() == 1 { mat(1, value.len(), value.into_data()) } else { value };
        self.push(value, Op::Constant, false)
    }

    /// Copies a node's value into a constant, cutting gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.clone();
        self.push(v, Op::Constant, false)
    }

    /// Leaf for a stored parameter; repeated requests share one node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let t = self.store.get(name)?;
        let mut value = t.clone();
        value.clear_grad();
        let needs = (self.trainable)(name);
        let id = self.push(value, Op::Param(name.to_string()), needs);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x Wᵀ + b` for `x: T×In`, `W: Out×In`, `b: Out`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        if wv.dims().len() != 2 || xv.cols() != wv.cols() {
            return Err(shape_err("linear", xv, wv));
        }
        let (t, n_in, n_out) = (xv.rows(), xv.cols(), wv.rows());
        let mut out = vec![0.0; t * n_out];
        if let Some(b) = b {
            let bv = &self.nodes[b].value;
            if bv.len() != n_out {
                return Err(shape_err("linear bias", wv, bv));
            }
            for row in out.chunks_mut(n_out) {
                row.copy_from_slice(bv.data());
            }
        }
        let (xd, wd) = (xv.data(), wv.data());
        for r in 0..t {
            let xr = &xd[r * n_in..(r + 1) * n_in];
            let or = &mut out[r * n_out..(r + 1) * n_out];
            for (o, wr) in or.iter_mut().zip(wd.chunks(n_in)) {
                *o += dot(xr, wr);
            }
        }
        let mut ids = vec![x, w];
        ids.extend(b);
        let ng = self.ng(&ids);
        Ok(self.push(mat(t, n_out, out), Op::Linear { x, w, b }, ng))
    }

    /// Adds a bias vector to every row.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, bv) = (&self.nodes[x].value, &self.nodes[b].value);
        if xv.cols() != bv.len() {
            return Err(shape_err("add_row", xv, bv));
        }
        let c = xv.cols();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
        }
        let ng = self.ng(&[x, b]);
        Ok(self.push(mat(xv.rows(), c, out), Op::AddRow { x, b }, ng))
    }

    fn zip_same(&self, op: &str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(mat(av.rows(), av.cols(), data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    fn map(&self, x: NodeId, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = &self.nodes[x].value;
        mat(xv.rows(), xv.cols(), xv.data().iter().map(|&v| f(v)).collect())
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, sigmoid);
        let ng = self.ng(&[x]);
        self.push(v, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.map(x, f64::tanh);
        let ng = self.ng(&[x]);
        self.push(v, Op::Tanh(x), ng)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.rows() != bv.rows() {
            return Err(shape_err("concat", av, bv));
        }
        let (t, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut out = Vec::with_capacity(t * (ca + cb));
        for r in 0..t {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(mat(t, ca + cb, out), Op::Concat(a, b), ng))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if len == 0 || start + len > xv.cols() {
            return Err(Error::config(format!(
                "slice_cols {start}..{} out of range for {} columns",
                start + len,
                xv.cols()
            )));
        }
        let t = xv.rows();
        let mut out = Vec::with_capacity(t * len);
        for r in 0..t {
            out.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(mat(t, len, out), Op::SliceCols { x, start }, ng))
    }

    /// Runs an LSTM over every row of `x`; `reverse` processes rows last to first.
    /// Output row `t` is the hidden state after consuming input row `t`.
    pub fn lstm(&mut self, x: NodeId, wx: NodeId, wh: NodeId, b: NodeId, reverse: bool) -> Result<NodeId> {
        let trace = lstm_sequence(
            &self.nodes[x].value,
            &self.nodes[wx].value,
            &self.nodes[wh].value,
            &self.nodes[b].value,
            reverse,
        )?;
        let out = trace.hidden_states();
        let ng = self.ng(&[x, wx, wh, b]);
        Ok(self.push(out, Op::Lstm { x, wx, wh, b, trace: Box::new(trace) }, ng))
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (t, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; t * c];
        for r in 0..t {
            softmax_row(xv.row(r), &mut out[r * c..(r + 1) * c]);
        }
        let ng = self.ng(&[x]);
        self.push(mat(t, c, out), Op::SoftmaxRows(x), ng)
    }

    /// Column means as a `1 × C` matrix.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let (t, c) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; c];
        for r in 0..t {
            out.iter_mut().zip(xv.row(r)).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= t as f64);
        let ng = self.ng(&[x]);
        self.push(mat(1, c, out), Op::MeanRows(x), ng)
    }

    /// Repeats a `1 × C` row `rows` times.
    pub fn broadcast_rows(&mut self, x: NodeId, rows: usize) -> Result<NodeId> {
        let xv = &self.nodes[x].value;
        if xv.rows() != 1 || rows == 0 {
            return Err(Error::config("broadcast_rows needs a single row and rows > 0"));
        }
        let data: Vec<f64> = (0..rows).flat_map(|_| xv.data().iter().copied()).collect();
        let c = xv.cols();
        let ng = self.ng(&[x]);
        Ok(self.push(mat(rows, c, data), Op::BroadcastRows(x), ng))
    }

    /// `scale · Σ_t −ln softmax(logits_t)[labels_t]` as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize], scale: f64) -> Result<NodeId> {
        let lv = &self.nodes[logits].value;
        let (t, k) = (lv.rows(), lv.cols());
        if labels.len() != t {
            return Err(Error::config(format!("{} labels for {t} frames", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::config(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![0.0; t * k];
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let z = lv.row(r);
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - z[y];
            softmax_row(z, &mut probs[r * k..(r + 1) * k]);
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            mat(1, 1, vec![scale * loss]),
            Op::CrossEntropy { logits, labels: labels.to_vec(), scale, probs },
            ng,
        ))
    }

    /// Sum of equally shaped nodes.
    pub fn sum(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let first = ids.first().ok_or_else(|| Error::config("sum of no nodes"))?;
        let mut acc = self.nodes[*first].value.clone();
        for &i in &ids[1..] {
            let v = &self.nodes[i].value;
            if v.dims() != acc.dims() {
                return Err(shape_err("sum", &acc, v));
            }
            acc.data_mut().iter_mut().zip(v.data()).for_each(|(a, b)| *a += b);
        }
        let ng = self.ng(ids);
        Ok(self.push(acc, Op::Sum(ids.to_vec()), ng))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id].value.data()[0]
    }

    /// Gradients of the `1 × 1` node `root` with respect to trainable parameters.
    pub fn backward(&self, root: NodeId) -> Result<ParamGrads> {
        if self.nodes[root].value.len() != 1 {
            return Err(Error::config("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(vec![1.0]);
        let mut out = ParamGrads::new();

        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => {
                    out.insert(name.clone(), g);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (t, n_in, n_out) = (xv.rows(), xv.cols(), wv.rows());
                    if self.nodes[*x].needs_grad {
                        let mut dx = vec![0.0; t * n_in];
                        for r in 0..t {
                            let dxr = &mut dx[r * n_in..(r + 1) * n_in];
                            for (o, wr) in wv.data().chunks(n_in).enumerate() {
                                axpy(g[r * n_out + o], wr, dxr);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[*w].needs_grad {
                        let mut dw = vec![0.0; n_out * n_in];
                        for r in 0..t {
                            let xr = xv.row(r);
                            for (o, dwr) in dw.chunks_mut(n_in).enumerate() {
                                axpy(g[r * n_out + o], xr, dwr);
                            }
                        }
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b {
                        if self.nodes[*b].needs_grad {
                            accumulate(&mut grads, *b, col_sums(&g, n_out));
                        }
                    }
                }
                Op::AddRow { x, b } => {
                    let c = self.nodes[*x].value.cols();
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, col_sums(&g, c));
                    }
                    if self.nodes[*x].needs_grad {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, g.iter().zip(bv).map(|(g, y)| g * y).collect());
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, g.iter().zip(av).map(|(g, x)| g * x).collect());
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let dx = g.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    let dx = g.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(a, b) => {
                    let (ca, cb) = (self.nodes[*a].value.cols(), self.nodes[*b].value.cols());
                    let (mut da, mut db) = (Vec::new(), Vec::new());
                    for row in g.chunks(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    if self.nodes[*a].needs_grad {
                        accumulate(&mut grads, *a, da);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::SliceCols { x, start } => {
                    let c = self.nodes[*x].value.cols();
                    let len = node.value.cols();
                    let mut dx = vec![0.0; self.nodes[*x].value.len()];
                    for (drow, grow) in dx.chunks_mut(c).zip(g.chunks(len)) {
                        drow[*start..start + len].copy_from_slice(grow);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Lstm { x, wx, wh, b, trace } => {
                    let lg = lstm_sequence_backward(
                        trace,
                        &self.nodes[*x].value,
                        &self.nodes[*wx].value,
                        &self.nodes[*wh].value,
                        &g,
                        self.nodes[*x].needs_grad,
                    );
                    if let Some(dx) = lg.dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[*wx].needs_grad {
                        accumulate(&mut grads, *wx, lg.dwx);
                    }
                    if self.nodes[*wh].needs_grad {
                        accumulate(&mut grads, *wh, lg.dwh);
                    }
                    if self.nodes[*b].needs_grad {
                        accumulate(&mut grads, *b, lg.db);
                    }
                }
                Op::SoftmaxRows(x) => {
                    let c = node.value.cols();
                    let mut dx = vec![0.0; g.len()];
                    for ((dr, gr), pr) in dx.chunks_mut(c).zip(g.chunks(c)).zip(node.value.data().chunks(c)) {
                        let inner = dot(gr, pr);
                        for ((d, gv), p) in dr.iter_mut().zip(gr).zip(pr) {
                            *d = p * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::MeanRows(x) => {
                    let t = self.nodes[*x].value.rows();
                    let dx: Vec<f64> = (0..t).flat_map(|_| g.iter().map(|v| v / t as f64)).collect();
                    accumulate(&mut grads, *x, dx);
                }
                Op::BroadcastRows(x) => {
                    let c = node.value.cols();
                    accumulate(&mut grads, *x, col_sums(&g, c));
                }
                Op::CrossEntropy { logits, labels, scale, probs } => {
                    let k = self.nodes[*logits].value.cols();
                    let s = g[0] * scale;
                    let mut dz: Vec<f64> = probs.iter().map(|p| s * p).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        dz[r * k + y] -= s;
                    }
                    accumulate(&mut grads, *logits, dz);
                }
                Op::Sum(ids) => {
                    for &i in ids {
                        if self.nodes[i].needs_grad {
                            accumulate(&mut grads, i, g.clone());
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn col_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in g.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha · x`
#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, t) in entries {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    /// Central differences of `f` around every entry of parameter `name`.
    fn numeric(s: &ParamStore, name: &str, f: &dyn Fn(&ParamStore) -> f64) -> Vec<f64> {
        let eps = 1e-6;
        let n = s.get(name).unwrap().len();
        (0..n)
            .map(|i| {
                let mut p = s.clone();
                p.get_mut(name).unwrap().data_mut()[i] += eps;
                let up = f(&p);
                let mut m = s.clone();
                m.get_mut(name).unwrap().data_mut()[i] -= eps;
                (up - f(&m)) / (2.0 * eps)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let s = store(&[
            ("a", Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 0.9, -0.2, 0.5]).unwrap()),
            ("w", Tensor::matrix(3, 3, vec![0.2, -0.1, 0.4, 0.3, 0.8, -0.5, -0.6, 0.1, 0.2]).unwrap()),
            ("b", Tensor::vector(vec![0.05, -0.1, 0.2]).unwrap()),
        ]);
        let build = |s: &ParamStore| -> (f64, ParamGrads) {
            let mut g = Graph::new(s);
            let a = g.param("a").unwrap();
            let w = g.param("w").unwrap();
            let b = g.param("b").unwrap();
            let l = g.linear(a, w, Some(b)).unwrap();
            let sg = g.sigmoid(l);
            let th = g.tanh(a);
            let m = g.mul(sg, th).unwrap();
            let ar = g.add_row(m, b).unwrap();
            let c = g.concat(ar, a).unwrap();
            let sl = g.slice_cols(c, 1, 4).unwrap();
            let sm = g.softmax_rows(sl);
            let mean = g.mean_rows(sm);
            let bc = g.broadcast_rows(mean, 2).unwrap();
            let mixed = g.add(bc, sl).unwrap();
            let ce = g.cross_entropy(mixed, &[1, 3], 0.5).unwrap();
            let ce2 = g.cross_entropy(l, &[0, 2], 0.25).unwrap();
            let root = g.sum(&[ce, ce2]).unwrap();
            (g.scalar(root), g.backward(root).unwrap())
        };
        let (_, grads) = build(&s);
        for name in ["a", "w", "b"] {
            let num = numeric(&s, name, &|p| build(p).0);
            assert_close(&grads[name], &num, 1e-7);
        }
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let s = store(&[
            ("x", Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap()),
            ("w", Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()),
        ]);
        let only_w = |n: &str| n == "w";
        let mut g = Graph::with_trainable(&s, &only_w);
        let x = g.param("x").unwrap();
        let w = g.param("w").unwrap();
        let l = g.linear(x, w, None).unwrap();
        let ce = g.cross_entropy(l, &[0], 1.0).unwrap();
        let grads = g.backward(ce).unwrap();
        assert!(grads.contains_key("w"));
        assert!(!grads.contains_key("x"));
    }

    #[test]
    fn detach_blocks_gradient() {
        let s = store(&[("w", Tensor::matrix(1, 2, vec![0.3, -0.7]).unwrap())]);
        let mut g = Graph::new(&s);
        let w = g.param("w").unwrap();
        let d = g.detach(w);
        let ce = g.cross_entropy(d, &[1], 1.0).unwrap();
        assert!(g.backward(ce).unwrap().is_empty());
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let z = g.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(g.cross_entropy(z, &[0], 1.0).is_err());
        assert!(g.cross_entropy(z, &[0, 3], 1.0).is_err());
        let ok = g.cross_entropy(z, &[0, 2], 1.0).unwrap();
        assert!((g.scalar(ok) - 2.0 * 3f64.ln()).abs() < 1e-12);
    }
}
