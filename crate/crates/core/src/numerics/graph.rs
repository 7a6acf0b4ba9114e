//! Dynamic reverse-mode graph.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so insertion order is already a topological order and
//! [`Graph::backward`] is a single reverse sweep. Parameters enter the graph by
//! reference, which lets many graphs share one immutable [`ParamStore`] from
//! different threads.
//!
//! Structural misuse inside the library (mismatched matmul extents and the
//! like) panics; conditions a caller can trigger with valid types, such as
//! non-finite logits or backward from a non-scalar, return [`Error`].

use std::collections::HashMap;

use super::kernels;
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Identity of a node within one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Value<'_> {
    fn tensor(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'p> {
    op: Op,
    value: Value<'p>,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    params: HashMap<ParamId, Var>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node {
            op,
            value: Value::Owned(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.tensor()
    }

    /// Constant leaf; receives a gradient but maps to no parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Input, t)
    }

    /// Parameter leaf. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &'p ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            op: Op::Param,
            value: Value::Borrowed(store.get(id)),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    fn dims2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        assert_eq!(k, k2, "matmul inner extents differ: [{m},{k}] x [{k2},{n}]");
        let mut out = vec![0.0; m * n];
        kernels::matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out).unwrap())
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        assert_eq!(k, k2, "matmul_nt inner extents differ: [{m},{k}] x [{n},{k2}]^T");
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Op::MatMulNT(a, b), Tensor::new(vec![m, n], out).unwrap())
    }

    /// Elementwise sum. `b` may match `a` exactly or be a single row `[1, n]`
    /// broadcast down the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        let out: Vec<f64> = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect()
        } else {
            assert!(
                tb.rank() == ta.rank() && tb.rows() == 1 && tb.cols() == ta.cols(),
                "add: cannot broadcast {:?} onto {:?}",
                tb.shape(),
                ta.shape()
            );
            let n = ta.cols();
            ta.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + tb.data()[i % n])
                .collect()
        };
        let shape = ta.shape().to_vec();
        self.push(Op::Add(a, b), Tensor::new(shape, out).unwrap())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let ta = self.value(a);
        let tb = self.value(b);
        assert_eq!(ta.shape(), tb.shape(), "mul: shapes differ");
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Mul(a, b), Tensor::new(shape, out).unwrap())
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * c).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Scale(a, c), Tensor::new(shape, out).unwrap())
    }

    /// tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| kernels::gelu(x)).collect();
        let shape = ta.shape().to_vec();
        self.push(Op::Gelu(a), Tensor::new(shape, out).unwrap())
    }

    /// Row-wise layer normalization with affine `[1, n]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (m, n) = self.dims2(x);
        assert_eq!(self.value(gamma).len(), n, "layer_norm gain width");
        assert_eq!(self.value(beta).len(), n, "layer_norm bias width");
        let tx = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &tx[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let shape = self.value(x).shape().to_vec();
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            Tensor::new(shape, out).unwrap(),
        )
    }

    /// Row softmax. With `causal`, row `r` only spans columns `0..=r` and the
    /// masked entries are exact zeros.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Var {
        let (m, n) = self.dims2(x);
        let tx = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let valid = if causal { (r + 1).min(n) } else { n };
            kernels::softmax_prefix(&tx[r * n..(r + 1) * n], valid, &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Softmax { x }, Tensor::new(shape, out).unwrap())
    }

    fn check_finite(&self, x: Var, what: &str) -> Result<()> {
        if self.value(x).all_finite() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("{what}: input contains NaN or infinity")))
        }
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite(x, "log_softmax")?;
        let (m, n) = self.dims2(x);
        let tx = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            kernels::log_softmax_row(&tx[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
        }
        let shape = self.value(x).shape().to_vec();
        Ok(self.push(Op::LogSoftmax(x), Tensor::new(shape, out).unwrap()))
    }

    /// Mean over rows of `-log_softmax(logits)[r, targets[r]]`, as a scalar.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_finite(logits, "cross_entropy_rows")?;
        let (m, n) = self.dims2(logits);
        if targets.len() != m {
            return Err(Error::contract(format!(
                "cross_entropy_rows: {} targets for {m} rows",
                targets.len()
            )));
        }
        if let Some((r, &t)) = targets.iter().enumerate().find(|(_, &t)| t >= n) {
            return Err(Error::Index(format!("target {t} at row {r} outside [0, {n})")));
        }
        let tx = self.value(logits).data();
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &tx[r * n..(r + 1) * n];
            total += kernels::logsumexp(row) - row[t];
        }
        let loss = total / m as f64;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            Tensor::scalar(loss),
        ))
    }

    /// `out[r] = x[r, idx[r]]`, shape `[rows]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x);
        if idx.len() != m {
            return Err(Error::contract(format!("pick: {} indices for {m} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("pick index {bad} outside [0, {n})")));
        }
        let tx = self.value(x).data();
        let out = idx.iter().enumerate().map(|(r, &c)| tx[r * n + c]).collect();
        Ok(self.push(
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            Tensor::new(vec![m], out).unwrap(),
        ))
    }

    /// Row gather from an embedding table `[V, d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims2(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!("embedding id {bad} outside [0, {v})")));
        }
        let tt = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tt[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), d], out)?,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims2(x);
        assert!(start + len <= n, "slice_cols {start}+{len} > {n}");
        let tx = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&tx[r * n + start..r * n + start + len]);
        }
        self.push(Op::SliceCols { x, start }, Tensor::new(vec![m, len], out).unwrap())
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.dims2(p);
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), Tensor::new(vec![m, n], out).unwrap())
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Inverted dropout with a caller-drawn keep mask (entries 0 or 1).
    pub fn dropout(&mut self, x: Var, keep: &[bool], rate: f64) -> Var {
        let tx = self.value(x);
        assert_eq!(keep.len(), tx.len(), "dropout mask length");
        let s = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = keep.iter().map(|&k| if k { s } else { 0.0 }).collect();
        let out = tx.data().iter().zip(&mask).map(|(a, b)| a * b).collect();
        let shape = tx.shape().to_vec();
        self.push(Op::Dropout { x, mask }, Tensor::new(shape, out).unwrap())
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.tensor();
        // Each arm borrows at most one input buffer at a time via `slot`.
        fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = out.cols();
                let da = slot(grads, *a, m * k);
                kernels::matmul_nt_acc(g, self.value(*b).data(), da, m, n, k);
                let db = slot(grads, *b, k * n);
                kernels::matmul_tn_acc(self.value(*a).data(), g, db, m, k, n);
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims2(*a);
                let n = out.cols();
                let da = slot(grads, *a, m * k);
                kernels::matmul_acc(g, self.value(*b).data(), da, m, n, k);
                let db = slot(grads, *b, n * k);
                kernels::matmul_tn_acc(g, self.value(*a).data(), db, m, n, k);
            }
            Op::Add(a, b) => {
                let la = self.value(*a).len();
                let da = slot(grads, *a, la);
                da.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                let lb = self.value(*b).len();
                let db = slot(grads, *b, lb);
                if lb == g.len() {
                    db.iter_mut().zip(g).for_each(|(d, x)| *d += x);
                } else {
                    for (i, x) in g.iter().enumerate() {
                        db[i % lb] += x;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let da = slot(grads, *a, ta.len());
                for i in 0..g.len() {
                    da[i] += g[i] * tb[i];
                }
                let db = slot(grads, *b, tb.len());
                for i in 0..g.len() {
                    db[i] += g[i] * ta[i];
                }
            }
            Op::Scale(a, c) => {
                let da = slot(grads, *a, g.len());
                da.iter_mut().zip(g).for_each(|(d, x)| *d += c * x);
            }
            Op::Gelu(a) => {
                let ta = self.value(*a).data();
                let da = slot(grads, *a, g.len());
                for i in 0..g.len() {
                    da[i] += g[i] * kernels::gelu_grad(ta[i]);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (m, n) = self.dims2(*x);
                let gm = self.value(*gamma).data();
                {
                    let dg = slot(grads, *gamma, n);
                    for r in 0..m {
                        for c in 0..n {
                            dg[c] += g[r * n + c] * xhat[r * n + c];
                        }
                    }
                }
                {
                    let db = slot(grads, *beta, n);
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c];
                        }
                    }
                }
                let dx = slot(grads, *x, m * n);
                let mut dxhat = vec![0.0; n];
                for r in 0..m {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for c in 0..n {
                        dxhat[c] = g[r * n + c] * gm[c];
                        mean_d += dxhat[c];
                        mean_dx += dxhat[c] * xhat[r * n + c];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for c in 0..n {
                        dx[r * n + c] += rstd[r] * (dxhat[c] - mean_d - xhat[r * n + c] * mean_dx);
                    }
                }
            }
            Op::Softmax { x } => {
                let (m, n) = self.dims2(*x);
                let y = out.data();
                let dx = slot(grads, *x, m * n);
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        dx[r * n + c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let (m, n) = self.dims2(*x);
                let y = out.data();
                let dx = slot(grads, *x, m * n);
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for c in 0..n {
                        dx[r * n + c] += gr[c] - y[r * n + c].exp() * gsum;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let (m, n) = self.dims2(*logits);
                let tx = self.value(*logits).data();
                let scale = g[0] / m as f64;
                let dx = slot(grads, *logits, m * n);
                let mut p = vec![0.0; n];
                for (r, &t) in targets.iter().enumerate() {
                    let row = &tx[r * n..(r + 1) * n];
                    kernels::softmax_prefix(row, n, &mut p);
                    for c in 0..n {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dx[r * n + c] += scale * (p[c] - onehot);
                    }
                }
            }
            Op::Pick { x, idx } => {
                let (m, n) = self.dims2(*x);
                let dx = slot(grads, *x, m * n);
                for (r, &c) in idx.iter().enumerate() {
                    dx[r * n + c] += g[r];
                }
            }
            Op::Embed { table, ids } => {
                let (v, d) = self.dims2(*table);
                let dt = slot(grads, *table, v * d);
                for (i, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] += g[i * d + c];
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims2(*x);
                let w = out.cols();
                let dx = slot(grads, *x, m * n);
                for r in 0..m {
                    for c in 0..w {
                        dx[r * n + start + c] += g[r * w + c];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.rows();
                let n = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let dp = slot(grads, p, m * w);
                    for r in 0..m {
                        for c in 0..w {
                            dp[r * w + c] += g[r * n + offset + c];
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let len = self.value(*x).len();
                let dx = slot(grads, *x, len);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Dropout { x, mask } => {
                let dx = slot(grads, *x, mask.len());
                for i in 0..mask.len() {
                    dx[i] += g[i] * mask[i];
                }
            }
        }
    }

    /// Parameter nodes present in this graph.
    pub fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of a node; `None` when the node does not feed the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds `scale ·` every parameter gradient in `graph` into `into`.
    pub fn accumulate(&self, graph: &Graph<'_>, into: &mut Grads, scale: f64) {
        for (pid, var) in graph.param_vars() {
            if let Some(g) = self.get(var) {
                into.get_mut(pid)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, x)| *d += scale * x);
            }
        }
    }

    /// Parameter gradients for `store`, zero for parameters the loss never reached.
    pub fn param_grads(&self, graph: &Graph<'_>, store: &ParamStore) -> Grads {
        let mut out = Grads::zeros_like(store);
        self.accumulate(graph, &mut out, 1.0);
        out
    }
}
