use std::sync::Arc;

use super::pattern::Pattern;
use super::tensor::Tensor;
use crate::distributions::special::{digamma, EULER_GAMMA};
use crate::error::{BamError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Exp,
    Log,
    Neg,
    Relu,
    Elu,
    LeakyRelu(f64),
    PowConst(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    MulConst(Var, Arc<Vec<f64>>),
    AddConst(Var),
    SoftmaxRows(Var),
    Sum(Var),
    Mean(Var),
    AxisReduce {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        mean: bool,
    },
    Concat {
        inputs: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Gather(Var, Arc<Vec<usize>>),
    Scatter(Var, Arc<Vec<usize>>),
    ExpShifted(Var),
    SegmentNormalize(Var, Arc<Pattern>),
    EdgeDot {
        q: Var,
        k: Var,
        pattern: Arc<Pattern>,
        scale: f64,
    },
    EdgeAggregate {
        w: Var,
        v: Var,
        pattern: Arc<Pattern>,
    },
    OuterSum(Var, Var),
    CrossEntropy {
        logits: Var,
        rows: Arc<Vec<usize>>,
        targets: Arc<Vec<usize>>,
    },
    KlWeibullGamma {
        log_lambda: Var,
        alpha: Var,
        k: f64,
        beta: f64,
    },
    KlLognormal {
        mu_q: Var,
        mu_p: Var,
        sigma_p: f64,
    },
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Define-by-run gradient tape.
///
/// Every operation appends one node whose inputs were recorded earlier, so
/// the node order is a topological order and a single reverse sweep visits
/// each node once.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(BamError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let end = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; end];
        adj[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for idx in (0..end).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((idx, g));
            } else {
                self.propagate(idx, &g, &mut adj);
            }
        }
        for (idx, g) in leaf_grads {
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let out = &nodes[idx].value;
        let val = |v: &Var| &nodes[v.0].value;

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                let (ad, bd) = (av.data(), bv.data());
                if n == 1 {
                    if let Some(ga) = slot(nodes, adj, *a) {
                        for (garow, &gv) in ga.chunks_exact_mut(k).zip(g.iter()) {
                            for (dst, &b) in garow.iter_mut().zip(bd) {
                                *dst += gv * b;
                            }
                        }
                    }
                    if let Some(gb) = slot(nodes, adj, *b) {
                        for (arow, &gv) in ad.chunks_exact(k).zip(g.iter()) {
                            for (dst, &a) in gb.iter_mut().zip(arow) {
                                *dst += a * gv;
                            }
                        }
                    }
                    return;
                }
                if let Some(ga) = slot(nodes, adj, *a) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for (dst, &gv) in gbrow.iter_mut().zip(grow) {
                                *dst += a_ip * gv;
                            }
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(a).rows(), val(a).cols());
                if let Some(ga) = slot(nodes, adj, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    add_into(ga, g);
                }
            }
            Op::Binary(kind, a, b) => {
                let (ad, bd) = (val(a).data(), val(b).data());
                let (la, lb) = (ad.len(), bd.len());
                let len = out.len();
                if let Some(ga) = slot(nodes, adj, *a) {
                    for i in 0..len {
                        let y = bd[i % lb];
                        ga[i % la] += g[i]
                            * match kind {
                                Binary::Add | Binary::Sub => 1.0,
                                Binary::Mul => y,
                                Binary::Div => 1.0 / y,
                            };
                    }
                }
                if let Some(gb) = slot(nodes, adj, *b) {
                    for i in 0..len {
                        let (x, y) = (ad[i % la], bd[i % lb]);
                        gb[i % lb] += g[i]
                            * match kind {
                                Binary::Add => 1.0,
                                Binary::Sub => -1.0,
                                Binary::Mul => x,
                                Binary::Div => -x / (y * y),
                            };
                    }
                }
            }
            Op::Unary(kind, a) => {
                let xd = val(a).data();
                let yd = out.data();
                if let Some(ga) = slot(nodes, adj, *a) {
                    for i in 0..xd.len() {
                        let (x, y) = (xd[i], yd[i]);
                        ga[i] += g[i]
                            * match *kind {
                                Unary::Exp => y,
                                Unary::Log => 1.0 / x,
                                Unary::Neg => -1.0,
                                Unary::Relu => f64::from(u8::from(x > 0.0)),
                                Unary::Elu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        y + 1.0
                                    }
                                }
                                Unary::LeakyRelu(slope) => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        slope
                                    }
                                }
                                Unary::PowConst(p) => p * x.powf(p - 1.0),
                                Unary::Scale(c) => c,
                                Unary::AddScalar(_) => 1.0,
                            };
                    }
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * c[i];
                    }
                }
            }
            Op::AddConst(a) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    add_into(ga, g);
                }
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (out.rows(), out.cols());
                let y = out.data();
                if let Some(ga) = slot(nodes, adj, *a) {
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dot: f64 = y[row.clone()].iter().zip(&g[row.clone()]).map(|(a, b)| a * b).sum();
                        for j in row {
                            ga[j] += y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::AxisReduce {
                x,
                outer,
                len,
                inner,
                mean,
            } => {
                let scale = if *mean { 1.0 / *len as f64 } else { 1.0 };
                if let Some(gx) = slot(nodes, adj, *x) {
                    for o in 0..*outer {
                        for l in 0..*len {
                            for i in 0..*inner {
                                gx[(o * len + l) * inner + i] += g[o * inner + i] * scale;
                            }
                        }
                    }
                }
            }
            Op::Concat {
                inputs,
                outer,
                chunks,
            } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (input, &chunk) in inputs.iter().zip(chunks) {
                    if let Some(gi) = slot(nodes, adj, *input) {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + chunk];
                            add_into(&mut gi[o * chunk..(o + 1) * chunk], src);
                        }
                    }
                    offset += chunk;
                }
            }
            Op::Gather(a, indices) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    for (e, &i) in indices.iter().enumerate() {
                        ga[i] += g[e];
                    }
                }
            }
            Op::Scatter(a, indices) => {
                if let Some(ga) = slot(nodes, adj, *a) {
                    for (e, &i) in indices.iter().enumerate() {
                        ga[e] += g[i];
                    }
                }
            }
            Op::ExpShifted(a) => {
                let y = out.data();
                if let Some(ga) = slot(nodes, adj, *a) {
                    for e in 0..y.len() {
                        ga[e] += g[e] * y[e];
                    }
                }
            }
            Op::SegmentNormalize(a, pattern) => {
                let x = val(a).data();
                let y = out.data();
                if let Some(ga) = slot(nodes, adj, *a) {
                    for r in 0..pattern.m() {
                        let range = pattern.row_range(r);
                        let s: f64 = x[range.clone()].iter().sum();
                        let dot: f64 = range.clone().map(|e| g[e] * y[e]).sum();
                        for e in range {
                            ga[e] += (g[e] - dot) / s;
                        }
                    }
                }
            }
            Op::EdgeDot {
                q,
                k,
                pattern,
                scale,
            } => {
                let (qv, kv) = (val(q), val(k));
                let d = qv.cols();
                let (qd, kd) = (qv.data(), kv.data());
                let (rows, cols) = (pattern.row_ids(), pattern.col_ids());
                if let Some(gq) = slot(nodes, adj, *q) {
                    for e in 0..rows.len() {
                        let s = g[e] * scale;
                        let (r, c) = (rows[e], cols[e]);
                        for t in 0..d {
                            gq[r * d + t] += s * kd[c * d + t];
                        }
                    }
                }
                if let Some(gk) = slot(nodes, adj, *k) {
                    for e in 0..rows.len() {
                        let s = g[e] * scale;
                        let (r, c) = (rows[e], cols[e]);
                        for t in 0..d {
                            gk[c * d + t] += s * qd[r * d + t];
                        }
                    }
                }
            }
            Op::EdgeAggregate { w, v, pattern } => {
                let (wd, vv) = (val(w).data(), val(v));
                let d = vv.cols();
                let vd = vv.data();
                let (rows, cols) = (pattern.row_ids(), pattern.col_ids());
                if let Some(gw) = slot(nodes, adj, *w) {
                    for e in 0..rows.len() {
                        let (r, c) = (rows[e], cols[e]);
                        gw[e] += (0..d).map(|t| g[r * d + t] * vd[c * d + t]).sum::<f64>();
                    }
                }
                if let Some(gv) = slot(nodes, adj, *v) {
                    for e in 0..rows.len() {
                        let (r, c) = (rows[e], cols[e]);
                        for t in 0..d {
                            gv[c * d + t] += wd[e] * g[r * d + t];
                        }
                    }
                }
            }
            Op::OuterSum(col, row) => {
                let (m, n) = (out.rows(), out.cols());
                if let Some(gc) = slot(nodes, adj, *col) {
                    for i in 0..m {
                        gc[i] += g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                }
                if let Some(gr) = slot(nodes, adj, *row) {
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
            } => {
                let lv = val(logits);
                let c = lv.cols();
                let scale = g[0] / rows.len() as f64;
                if let Some(gl) = slot(nodes, adj, *logits) {
                    for (&r, &t) in rows.iter().zip(targets.iter()) {
                        let row = lv.row(r);
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
                        for j in 0..c {
                            let p = (row[j] - max).exp() / z;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::KlWeibullGamma {
                log_lambda,
                alpha,
                k,
                beta,
            } => {
                let (ll, al) = (val(log_lambda).data(), val(alpha).data());
                let mean_factor = crate::distributions::special::gamma_fn(1.0 + 1.0 / k);
                if let Some(gl) = slot(nodes, adj, *log_lambda) {
                    for e in 0..ll.len() {
                        gl[e] += g[0] * (-al[e] + beta * mean_factor * ll[e].exp());
                    }
                }
                if let Some(ga) = slot(nodes, adj, *alpha) {
                    for e in 0..ll.len() {
                        let dg = digamma(al[e]).expect("alpha validated positive in forward");
                        ga[e] += g[0] * (EULER_GAMMA / k - ll[e] - beta.ln() + dg);
                    }
                }
            }
            Op::KlLognormal {
                mu_q,
                mu_p,
                sigma_p,
            } => {
                let (q, p) = (val(mu_q).data(), val(mu_p).data());
                let inv = 1.0 / (sigma_p * sigma_p);
                if let Some(gq) = slot(nodes, adj, *mu_q) {
                    for e in 0..q.len() {
                        gq[e] += g[0] * (q[e] - p[e]) * inv;
                    }
                }
                if let Some(gp) = slot(nodes, adj, *mu_p) {
                    for e in 0..q.len() {
                        gp[e] -= g[0] * (q[e] - p[e]) * inv;
                    }
                }
            }
        }
    }
}

/// Adjoint buffer of `v`, created on first use; `None` when `v` needs no gradient.
fn slot<'a>(nodes: &[Node], adj: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(adj[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
