//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass together with its
//! value. [`Tape::backward`] walks the record in reverse and accumulates the
//! gradient of a scalar node with respect to every parameter block that took
//! part in the computation. Rows are batch elements; all ops act row-wise
//! except the reductions at the end.

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

/// Borrowed view of a node's value.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Silu(NodeId),
    Concat(Vec<NodeId>),
    Gather(NodeId, Vec<usize>),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    AvgPool { x: NodeId, h: usize, w: usize, p: usize },
    MeanRowSqNorm(NodeId),
    HalfSqNorm(NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    // Empty for parameter nodes, which read straight from the store.
    data: Vec<f64>,
    needs_grad: bool,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl<'p> Tape<'p> {
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

    pub fn value(&self, id: NodeId) -> View<'_> {
        let node = &self.nodes[id.0];
        let data = match node.op {
            Op::Param(block) => self.params.block(block),
            _ => &node.data,
        };
        View {
            rows: node.rows,
            cols: node.cols,
            data,
        }
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data[0]
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize, data: Vec<f64>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            rows,
            cols,
            data,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn grad_flag(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<NodeId> {
        if data.len() != rows * cols {
            return Err(Error::input(format!(
                "constant of shape {rows}x{cols} given {} values",
                data.len()
            )));
        }
        Ok(self.push(Op::Constant, rows, cols, data, false))
    }

    pub fn param(&mut self, block: usize) -> NodeId {
        let b = &self.params.layout()[block];
        let (rows, cols) = (b.rows, b.cols);
        self.push(Op::Param(block), rows, cols, Vec::new(), true)
    }

    /// `x` is (n, k), `w` is (k, m); result is (n, m).
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (n, k) = self.shape(x);
        let (k2, m) = self.shape(w);
        if k != k2 {
            return Err(Error::input(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; n * m];
        {
            let xv = self.value(x).data;
            let wv = self.value(w).data;
            for r in 0..n {
                let orow = &mut out[r * m..(r + 1) * m];
                for (i, &xi) in xv[r * k..(r + 1) * k].iter().enumerate() {
                    if xi != 0.0 {
                        axpy(xi, &wv[i * m..(i + 1) * m], orow);
                    }
                }
            }
        }
        let g = self.grad_flag(x) || self.grad_flag(w);
        Ok(self.push(Op::MatMul(x, w), n, m, out, g))
    }

    /// Adds a (1, m) row to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if self.shape(b) != (1, m) {
            return Err(Error::input("bias shape mismatch"));
        }
        let mut out = self.value(x).data.to_vec();
        {
            let bv = self.value(b).data;
            for row in out.chunks_exact_mut(m) {
                for (o, bi) in row.iter_mut().zip(bv) {
                    *o += bi;
                }
            }
        }
        let g = self.grad_flag(x) || self.grad_flag(b);
        Ok(self.push(Op::AddBias(x, b), n, m, out, g))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let (n, m) = self.shape(x);
        let out = self.value(x).data.iter().map(|&v| silu(v)).collect();
        let g = self.grad_flag(x);
        self.push(Op::Silu(x), n, m, out, g)
    }

    /// Column-wise concatenation; all parts must have the same row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(Error::input("concat of nothing"));
        };
        let n = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(Error::input("concat row mismatch"));
        }
        let m: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Vec::with_capacity(n * m);
        for r in 0..n {
            for &p in parts {
                let v = self.value(p);
                out.extend_from_slice(&v.data[r * v.cols..(r + 1) * v.cols]);
            }
        }
        let g = parts.iter().any(|&p| self.grad_flag(p));
        Ok(self.push(Op::Concat(parts.to_vec()), n, m, out, g))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather(&mut self, table: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (v, e) = self.shape(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::input(format!("index {bad} out of range for table of {v} rows")));
        }
        let mut out = Vec::with_capacity(idx.len() * e);
        {
            let tv = self.value(table).data;
            for &i in idx {
                out.extend_from_slice(&tv[i * e..(i + 1) * e]);
            }
        }
        let g = self.grad_flag(table);
        Ok(self.push(Op::Gather(table, idx.to_vec()), idx.len(), e, out, g))
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, sign: f64) -> Result<NodeId> {
        let shape = self.shape(a);
        if shape != self.shape(b) {
            return Err(Error::input(format!(
                "shape mismatch {:?} vs {:?}",
                shape,
                self.shape(b)
            )));
        }
        let out = self
            .value(a)
            .data
            .iter()
            .zip(self.value(b).data)
            .map(|(x, y)| x + sign * y)
            .collect();
        let g = self.grad_flag(a) || self.grad_flag(b);
        let op = if sign > 0.0 { Op::Add(a, b) } else { Op::Sub(a, b) };
        Ok(self.push(op, shape.0, shape.1, out, g))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, 1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, -1.0)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let (n, m) = self.shape(x);
        let out = self.value(x).data.iter().map(|v| v * factor).collect();
        let g = self.grad_flag(x);
        self.push(Op::Scale(x, factor), n, m, out, g)
    }

    /// Treats each row as an `h`x`w` image and averages non-overlapping `p`x`p` patches.
    pub fn avg_pool(&mut self, x: NodeId, h: usize, w: usize, p: usize) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if m != h * w || p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::input(format!(
                "cannot pool rows of {m} values as {h}x{w} with patch {p}"
            )));
        }
        let (ph, pw) = (h / p, w / p);
        let inv = 1.0 / (p * p) as f64;
        let mut out = vec![0.0; n * ph * pw];
        {
            let xv = self.value(x).data;
            for r in 0..n {
                let img = &xv[r * m..(r + 1) * m];
                let o = &mut out[r * ph * pw..(r + 1) * ph * pw];
                for i in 0..h {
                    for j in 0..w {
                        o[(i / p) * pw + j / p] += img[i * w + j] * inv;
                    }
                }
            }
        }
        let g = self.grad_flag(x);
        Ok(self.push(Op::AvgPool { x, h, w, p }, n, ph * pw, out, g))
    }

    /// Mean over rows of the squared Euclidean norm of each row; a 1x1 node.
    pub fn mean_row_sq_norm(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, m) = self.shape(x);
        if n == 0 {
            return Err(Error::input("mean over an empty batch"));
        }
        let v = self.value(x).data;
        let total: f64 = (0..n).map(|r| dot(&v[r * m..(r + 1) * m], &v[r * m..(r + 1) * m])).sum();
        let g = self.grad_flag(x);
        Ok(self.push(Op::MeanRowSqNorm(x), 1, 1, vec![total / n as f64], g))
    }

    /// `0.5 * sum(x^2)`; a 1x1 node.
    pub fn half_sq_norm(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).data;
        let s = 0.5 * dot(v, v);
        let g = self.grad_flag(x);
        self.push(Op::HalfSqNorm(x), 1, 1, vec![s], g)
    }

    /// Gradient of the scalar node `loss` with respect to every parameter,
    /// laid out like the parameter store. Parameters that did not take part
    /// in the computation get zero.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<f64>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before a forward pass was recorded".into()));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::State(format!(
                "backward needs a scalar node, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut out = vec![0.0; self.params.len()];
        if !self.grad_flag(loss) {
            return Ok(out);
        }

        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Constant => {}
                Op::Param(block) => {
                    let off = self.params.offset(*block);
                    for (o, g) in out[off..off + gy.len()].iter_mut().zip(&gy) {
                        *o += g;
                    }
                }
                Op::MatMul(x, w) => {
                    let (n, k) = self.shape(*x);
                    let m = node.cols;
                    let xv = self.value(*x).data;
                    let wv = self.value(*w).data;
                    if self.grad_flag(*x) {
                        let gx = acc(&mut grads, *x, n * k);
                        for r in 0..n {
                            let grow = &gy[r * m..(r + 1) * m];
                            for i in 0..k {
                                gx[r * k + i] += dot(grow, &wv[i * m..(i + 1) * m]);
                            }
                        }
                    }
                    if self.grad_flag(*w) {
                        let gw = acc(&mut grads, *w, k * m);
                        for r in 0..n {
                            let grow = &gy[r * m..(r + 1) * m];
                            for (i, &xi) in xv[r * k..(r + 1) * k].iter().enumerate() {
                                if xi != 0.0 {
                                    axpy(xi, grow, &mut gw[i * m..(i + 1) * m]);
                                }
                            }
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    let m = node.cols;
                    if self.grad_flag(*b) {
                        let gb = acc(&mut grads, *b, m);
                        for row in gy.chunks_exact(m) {
                            for (o, g) in gb.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                    }
                    if self.grad_flag(*x) {
                        add_into(acc(&mut grads, *x, gy.len()), &gy);
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x).data;
                    let gx = acc(&mut grads, *x, gy.len());
                    for ((o, g), &xi) in gx.iter_mut().zip(&gy).zip(xv) {
                        *o += g * silu_grad(xi);
                    }
                }
                Op::Concat(parts) => {
                    let n = node.rows;
                    let m = node.cols;
                    let mut start = 0;
                    for &p in parts {
                        let pc = self.shape(p).1;
                        if self.grad_flag(p) {
                            let gp = acc(&mut grads, p, n * pc);
                            for r in 0..n {
                                add_into(
                                    &mut gp[r * pc..(r + 1) * pc],
                                    &gy[r * m + start..r * m + start + pc],
                                );
                            }
                        }
                        start += pc;
                    }
                }
                Op::Gather(table, idx_list) => {
                    let (v, e) = self.shape(*table);
                    let gt = acc(&mut grads, *table, v * e);
                    for (r, &i) in idx_list.iter().enumerate() {
                        add_into(&mut gt[i * e..(i + 1) * e], &gy[r * e..(r + 1) * e]);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Add(..)) { 1.0 } else { -1.0 };
                    if self.grad_flag(*a) {
                        add_into(acc(&mut grads, *a, gy.len()), &gy);
                    }
                    if self.grad_flag(*b) {
                        let gb = acc(&mut grads, *b, gy.len());
                        for (o, g) in gb.iter_mut().zip(&gy) {
                            *o += sign * g;
                        }
                    }
                }
                Op::Scale(x, f) => {
                    let gx = acc(&mut grads, *x, gy.len());
                    for (o, g) in gx.iter_mut().zip(&gy) {
                        *o += f * g;
                    }
                }
                Op::AvgPool { x, h, w, p } => {
                    let (n, m) = self.shape(*x);
                    let (ph, pw) = (h / p, w / p);
                    let inv = 1.0 / (p * p) as f64;
                    let gx = acc(&mut grads, *x, n * m);
                    for r in 0..n {
                        let go = &gy[r * ph * pw..(r + 1) * ph * pw];
                        let gi = &mut gx[r * m..(r + 1) * m];
                        for i in 0..*h {
                            for j in 0..*w {
                                gi[i * w + j] += go[(i / p) * pw + j / p] * inv;
                            }
                        }
                    }
                }
                Op::MeanRowSqNorm(x) => {
                    let n = self.shape(*x).0;
                    let f = 2.0 * gy[0] / n as f64;
                    let xv = self.value(*x).data;
                    let gx = acc(&mut grads, *x, xv.len());
                    for (o, v) in gx.iter_mut().zip(xv) {
                        *o += f * v;
                    }
                }
                Op::HalfSqNorm(x) => {
                    let xv = self.value(*x).data;
                    let gx = acc(&mut grads, *x, xv.len());
                    for (o, v) in gx.iter_mut().zip(xv) {
                        *o += gy[0] * v;
                    }
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize) -> &mut Vec<f64> {
    grads[id.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
