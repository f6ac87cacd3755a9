//! Reverse-mode gradient tape over a fixed operation set.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and the backward sweep is a single reverse pass.

use super::matrix::{gemm, Matrix};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous row range belonging to one sequence of a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, trans_b: bool },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow { x: NodeId, row: NodeId },
    Scale(NodeId, f64),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Matrix, rstd: Vec<f64> },
    Gather { table: NodeId, ids: Vec<u32> },
    MaskedNll { logits: NodeId, targets: Vec<u32>, mask: Vec<bool>, probs: Matrix, count: usize },
    CausalAttention { q: NodeId, k: NodeId, v: NodeId, segments: Vec<Segment>, heads: usize, probs: Vec<f64> },
    FrobeniusSq(NodeId),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Records a computation and replays it backwards.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `id`; zero when the node does not reach the loss.
    pub fn get(&self, id: NodeId) -> Matrix {
        match &self.adjoints[id.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }

    pub fn take(&mut self, id: NodeId) -> Matrix {
        match self.adjoints[id.0].take() {
            Some(m) => m,
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Row-wise layer normalization; returns output, normalized input and 1/std.
pub(crate) fn layer_norm_forward(x: &Matrix, gamma: &[f64], beta: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let d = x.cols();
    let mut out = Matrix::zeros(x.rows(), d);
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut rstd = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let o = out.row_mut(r);
        for c in 0..d {
            o[c] = xh[c] * gamma[c] + beta[c];
        }
    }
    (out, xhat, rstd)
}

/// Causal multi-head attention over independent segments of packed rows.
/// Returns the output and the per-(segment, head) probability rows.
pub(crate) fn causal_attention_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    segments: &[Segment],
    heads: usize,
) -> (Matrix, Vec<f64>) {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let cap: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
    let mut probs = vec![0.0; cap];
    let mut offset = 0;
    for seg in segments {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..seg.len {
                let p = &mut probs[offset + i * seg.len..offset + (i + 1) * seg.len];
                let qi = &q.row(seg.start + i)[cols.clone()];
                for j in 0..=i {
                    let kj = &k.row(seg.start + j)[cols.clone()];
                    p[j] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut p[..=i]);
                let o = &mut out.row_mut(seg.start + i)[cols.clone()];
                for j in 0..=i {
                    let vj = &v.row(seg.start + j)[cols.clone()];
                    let w = p[j];
                    for (oc, vc) in o.iter_mut().zip(vj) {
                        *oc += w * vc;
                    }
                }
            }
            offset += seg.len * seg.len;
        }
    }
    (out, probs)
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives an adjoint.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = super::matrix::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = super::matrix::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_same_shape(vb, "mul")?;
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Matrix::from_vec(va.rows(), va.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.rows() != 1 || vr.cols() != vx.cols() {
            return Err(Error::Dimension(format!(
                "add_row: {}x{} plus {}x{}",
                vx.rows(),
                vx.cols(),
                vr.rows(),
                vr.cols()
            )));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, Op::AddRow { x, row }, rg))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let out = self.value(x).scaled(factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| gelu(v)).collect();
        let out = Matrix::from_vec(vx.rows(), vx.cols(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let out = softmax_rows(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gamma), self.value(beta));
        if vg.shape() != (1, vx.cols()) || vb.shape() != (1, vx.cols()) {
            return Err(Error::Dimension(format!(
                "layer_norm: input width {} with gain {:?} and bias {:?}",
                vx.cols(),
                vg.shape(),
                vb.shape()
            )));
        }
        let (out, xhat, rstd) = layer_norm_forward(vx, vg.data(), vb.data());
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, rg))
    }

    /// Selects rows of `table` by id.
    pub fn gather(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let vt = self.value(table);
        let mut out = Matrix::zeros(ids.len(), vt.cols());
        for (r, &id) in ids.iter().enumerate() {
            if id as usize >= vt.rows() {
                return Err(Error::UnknownTokenId { id, size: vt.rows() });
            }
            out.row_mut(r).copy_from_slice(vt.row(id as usize));
        }
        let rg = self.rg(table);
        Ok(self.push(out, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-wise
    /// log-softmax of `logits`, over rows where `mask` is set.
    pub fn masked_nll(&mut self, logits: NodeId, targets: &[u32], mask: &[bool]) -> Result<NodeId> {
        let vl = self.value(logits);
        if targets.len() != vl.rows() || mask.len() != vl.rows() {
            return Err(Error::Dimension(format!(
                "masked_nll: {} rows, {} targets, {} mask entries",
                vl.rows(),
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Data("loss mask selects no positions".into()));
        }
        let probs = softmax_rows(vl);
        let mut total = 0.0;
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t as usize >= vl.cols() {
                return Err(Error::UnknownTokenId { id: t, size: vl.cols() });
            }
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
        }
        let loss = total / count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Matrix::scalar(loss),
            Op::MaskedNll { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
            rg,
        ))
    }

    /// Causal multi-head self-attention within each segment.
    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        if vq.shape() != vk.shape() || vq.shape() != vv.shape() {
            return Err(Error::Dimension(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            )));
        }
        if heads == 0 || vq.cols() % heads != 0 {
            return Err(Error::Dimension(format!("attention: width {} not divisible by {heads} heads", vq.cols())));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if segments.iter().any(|s| s.start + s.len > vq.rows()) || covered > vq.rows() {
            return Err(Error::Dimension("attention: segments exceed packed rows".into()));
        }
        let (out, probs) = causal_attention_forward(vq, vk, vv, segments, heads);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(out, Op::CausalAttention { q, k, v, segments: segments.to_vec(), heads, probs }, rg))
    }

    /// Sum of squared entries as a 1x1 node.
    pub fn frobenius_sq(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.rg(x);
        self.push(Matrix::scalar(s), Op::FrobeniusSq(x), rg)
    }

    /// Propagates adjoints from the scalar node `loss` to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(Error::Dimension(format!("backward from non-scalar {:?}", lv.shape())));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[idx] = Some(g);
        }
        Ok(Gradients { adjoints: adj, shapes: self.nodes.iter().map(|n| n.value.shape()).collect() })
    }

    fn propagate(&self, node: &Node, g: &Matrix, adj: &mut [Option<Matrix>]) {
        // Lazily allocated accumulator for an input that needs a gradient.
        fn slot<'a>(tape: &Tape, adj: &'a mut [Option<Matrix>], id: NodeId) -> Option<&'a mut Matrix> {
            if !tape.rg(id) {
                return None;
            }
            let (r, c) = tape.value(id).shape();
            Some(adj[id.0].get_or_insert_with(|| Matrix::zeros(r, c)))
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = slot(self, adj, *a) {
                    // C = A B   => dA = dC B^T ;  C = A B^T => dA = dC B
                    gemm(1.0, g, false, vb, !trans_b, 1.0, ga);
                }
                if let Some(gb) = slot(self, adj, *b) {
                    if *trans_b {
                        gemm(1.0, g, true, va, false, 1.0, gb);
                    } else {
                        gemm(1.0, va, true, g, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = slot(self, adj, *a) {
                    ga.add_assign(g);
                }
                if let Some(gb) = slot(self, adj, *b) {
                    gb.add_assign(g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = slot(self, adj, *a) {
                    for ((o, x), y) in ga.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = slot(self, adj, *b) {
                    for ((o, x), y) in gb.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += x * y;
                    }
                }
            }
            Op::AddRow { x, row } => {
                if let Some(gx) = slot(self, adj, *x) {
                    gx.add_assign(g);
                }
                if let Some(gr) = slot(self, adj, *row) {
                    for r in 0..g.rows() {
                        for (o, v) in gr.data_mut().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(gx) = slot(self, adj, *x) {
                    for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                        *o += f * v;
                    }
                }
            }
            Op::Gelu(x) => {
                let vx = self.value(*x);
                if let Some(gx) = slot(self, adj, *x) {
                    for ((o, gv), xv) in gx.data_mut().iter_mut().zip(g.data()).zip(vx.data()) {
                        *o += gv * gelu_grad(*xv);
                    }
                }
            }
            Op::Softmax(x) => {
                let y = &node.value;
                if let Some(gx) = slot(self, adj, *x) {
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                            *o += yv * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let vg = self.value(*gamma);
                let d = xhat.cols();
                if let Some(gg) = slot(self, adj, *gamma) {
                    for r in 0..g.rows() {
                        for ((o, gv), xh) in gg.data_mut().iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *o += gv * xh;
                        }
                    }
                }
                if let Some(gb) = slot(self, adj, *beta) {
                    for r in 0..g.rows() {
                        for (o, gv) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *o += gv;
                        }
                    }
                }
                if let Some(gx) = slot(self, adj, *x) {
                    let mut dxhat = vec![0.0; d];
                    for r in 0..g.rows() {
                        let (gr, xh) = (g.row(r), xhat.row(r));
                        for c in 0..d {
                            dxhat[c] = gr[c] * vg.data()[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let out = gx.row_mut(r);
                        for c in 0..d {
                            out[c] += rstd[r] * (dxhat[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = slot(self, adj, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (o, v) in gt.row_mut(id as usize).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MaskedNll { logits, targets, mask, probs, count } => {
                let scale = g.item() / *count as f64;
                if let Some(gl) = slot(self, adj, *logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let out = gl.row_mut(r);
                        for (o, p) in out.iter_mut().zip(probs.row(r)) {
                            *o += scale * p;
                        }
                        out[t as usize] -= scale;
                    }
                }
            }
            Op::CausalAttention { q, k, v, segments, heads, probs } => {
                self.attention_backward(*q, *k, *v, segments, *heads, probs, g, adj);
            }
            Op::FrobeniusSq(x) => {
                let vx = self.value(*x);
                let s = g.item();
                if let Some(gx) = slot(self, adj, *x) {
                    for (o, v) in gx.data_mut().iter_mut().zip(vx.data()) {
                        *o += 2.0 * s * v;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: &[Segment],
        heads: usize,
        probs: &[f64],
        g: &Matrix,
        adj: &mut [Option<Matrix>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let shape = vq.shape();
        let mut dq = self.rg(q).then(|| Matrix::zeros(shape.0, shape.1));
        let mut dk = self.rg(k).then(|| Matrix::zeros(shape.0, shape.1));
        let mut dv = self.rg(v).then(|| Matrix::zeros(shape.0, shape.1));

        let mut offset = 0;
        let mut ds = Vec::new();
        for seg in segments {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..seg.len {
                    let p = &probs[offset + i * seg.len..offset + i * seg.len + i + 1];
                    let gi = &g.row(seg.start + i)[cols.clone()];
                    if let Some(dv) = dv.as_mut() {
                        for j in 0..=i {
                            let row = &mut dv.row_mut(seg.start + j)[cols.clone()];
                            for (o, gv) in row.iter_mut().zip(gi) {
                                *o += p[j] * gv;
                            }
                        }
                    }
                    if dq.is_none() && dk.is_none() {
                        continue;
                    }
                    // dP_ij = g_i . v_j ; dS = P (dP - sum_j P dP)
                    ds.clear();
                    for j in 0..=i {
                        let vj = &vv.row(seg.start + j)[cols.clone()];
                        ds.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                    }
                    let inner: f64 = ds.iter().zip(p).map(|(a, b)| a * b).sum();
                    for (dsj, pj) in ds.iter_mut().zip(p) {
                        *dsj = pj * (*dsj - inner) * scale;
                    }
                    if let Some(dq) = dq.as_mut() {
                        let row = &mut dq.row_mut(seg.start + i)[cols.clone()];
                        for (j, dsj) in ds.iter().enumerate() {
                            let kj = &vk.row(seg.start + j)[cols.clone()];
                            for (o, kv) in row.iter_mut().zip(kj) {
                                *o += dsj * kv;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        let qi = &vq.row(seg.start + i)[cols.clone()];
                        for (j, dsj) in ds.iter().enumerate() {
                            let row = &mut dk.row_mut(seg.start + j)[cols.clone()];
                            for (o, qv) in row.iter_mut().zip(qi) {
                                *o += dsj * qv;
                            }
                        }
                    }
                }
                offset += seg.len * seg.len;
            }
        }
        for (id, grad) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(grad) = grad {
                match adj[id.0].as_mut() {
                    Some(acc) => acc.add_assign(&grad),
                    None => adj[id.0] = Some(grad),
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::gradcheck::{max_relative_error, numerical_gradient};
    use crate::numeric::rng::SeededRng;

    fn random(rng: &mut SeededRng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.uniform(-1.0, 1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    /// Compares tape gradients of `build` against central differences for
    /// every parameter leaf.
    fn check<F>(params: Vec<Matrix>, build: F)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();
        for (i, p) in params.iter().enumerate() {
            let analytic = grads.get(ids[i]);
            let numeric = numerical_gradient(
                |x| {
                    let mut t = Tape::new();
                    let ids: Vec<NodeId> = params
                        .iter()
                        .enumerate()
                        .map(|(j, q)| t.param(if j == i { x.clone() } else { q.clone() }))
                        .collect();
                    let l = build(&mut t, &ids);
                    t.value(l).item()
                },
                p,
                1e-5,
            );
            let err = max_relative_error(&analytic, &numeric);
            assert!(err <= 1e-4, "param {i}: relative error {err}");
        }
    }

    #[test]
    fn matmul_and_nt_gradients() {
        let mut rng = SeededRng::new(1);
        let params = vec![random(&mut rng, 3, 4), random(&mut rng, 4, 2), random(&mut rng, 5, 2)];
        check(params, |t, p| {
            let ab = t.matmul(p[0], p[1]).unwrap();
            let abc = t.matmul_nt(ab, p[2]).unwrap();
            t.frobenius_sq(abc)
        });
    }

    #[test]
    fn elementwise_gradients() {
        let mut rng = SeededRng::new(2);
        let params = vec![random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 1, 4)];
        check(params, |t, p| {
            let s = t.add(p[0], p[1]).unwrap();
            let m = t.mul(s, p[0]).unwrap();
            let b = t.add_row(m, p[2]).unwrap();
            let g = t.gelu(b);
            let sc = t.scale(g, 0.7);
            t.frobenius_sq(sc)
        });
    }

    #[test]
    fn softmax_and_layer_norm_gradients() {
        let mut rng = SeededRng::new(3);
        let params = vec![random(&mut rng, 4, 5), random(&mut rng, 1, 5), random(&mut rng, 1, 5), random(&mut rng, 4, 5)];
        check(params, |t, p| {
            let ln = t.layer_norm(p[0], p[1], p[2]).unwrap();
            let sm = t.softmax(ln);
            let w = t.mul(sm, p[3]).unwrap();
            t.frobenius_sq(w)
        });
    }

    #[test]
    fn gather_and_nll_gradients() {
        let mut rng = SeededRng::new(4);
        let params = vec![random(&mut rng, 6, 3), random(&mut rng, 7, 3)];
        check(params, |t, p| {
            let e = t.gather(p[0], &[0, 2, 2, 5]).unwrap();
            let logits = t.matmul_nt(e, p[1]).unwrap();
            t.masked_nll(logits, &[1, 3, 6, 0], &[true, false, true, true]).unwrap()
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = SeededRng::new(5);
        let params = vec![random(&mut rng, 7, 4), random(&mut rng, 7, 4), random(&mut rng, 7, 4), random(&mut rng, 7, 4)];
        let segs = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
        check(params, |t, p| {
            let a = t.causal_attention(p[0], p[1], p[2], &segs, 2).unwrap();
            let w = t.mul(a, p[3]).unwrap();
            t.frobenius_sq(w)
        });
    }

    #[test]
    fn unreachable_adjoint_is_zero() {
        let mut tape = Tape::new();
        let a = tape.param(Matrix::filled(2, 2, 1.0));
        let b = tape.param(Matrix::filled(2, 3, 1.0));
        let loss = tape.frobenius_sq(a);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(b).is_zero());
        assert_eq!(grads.get(b).shape(), (2, 3));
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut tape = Tape::new();
        let a = tape.constant(Matrix::filled(2, 2, 3.0));
        let p = tape.param(Matrix::filled(2, 2, 1.0));
        let m = tape.mul(a, p).unwrap();
        let loss = tape.frobenius_sq(m);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(a).is_zero());
        assert_eq!(grads.get(p), Matrix::filled(2, 2, 18.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        let mut tape = Tape::new();
        let l = tape.param(Matrix::zeros(2, 3));
        assert!(tape.masked_nll(l, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = SeededRng::new(9);
        let q = random(&mut rng, 5, 4);
        let k = random(&mut rng, 5, 4);
        let v = random(&mut rng, 5, 4);
        let seg = [Segment { start: 0, len: 5 }];
        let (base, _) = causal_attention_forward(&q, &k, &v, &seg, 2);
        let mut v2 = v.clone();
        v2.row_mut(4).iter_mut().for_each(|x| *x += 10.0);
        let mut k2 = k.clone();
        k2.row_mut(4).iter_mut().for_each(|x| *x -= 3.0);
        let (pert, _) = causal_attention_forward(&q, &k2, &v2, &seg, 2);
        for r in 0..4 {
            assert_eq!(base.row(r), pert.row(r));
        }
        assert_ne!(base.row(4), pert.row(4));
    }
}
