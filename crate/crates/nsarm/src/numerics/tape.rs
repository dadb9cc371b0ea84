//! Reverse-mode autodiff over a per-sample tape.
//!
//! Nodes are appended in execution order (already topological), values are
//! f32 tensors, and scalar reductions keep an exact f64 side value so loss
//! readouts and finite-difference checks are not limited by f32 rounding.
//! `backward` walks the tape once in reverse and accumulates gradients.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::conv::{conv2d, conv2d_backward, ConvSpec};
use super::linalg;
use super::resample::{resize_down, resize_transposed, resize_up};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

const GELU_C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C1: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    /// [n, d] + [d] broadcast over rows.
    AddRowBroadcast(NodeId, NodeId),
    /// [d] -> [n, d].
    BroadcastRow(NodeId, usize),
    /// c = scale * a x b, with b optionally transposed in storage.
    MatMul {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        scale: f32,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
        cols: Tensor,
        in_h: usize,
        in_w: usize,
    },
    ResizeUp { x: NodeId, src: (usize, usize) },
    ResizeDown { x: NodeId, src: (usize, usize) },
    Gelu(NodeId),
    Clamp01(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: Vec<(f32, f32)>,
    },
    /// Row softmax; row i only sees columns < allowed[i] (block-causal mask).
    SoftmaxRows {
        x: NodeId,
        allowed: Option<Rc<Vec<usize>>>,
    },
    ConcatRows(Vec<(NodeId, usize)>),
    SliceRows { x: NodeId, start: usize },
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
        total: usize,
    },
    ConcatCols(Vec<(NodeId, usize)>),
    SumAll(NodeId),
    MeanAll(NodeId),
    MseLoss { pred: NodeId, target: Tensor },
    /// Mean binary cross-entropy from logits against 0/1 labels.
    BitCeLoss { logits: NodeId, labels: Vec<u8> },
    /// Binary spherical quantization with a straight-through backward that
    /// behaves like unit-sphere normalization.
    BsqSte { x: NodeId, eps: f32 },
}

struct Node {
    value: Tensor,
    scalar_f64: Option<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.slots[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.slots[id.0].take()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.push_scalar(value, None, op)
    }

    fn push_scalar(&mut self, value: Tensor, scalar_f64: Option<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, scalar_f64, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Exact scalar value of a reduction node (f64 when tracked).
    pub fn scalar(&self, id: NodeId) -> f64 {
        let node = &self.nodes[id.0];
        node.scalar_f64.unwrap_or_else(|| node.value.data()[0] as f64)
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.clone(), Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        let s = match (self.nodes[a.0].scalar_f64, self.nodes[b.0].scalar_f64) {
            (Some(x), Some(y)) => Some(x + y),
            _ => None,
        };
        Ok(self.push_scalar(v, s, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f32) -> NodeId {
        let v = self.value(a).scale(s);
        let sc = self.nodes[a.0].scalar_f64.map(|x| x * s as f64);
        self.push_scalar(v, sc, Op::Scale(a, s))
    }

    /// [n, d] + [d], the bias-add pattern.
    pub fn add_row_broadcast(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(row).numel() != d {
            return Err(Error::ShapeMismatch(format!(
                "row broadcast: {:?} + {:?}",
                self.value(x).shape(),
                self.value(row).shape()
            )));
        }
        let rd = self.value(row).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for r in out.chunks_mut(d) {
            for (v, &b) in r.iter_mut().zip(&rd) {
                *v += b;
            }
        }
        let t = Tensor::from_vec(vec![n, d], out)?;
        Ok(self.push(t, Op::AddRowBroadcast(x, row)))
    }

    /// [d] -> [n, d].
    pub fn broadcast_row(&mut self, row: NodeId, n: usize) -> Result<NodeId> {
        let d = self.value(row).numel();
        let rd = self.value(row).data();
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(rd);
        }
        let t = Tensor::from_vec(vec![n, d], out)?;
        Ok(self.push(t, Op::BroadcastRow(row, n)))
    }

    /// c = scale * a x b. `b` may be stored transposed ([n, k] when
    /// `trans_b`), which is the layout attention uses for K.
    pub fn matmul_scaled(
        &mut self,
        a: NodeId,
        b: NodeId,
        trans_b: bool,
        scale: f32,
    ) -> Result<NodeId> {
        let (m, k) = self.value(a).dims2()?;
        let (bd0, bd1) = self.value(b).dims2()?;
        let n = if trans_b {
            if bd1 != k {
                return Err(Error::ShapeMismatch(format!(
                    "matmul [{m},{k}] x [{bd0},{bd1}]^T"
                )));
            }
            bd0
        } else {
            if bd0 != k {
                return Err(Error::ShapeMismatch(format!(
                    "matmul [{m},{k}] x [{bd0},{bd1}]"
                )));
            }
            bd1
        };
        let mut out = vec![0.0f32; m * n];
        if trans_b {
            linalg::mm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        } else {
            linalg::mm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        }
        if scale != 1.0 {
            for v in &mut out {
                *v *= scale;
            }
        }
        let t = Tensor::from_vec(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul { a, b, trans_b, m, k, n, scale }))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_scaled(a, b, false, 1.0)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: ConvSpec) -> Result<NodeId> {
        let (in_h, in_w, _) = self.value(x).dims3()?;
        let (out, cols) = conv2d(self.value(x), self.value(w), Some(self.value(b)), &spec)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, spec, cols, in_h, in_w }))
    }

    pub fn resize_up(&mut self, x: NodeId, target: (usize, usize)) -> Result<NodeId> {
        let (h, w, _) = self.value(x).dims3()?;
        let out = resize_up(self.value(x), target)?;
        Ok(self.push(out, Op::ResizeUp { x, src: (h, w) }))
    }

    pub fn resize_down(&mut self, x: NodeId, target: (usize, usize)) -> Result<NodeId> {
        let (h, w, _) = self.value(x).dims3()?;
        let out = resize_down(self.value(x), target)?;
        Ok(self.push(out, Op::ResizeDown { x, src: (h, w) }))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| {
            let v = v as f64;
            let t = (GELU_C0 * (v + GELU_C1 * v * v * v)).tanh();
            (0.5 * v * (1.0 + t)) as f32
        });
        self.push(out, Op::Gelu(x))
    }

    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.clamp(0.0, 1.0));
        self.push(out, Op::Clamp01(x))
    }

    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f32,
    ) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(Error::ShapeMismatch("layer_norm affine params".into()));
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data().to_vec();
        let bd = self.value(beta).data().to_vec();
        let mut out = vec![0.0f32; n * d];
        let mut cache = Vec::with_capacity(n);
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            cache.push((mean as f32, rstd as f32));
            for j in 0..d {
                let xhat = (row[j] as f64 - mean) * rstd;
                out[i * d + j] = (xhat * gd[j] as f64 + bd[j] as f64) as f32;
            }
        }
        let t = Tensor::from_vec(vec![n, d], out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, cache }))
    }

    /// Row-wise softmax. When `allowed` is given, row i distributes mass over
    /// columns [0, allowed[i]) only; later columns get exactly zero.
    pub fn softmax_rows(&mut self, x: NodeId, allowed: Option<Rc<Vec<usize>>>) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        if let Some(a) = &allowed {
            if a.len() != n {
                return Err(Error::ShapeMismatch("softmax mask length".into()));
            }
            if a.iter().any(|&l| l == 0 || l > d) {
                return Err(Error::InvalidArgument("softmax mask prefix out of range".into()));
            }
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            let lim = allowed.as_ref().map_or(d, |a| a[i]);
            let row = &xd[i * d..i * d + lim];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f64;
            for &v in row {
                denom += ((v - max) as f64).exp();
            }
            for j in 0..lim {
                out[i * d + j] = (((row[j] - max) as f64).exp() / denom) as f32;
            }
        }
        let t = Tensor::from_vec(vec![n, d], out)?;
        Ok(self.push(t, Op::SoftmaxRows { x, allowed }))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_rows of nothing".into()));
        }
        let d = self.value(parts[0]).dims2()?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        let mut meta = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, pd) = self.value(p).dims2()?;
            if pd != d {
                return Err(Error::ShapeMismatch("concat_rows column mismatch".into()));
            }
            data.extend_from_slice(self.value(p).data());
            meta.push((p, r));
            rows += r;
        }
        let t = Tensor::from_vec(vec![rows, d], data)?;
        Ok(self.push(t, Op::ConcatRows(meta)))
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > n {
            return Err(Error::InvalidArgument("slice_rows out of range".into()));
        }
        let data = self.value(x).data()[start * d..(start + len) * d].to_vec();
        let t = Tensor::from_vec(vec![len, d], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (n, d) = self.value(x).dims2()?;
        if start + len > d {
            return Err(Error::InvalidArgument("slice_cols out of range".into()));
        }
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xd[i * d + start..i * d + start + len]);
        }
        let t = Tensor::from_vec(vec![n, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start, len, total: d }))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat_cols of nothing".into()));
        }
        let n = self.value(parts[0]).dims2()?.0;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pn, pd) = self.value(p).dims2()?;
            if pn != n {
                return Err(Error::ShapeMismatch("concat_cols row mismatch".into()));
            }
            widths.push((p, pd));
            total += pd;
        }
        let mut data = vec![0.0f32; n * total];
        let mut off = 0;
        for &(p, pd) in &widths {
            let pdta = self.value(p).data();
            for i in 0..n {
                data[i * total + off..i * total + off + pd]
                    .copy_from_slice(&pdta[i * pd..(i + 1) * pd]);
            }
            off += pd;
        }
        let t = Tensor::from_vec(vec![n, total], data)?;
        Ok(self.push(t, Op::ConcatCols(widths)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).sum_f64();
        self.push_scalar(Tensor::scalar(s as f32), Some(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).mean_f64();
        self.push_scalar(Tensor::scalar(s as f32), Some(s), Op::MeanAll(x))
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: NodeId, target: &Tensor) -> Result<NodeId> {
        if self.value(pred).shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "mse pred {:?} vs target {:?}",
                self.value(pred).shape(),
                target.shape()
            )));
        }
        let mut acc = 0.0f64;
        for (&p, &t) in self.value(pred).data().iter().zip(target.data()) {
            let d = p as f64 - t as f64;
            acc += d * d;
        }
        let s = acc / target.numel() as f64;
        Ok(self.push_scalar(
            Tensor::scalar(s as f32),
            Some(s),
            Op::MseLoss { pred, target: target.clone() },
        ))
    }

    /// Numerically stable mean BCE-with-logits over all elements:
    /// mean(max(z,0) - z*y + ln(1 + exp(-|z|))).
    pub fn bitwise_ce(&mut self, logits: NodeId, labels: &[u8]) -> Result<NodeId> {
        let numel = self.value(logits).numel();
        if labels.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "bitwise CE: {} logits vs {} labels",
                numel,
                labels.len()
            )));
        }
        if labels.iter().any(|&b| b > 1) {
            return Err(Error::InvalidArgument("bitwise CE labels must be 0/1".into()));
        }
        let mut acc = 0.0f64;
        for (&z, &y) in self.value(logits).data().iter().zip(labels) {
            let z = z as f64;
            acc += z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p();
        }
        let s = acc / numel as f64;
        Ok(self.push_scalar(
            Tensor::scalar(s as f32),
            Some(s),
            Op::BitCeLoss { logits, labels: labels.to_vec() },
        ))
    }

    /// Quantize rows of an [n, d] tensor to sphere vertices (+-1/sqrt(d)),
    /// straight-through gradient equal to the unit-normalization backward.
    pub fn bsq_ste(&mut self, x: NodeId, eps: f32) -> Result<NodeId> {
        let (_, d) = self.value(x).dims2()?;
        let mag = 1.0 / (d as f64).sqrt();
        let out = Tensor::from_vec(
            self.value(x).shape().to_vec(),
            self.value(x)
                .data()
                .iter()
                .map(|&v| if v >= 0.0 { mag as f32 } else { -mag as f32 })
                .collect(),
        )?;
        Ok(self.push(out, Op::BsqSte { x, eps }))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let Some(g) = slots[i].take() else { continue };
            backward_step(&self.nodes, i, &g, &mut slots)?;
            slots[i] = Some(g);
        }
        Ok(Grads { slots })
    }
}

fn accumulate(slots: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut slots[id.0] {
        Some(existing) => {
            let e = existing.data_mut();
            for (a, b) in e.iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

#[allow(clippy::too_many_lines)]
fn backward_step(
    nodes: &[Node],
    i: usize,
    g: &Tensor,
    slots: &mut [Option<Tensor>],
) -> Result<()> {
    let value = |id: NodeId| &nodes[id.0].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(slots, *a, g.clone());
            accumulate(slots, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(slots, *a, g.clone());
            accumulate(slots, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(slots, *a, g.zip(value(*b), |gv, bv| gv * bv)?);
            accumulate(slots, *b, g.zip(value(*a), |gv, av| gv * av)?);
        }
        Op::Scale(a, s) => {
            accumulate(slots, *a, g.scale(*s));
        }
        Op::AddRowBroadcast(x, row) => {
            let d = value(*row).numel();
            let mut drow = vec![0.0f64; d];
            for r in g.data().chunks(d) {
                for (acc, &v) in drow.iter_mut().zip(r) {
                    *acc += v as f64;
                }
            }
            accumulate(slots, *x, g.clone());
            accumulate(
                slots,
                *row,
                Tensor::from_vec(
                    value(*row).shape().to_vec(),
                    drow.into_iter().map(|v| v as f32).collect(),
                )?,
            );
        }
        Op::BroadcastRow(row, _n) => {
            let d = value(*row).numel();
            let mut drow = vec![0.0f64; d];
            for r in g.data().chunks(d) {
                for (acc, &v) in drow.iter_mut().zip(r) {
                    *acc += v as f64;
                }
            }
            accumulate(
                slots,
                *row,
                Tensor::from_vec(
                    value(*row).shape().to_vec(),
                    drow.into_iter().map(|v| v as f32).collect(),
                )?,
            );
        }
        Op::MatMul { a, b, trans_b, m, k, n, scale } => {
            let gd = if *scale == 1.0 { g.clone() } else { g.scale(*scale) };
            let (m, k, n) = (*m, *k, *n);
            if !trans_b {
                // da = g b^T ; db = a^T g
                let mut da = vec![0.0f32; m * k];
                linalg::mm_nt(gd.data(), value(*b).data(), &mut da, m, n, k);
                let mut db = vec![0.0f32; k * n];
                linalg::mm_tn(value(*a).data(), gd.data(), &mut db, k, m, n);
                accumulate(slots, *a, Tensor::from_vec(vec![m, k], da)?);
                accumulate(slots, *b, Tensor::from_vec(vec![k, n], db)?);
            } else {
                // c = a b^T with b: [n, k]; da = g b ; db = g^T a
                let mut da = vec![0.0f32; m * k];
                linalg::mm_nn(gd.data(), value(*b).data(), &mut da, m, n, k);
                let mut db = vec![0.0f32; n * k];
                linalg::mm_tn(gd.data(), value(*a).data(), &mut db, n, m, k);
                accumulate(slots, *a, Tensor::from_vec(vec![m, k], da)?);
                accumulate(slots, *b, Tensor::from_vec(vec![n, k], db)?);
            }
        }
        Op::Conv2d { x, w, b, spec, cols, in_h, in_w } => {
            let (dx, dw, db) = conv2d_backward(g, cols, value(*w), spec, *in_h, *in_w)?;
            accumulate(slots, *x, dx);
            accumulate(slots, *w, dw);
            accumulate(slots, *b, db);
        }
        Op::ResizeUp { x, src } => {
            accumulate(slots, *x, resize_transposed(g, *src, false)?);
        }
        Op::ResizeDown { x, src } => {
            accumulate(slots, *x, resize_transposed(g, *src, true)?);
        }
        Op::Gelu(x) => {
            let dx = g.zip(value(*x), |gv, xv| {
                let v = xv as f64;
                let inner = GELU_C0 * (v + GELU_C1 * v * v * v);
                let t = inner.tanh();
                let dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * v * v);
                let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner;
                (gv as f64 * d) as f32
            })?;
            accumulate(slots, *x, dx);
        }
        Op::Clamp01(x) => {
            let dx = g.zip(value(*x), |gv, xv| {
                if (0.0..=1.0).contains(&xv) {
                    gv
                } else {
                    0.0
                }
            })?;
            accumulate(slots, *x, dx);
        }
        Op::LayerNorm { x, gamma, beta, cache } => {
            let (n, d) = value(*x).dims2()?;
            let xd = value(*x).data();
            let gd = value(*gamma).data();
            let mut dx = vec![0.0f32; n * d];
            let mut dgamma = vec![0.0f64; d];
            let mut dbeta = vec![0.0f64; d];
            for r in 0..n {
                let (mean, rstd) = cache[r];
                let (mean, rstd) = (mean as f64, rstd as f64);
                let grow = &g.data()[r * d..(r + 1) * d];
                let xrow = &xd[r * d..(r + 1) * d];
                let mut sum_dy = 0.0f64;
                let mut sum_dy_xhat = 0.0f64;
                for j in 0..d {
                    let xhat = (xrow[j] as f64 - mean) * rstd;
                    let dy = grow[j] as f64 * gd[j] as f64;
                    sum_dy += dy;
                    sum_dy_xhat += dy * xhat;
                    dgamma[j] += grow[j] as f64 * xhat;
                    dbeta[j] += grow[j] as f64;
                }
                let inv_d = 1.0 / d as f64;
                for j in 0..d {
                    let xhat = (xrow[j] as f64 - mean) * rstd;
                    let dy = grow[j] as f64 * gd[j] as f64;
                    dx[r * d + j] =
                        (rstd * (dy - inv_d * sum_dy - xhat * inv_d * sum_dy_xhat)) as f32;
                }
            }
            accumulate(slots, *x, Tensor::from_vec(vec![n, d], dx)?);
            accumulate(
                slots,
                *gamma,
                Tensor::from_vec(vec![d], dgamma.into_iter().map(|v| v as f32).collect())?,
            );
            accumulate(
                slots,
                *beta,
                Tensor::from_vec(vec![d], dbeta.into_iter().map(|v| v as f32).collect())?,
            );
        }
        Op::SoftmaxRows { x, allowed } => {
            let (n, d) = value(*x).dims2()?;
            let p = &nodes[i].value;
            let mut dx = vec![0.0f32; n * d];
            for r in 0..n {
                let lim = allowed.as_ref().map_or(d, |a| a[r]);
                let prow = &p.data()[r * d..r * d + lim];
                let grow = &g.data()[r * d..r * d + lim];
                let dot: f64 = prow
                    .iter()
                    .zip(grow)
                    .map(|(&pv, &gv)| pv as f64 * gv as f64)
                    .sum();
                for j in 0..lim {
                    dx[r * d + j] = (prow[j] as f64 * (grow[j] as f64 - dot)) as f32;
                }
            }
            accumulate(slots, *x, Tensor::from_vec(vec![n, d], dx)?);
        }
        Op::ConcatRows(parts) => {
            let d = g.dims2()?.1;
            let mut off = 0;
            for &(p, r) in parts {
                let part = g.data()[off * d..(off + r) * d].to_vec();
                accumulate(slots, p, Tensor::from_vec(vec![r, d], part)?);
                off += r;
            }
        }
        Op::SliceRows { x, start } => {
            let (n, d) = value(*x).dims2()?;
            let (len, _) = g.dims2()?;
            let mut dx = vec![0.0f32; n * d];
            dx[start * d..(start + len) * d].copy_from_slice(g.data());
            accumulate(slots, *x, Tensor::from_vec(vec![n, d], dx)?);
        }
        Op::SliceCols { x, start, len, total } => {
            let n = value(*x).dims2()?.0;
            let mut dx = vec![0.0f32; n * total];
            for r in 0..n {
                dx[r * total + start..r * total + start + len]
                    .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
            }
            accumulate(slots, *x, Tensor::from_vec(vec![n, *total], dx)?);
        }
        Op::ConcatCols(parts) => {
            let (n, total) = g.dims2()?;
            let mut off = 0;
            for &(p, pd) in parts {
                let mut dp = vec![0.0f32; n * pd];
                for r in 0..n {
                    dp[r * pd..(r + 1) * pd]
                        .copy_from_slice(&g.data()[r * total + off..r * total + off + pd]);
                }
                accumulate(slots, p, Tensor::from_vec(vec![n, pd], dp)?);
                off += pd;
            }
        }
        Op::SumAll(x) => {
            let gs = g.data()[0];
            accumulate(slots, *x, Tensor::full(value(*x).shape(), gs));
        }
        Op::MeanAll(x) => {
            let gs = g.data()[0] / value(*x).numel() as f32;
            accumulate(slots, *x, Tensor::full(value(*x).shape(), gs));
        }
        Op::MseLoss { pred, target } => {
            let gs = g.data()[0] as f64;
            let n = target.numel() as f64;
            let dp: Vec<f32> = value(*pred)
                .data()
                .iter()
                .zip(target.data())
                .map(|(&p, &t)| (2.0 * (p as f64 - t as f64) * gs / n) as f32)
                .collect();
            accumulate(slots, *pred, Tensor::from_vec(target.shape().to_vec(), dp)?);
        }
        Op::BitCeLoss { logits, labels } => {
            let gs = g.data()[0] as f64;
            let n = labels.len() as f64;
            let dz: Vec<f32> = value(*logits)
                .data()
                .iter()
                .zip(labels)
                .map(|(&z, &y)| {
                    let sigma = 1.0 / (1.0 + (-(z as f64)).exp());
                    ((sigma - y as f64) * gs / n) as f32
                })
                .collect();
            accumulate(
                slots,
                *logits,
                Tensor::from_vec(value(*logits).shape().to_vec(), dz)?,
            );
        }
        Op::BsqSte { x, eps } => {
            let (n, d) = value(*x).dims2()?;
            let xd = value(*x).data();
            let mut dx = vec![0.0f32; n * d];
            for r in 0..n {
                let row = &xd[r * d..(r + 1) * d];
                let grow = &g.data()[r * d..(r + 1) * d];
                let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                if norm <= *eps as f64 {
                    // Vanishing residual: plain straight-through.
                    dx[r * d..(r + 1) * d].copy_from_slice(grow);
                    continue;
                }
                let dot: f64 = row
                    .iter()
                    .zip(grow)
                    .map(|(&v, &gv)| (v as f64 / norm) * gv as f64)
                    .sum();
                for j in 0..d {
                    let vhat = row[j] as f64 / norm;
                    dx[r * d + j] = ((grow[j] as f64 - vhat * dot) / norm) as f32;
                }
            }
            accumulate(slots, *x, Tensor::from_vec(vec![n, d], dx)?);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::grad_check;
    use crate::numerics::rng::Rng;

    #[test]
    fn sum_of_squares_gradient() {
        let x = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap().with_grad();
        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let sq = tape.mul(xid, xid).unwrap();
        let loss = tape.sum_all(sq);
        let mut grads = tape.backward(loss).unwrap();
        let g = grads.take(xid).unwrap();
        assert_eq!(g.data(), &[2.0, 4.0]);
    }

    #[test]
    fn scalar_f64_tracks_through_add_scale() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_vec(vec![4], vec![0.1; 4]).unwrap());
        let s1 = tape.sum_all(a);
        let s2 = tape.scale(s1, 0.5);
        let s3 = tape.add(s2, s2).unwrap();
        let expect = 4.0 * (0.1f32 as f64); // exact f64 arithmetic on stored f32 values
        assert!((tape.scalar(s3) - expect).abs() < 1e-15);
    }

    #[test]
    fn matmul_grads_match_finite_differences() {
        let mut rng = Rng::seeded(2);
        let b = rng.fill_normal(&[3, 4], 0.5);
        let params = rng.fill_normal(&[2, 3], 0.3).with_grad();
        let f = |p: &Tensor| {
            let mut tape = Tape::new();
            let pid = tape.leaf(p);
            let bid = tape.constant(b.clone());
            let y = tape.matmul(pid, bid)?;
            let loss = tape.sum_all(y);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(pid).unwrap()))
        };
        let err = grad_check(&f, &params, 1e-4).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn matmul_transposed_grads() {
        let mut rng = Rng::seeded(9);
        let b = rng.fill_normal(&[5, 4], 0.5); // used transposed
        let params = rng.fill_normal(&[3, 4], 0.3).with_grad();
        let f = |p: &Tensor| {
            let mut tape = Tape::new();
            let pid = tape.leaf(p);
            let bid = tape.constant(b.clone());
            let y = tape.matmul_scaled(pid, bid, true, 0.5)?;
            let loss = tape.sum_all(y);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(pid).unwrap()))
        };
        let err = grad_check(&f, &params, 1e-4).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn layer_norm_grads() {
        let mut rng = Rng::seeded(4);
        let gamma = rng.fill_normal(&[6], 0.5);
        let beta = rng.fill_normal(&[6], 0.5);
        let params = rng.fill_normal(&[3, 6], 1.0).with_grad();
        let f = |p: &Tensor| {
            let mut tape = Tape::new();
            let pid = tape.leaf(p);
            let gid = tape.constant(gamma.clone());
            let bid = tape.constant(beta.clone());
            let y = tape.layer_norm(pid, gid, bid, 1e-5)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.mean_all(sq);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(pid).unwrap()))
        };
        let err = grad_check(&f, &params, 1e-3).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn layer_norm_param_grads() {
        let mut rng = Rng::seeded(14);
        let x = rng.fill_normal(&[3, 6], 1.0);
        let beta = rng.fill_normal(&[6], 0.5);
        let params = rng.fill_normal(&[6], 0.5).with_grad();
        let f = |p: &Tensor| {
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let gid = tape.leaf(p);
            let bid = tape.constant(beta.clone());
            let y = tape.layer_norm(xid, gid, bid, 1e-5)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.mean_all(sq);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(gid).unwrap()))
        };
        let err = grad_check(&f, &params, 1e-3).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn softmax_causal_grads_and_masking() {
        let mut rng = Rng::seeded(5);
        let allowed = Rc::new(vec![1usize, 2, 4]);
        let params = rng.fill_normal(&[3, 4], 1.0).with_grad();
        {
            let mut tape = Tape::new();
            let pid = tape.leaf(&params);
            let y = tape.softmax_rows(pid, Some(allowed.clone())).unwrap();
            let v = tape.value(y);
            assert_eq!(v.data()[0], 1.0); // row 0 sees one column
            assert_eq!(v.data()[1], 0.0);
            assert_eq!(v.data()[2], 0.0);
            let row1: f32 = v.data()[4..6].iter().sum();
            assert!((row1 - 1.0).abs() < 1e-6);
            assert_eq!(v.data()[6], 0.0);
        }
        let w = rng.fill_normal(&[3, 4], 1.0);
        let f = |p: &Tensor| {
            let mut tape = Tape::new();
            let pid = tape.leaf(p);
            let y = tape.softmax_rows(pid, Some(allowed.clone()))?;
            let wid = tape.constant(w.clone());
            let prod = tape.mul(y, wid)?;
            let loss = tape.sum_all(prod);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(pid).unwrap()))
        };
        let err = grad_check(&f, &params, 1e-3).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn conv_grads() {
        let mut rng = Rng::seeded(6);
        // All-positive fixture keeps every gradient coordinate away from zero,
        // where f32 forward rounding would dominate the relative error.
        let spec = ConvSpec { kernel: 3, stride: 2, pad: 1, cin: 2, cout: 3 };
        let x = rng.fill_uniform(&[5, 5, 2], 0.2, 0.8);
        let bias = rng.fill_uniform(&[3], 0.1, 0.3);
        let params = rng.fill_uniform(&[18, 3], 0.1, 0.5).with_grad();
        let f = |p: &Tensor| {
            let mut tape = Tape::new();
            let xid = tape.constant(x.clone());
            let wid = tape.leaf(p);
            let bid = tape.constant(bias.clone());
            let y = tape.conv2d(xid, wid, bid, spec)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum_all(sq);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(wid).unwrap()))
        };
        let err = grad_check(&f, &params, 1e-3).unwrap();
        assert!(err < 1e-3, "rel err {err}");

        // Gradient w.r.t. the input image as well.
        let w = rng.fill_uniform(&[18, 3], 0.1, 0.5);
        let params_x = rng.fill_uniform(&[5, 5, 2], 0.2, 0.8).with_grad();
        let fx = |p: &Tensor| {
            let mut tape = Tape::new();
            let xid = tape.leaf(p);
            let wid = tape.constant(w.clone());
            let bid = tape.constant(bias.clone());
            let y = tape.conv2d(xid, wid, bid, spec)?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum_all(sq);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(xid).unwrap()))
        };
        let err = grad_check(&fx, &params_x, 1e-3).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn resize_grads() {
        let mut rng = Rng::seeded(7);
        let params = rng.fill_normal(&[4, 4, 2], 1.0).with_grad();
        let f_up = |p: &Tensor| {
            let mut tape = Tape::new();
            let pid = tape.leaf(p);
            let y = tape.resize_up(pid, (7, 9))?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum_all(sq);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(pid).unwrap()))
        };
        assert!(grad_check(&f_up, &params, 1e-3).unwrap() < 1e-3);
        let f_down = |p: &Tensor| {
            let mut tape = Tape::new();
            let pid = tape.leaf(p);
            let y = tape.resize_down(pid, (3, 2))?;
            let sq = tape.mul(y, y)?;
            let loss = tape.sum_all(sq);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(pid).unwrap()))
        };
        assert!(grad_check(&f_down, &params, 1e-3).unwrap() < 1e-3);
    }

    #[test]
    fn gelu_grads() {
        let mut rng = Rng::seeded(8);
        let params = rng.fill_normal(&[10], 1.0).with_grad();
        let f = |p: &Tensor| {
            let mut tape = Tape::new();
            let pid = tape.leaf(p);
            let y = tape.gelu(pid);
            let loss = tape.sum_all(y);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(pid).unwrap()))
        };
        assert!(grad_check(&f, &params, 1e-4).unwrap() < 1e-3);
    }

    #[test]
    fn bsq_ste_matches_normalize_gradient() {
        // d sum(bsq_ste(x)) / dx should equal d sum(x / |x|) / dx per row.
        let mut rng = Rng::seeded(10);
        let x = rng.fill_normal(&[5, 8], 1.0).with_grad();

        let mut tape = Tape::new();
        let xid = tape.leaf(&x);
        let q = tape.bsq_ste(xid, 1e-8).unwrap();
        let loss = tape.sum_all(q);
        let mut grads = tape.backward(loss).unwrap();
        let g_ste = grads.take(xid).unwrap();

        // Finite differences of the normalization surrogate.
        let normalize_sum = |t: &Tensor| -> f64 {
            let (n, d) = t.dims2().unwrap();
            let mut acc = 0.0f64;
            for r in 0..n {
                let row = &t.data()[r * d..(r + 1) * d];
                let norm = row.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                acc += row.iter().map(|&v| v as f64 / norm).sum::<f64>();
            }
            acc
        };
        let mut max_rel = 0.0f64;
        for i in 0..x.numel() {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.data_mut()[i] = (plus.data()[i] as f64 + 1e-4) as f32;
            minus.data_mut()[i] = (minus.data()[i] as f64 - 1e-4) as f32;
            let delta = plus.data()[i] as f64 - minus.data()[i] as f64;
            let fd = (normalize_sum(&plus) - normalize_sum(&minus)) / delta;
            let an = g_ste.data()[i] as f64;
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-3, "rel err {max_rel}");
    }

    #[test]
    fn concat_slice_round_trip_grads() {
        let mut rng = Rng::seeded(12);
        let params = rng.fill_normal(&[4, 6], 1.0).with_grad();
        let w = rng.fill_normal(&[4, 6], 1.0);
        let f = |p: &Tensor| {
            let mut tape = Tape::new();
            let pid = tape.leaf(p);
            let top = tape.slice_rows(pid, 0, 2)?;
            let bot = tape.slice_rows(pid, 2, 2)?;
            let whole = tape.concat_rows(&[top, bot])?;
            let left = tape.slice_cols(whole, 0, 3)?;
            let right = tape.slice_cols(whole, 3, 3)?;
            let again = tape.concat_cols(&[left, right])?;
            let wid = tape.constant(w.clone());
            let prod = tape.mul(again, wid)?;
            let loss = tape.sum_all(prod);
            let mut grads = tape.backward(loss)?;
            Ok((tape.scalar(loss), grads.take(pid).unwrap()))
        };
        assert!(grad_check(&f, &params, 1e-3).unwrap() < 1e-3);
    }

    #[test]
    fn bitwise_ce_zero_logits_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[4, 4]));
        let labels = vec![0u8, 1, 0, 1, 1, 0, 1, 0, 0, 0, 1, 1, 1, 1, 0, 0];
        let loss = tape.bitwise_ce(z, &labels).unwrap();
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bitwise_ce_rejects_bad_labels() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.bitwise_ce(z, &[0, 1, 2, 0]).is_err());
        assert!(tape.bitwise_ce(z, &[0, 1]).is_err());
    }
}
