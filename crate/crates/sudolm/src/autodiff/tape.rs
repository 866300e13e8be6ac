//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! A tape records every operation in insertion order, which is already a
//! topological order: an op can only reference node ids that exist when it
//! is recorded. `backward` walks the tape once in strict reverse order and
//! accumulates exact analytic gradients into each participant.
//!
//! Summation order inside every kernel is fixed (left to right, row major),
//! so identical inputs produce bit-identical values and gradients.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    /// `a @ b`; `b` may be 2-D (shared across leading dims of `a`) or have
    /// the same leading dims as `a`.
    MatMul { a: NodeId, b: NodeId },
    /// `a + alpha * b`; `b` may broadcast over the leading dims of `a`.
    Add { a: NodeId, b: NodeId, alpha: f32 },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f32 },
    Embedding { table: NodeId, ids: Vec<u32> },
    SoftmaxRows { a: NodeId },
    LayerNorm { a: NodeId, gain: NodeId, bias: NodeId },
    Gelu { a: NodeId },
    Reshape { a: NodeId },
    Transpose { a: NodeId, ax0: usize, ax1: usize },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, axis: usize, start: usize },
    LogSumExpRows { a: NodeId },
    LogSigmoid { a: NodeId },
    /// Masked sum of per-position `-log softmax(logits)[target]`; scalar.
    CrossEntropy { logits: NodeId, targets: Vec<u32>, mask: Vec<f32> },
    /// As `CrossEntropy` but summed per leading row: `[B, T, V] -> [B]`.
    RowNll { logits: NodeId, targets: Vec<u32>, mask: Vec<f32> },
    SumAll { a: NodeId },
}

struct Node {
    value: Tensor,
    op: Op,
    /// Op-specific saved state for backward (log-sum-exps, norm stats).
    aux: Vec<f32>,
}

/// The recording tape. Single-threaded by design; independent tapes are
/// independent.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

const EPS_LN: f32 = 1e-5;
const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, aux: Vec<f32>) -> NodeId {
        self.nodes.push(Node { value, op, aux });
        self.grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, Vec::new())
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient accumulated into `id` by `backward`, if any.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::from_vec(self.nodes[id.0].value.shape(), g.clone()).expect("shape"))
    }

    fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    // ── Forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Self::shape_err("matmul", &ash, &bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bk, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let shared_rhs = bsh.len() == 2 && ash.len() >= 2;
        if bk != k || (!shared_rhs && bsh[..bsh.len() - 2] != ash[..ash.len() - 2]) {
            return Err(Self::shape_err("matmul", &ash, &bsh));
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let mut out = vec![0.0f32; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for s in 0..batch {
                let bslab = if shared_rhs { &bv[..] } else { &bv[s * k * n..(s + 1) * k * n] };
                mm_acc(&av[s * m * k..(s + 1) * m * k], bslab, &mut out[s * m * n..(s + 1) * m * n], m, k, n);
            }
        }
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::MatMul { a, b },
            Vec::new(),
        ))
    }

    /// `a + alpha * b`. Shapes must match exactly, or `b`'s shape must be a
    /// trailing suffix of `a`'s (broadcast over the leading dims).
    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, alpha: f32) -> Result<NodeId> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != bsh[..] {
            return Err(Self::shape_err("add", &ash, &bsh));
        }
        let bn: usize = bsh.iter().product::<usize>().max(1);
        let mut out = self.value(a).data().to_vec();
        {
            let bv = self.value(b).data();
            if bn == out.len() {
                for (o, &v) in out.iter_mut().zip(bv) {
                    *o += alpha * v;
                }
            } else {
                for chunk in out.chunks_mut(bn) {
                    for (o, &v) in chunk.iter_mut().zip(bv) {
                        *o += alpha * v;
                    }
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&ash, out)?,
            Op::Add { a, b, alpha },
            Vec::new(),
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_scaled(a, b, 1.0)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.add_scaled(a, b, -1.0)
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ash, bsh) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if ash != bsh {
            return Err(Self::shape_err("mul", &ash, &bsh));
        }
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::from_vec(&ash, out)?, Op::Mul { a, b }, Vec::new()))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        let out: Vec<f32> = self.value(a).data().iter().map(|x| c * x).collect();
        Ok(self.push(Tensor::from_vec(&sh, out)?, Op::Scale { a, c }, Vec::new()))
    }

    /// Row lookup: `table[V, D]` indexed by `ids` (any count) giving
    /// `[len(ids), D]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let tsh = self.value(table).shape().to_vec();
        if tsh.len() != 2 {
            return Err(Self::shape_err("embedding", &tsh, &[ids.len()]));
        }
        let (v, d) = (tsh[0], tsh[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::InvalidId {
                id: bad,
                size: v as u32,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        {
            let tv = self.value(table).data();
            for &i in ids {
                out.extend_from_slice(&tv[i as usize * d..(i as usize + 1) * d]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[ids.len(), d], out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            Vec::new(),
        ))
    }

    /// Softmax over the last dimension, numerically stabilized by the row
    /// maximum. Every row sums to 1.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if sh.is_empty() {
            return Err(Self::shape_err("softmax_rows", &sh, &[]));
        }
        let cols = sh[sh.len() - 1];
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for v in row.iter_mut() {
                *v = fast_exp(*v - mx);
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        Ok(self.push(Tensor::from_vec(&sh, out)?, Op::SoftmaxRows { a }, Vec::new()))
    }

    /// Layer normalization over the last dimension with learned gain and
    /// bias (each shaped `[cols]`).
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        let cols = *sh.last().ok_or_else(|| Self::shape_err("layer_norm", &sh, &[]))?;
        for p in [gain, bias] {
            if self.value(p).shape() != [cols] {
                return Err(Self::shape_err("layer_norm", &sh, self.value(p).shape()));
            }
        }
        let rows = self.value(a).numel() / cols;
        let mut out = vec![0.0f32; rows * cols];
        let mut aux = vec![0.0f32; 2 * rows]; // (mean, rstd) per row
        {
            let x = self.value(a).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for r in 0..rows {
                let xr = &x[r * cols..(r + 1) * cols];
                let mean = xr.iter().sum::<f32>() / cols as f32;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                let rstd = 1.0 / (var + EPS_LN).sqrt();
                aux[2 * r] = mean;
                aux[2 * r + 1] = rstd;
                for c in 0..cols {
                    out[r * cols + c] = (xr[c] - mean) * rstd * g[c] + b[c];
                }
            }
        }
        Ok(self.push(
            Tensor::from_vec(&sh, out)?,
            Op::LayerNorm { a, gain, bias },
            aux,
        ))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                let u = GELU_C * (x + 0.044715 * x * x * x);
                0.5 * x * (1.0 + fast_tanh(u))
            })
            .collect();
        Ok(self.push(Tensor::from_vec(&sh, out)?, Op::Gelu { a }, Vec::new()))
    }

    pub fn reshape(&mut self, a: NodeId, new_shape: &[usize]) -> Result<NodeId> {
        let n: usize = new_shape.iter().product();
        if n != self.value(a).numel() {
            return Err(Self::shape_err("reshape", self.value(a).shape(), new_shape));
        }
        let out = self.value(a).data().to_vec();
        Ok(self.push(Tensor::from_vec(new_shape, out)?, Op::Reshape { a }, Vec::new()))
    }

    /// Swaps two axes (with data movement).
    pub fn transpose(&mut self, a: NodeId, ax0: usize, ax1: usize) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if ax0 >= sh.len() || ax1 >= sh.len() {
            return Err(Self::shape_err("transpose", &sh, &[ax0, ax1]));
        }
        let mut out_shape = sh.clone();
        out_shape.swap(ax0, ax1);
        let out = permute_swap(self.value(a).data(), &sh, ax0, ax1);
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::Transpose { a, ax0, ax1 },
            Vec::new(),
        ))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let base = self.value(parts[0]).shape().to_vec();
        if axis >= base.len() {
            return Err(Self::shape_err("concat", &base, &[axis]));
        }
        let mut axis_total = 0;
        for &p in parts {
            let sh = self.value(p).shape();
            if sh.len() != base.len()
                || sh.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(Self::shape_err("concat", &base, sh));
            }
            axis_total += sh[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * axis_total * inner];
        let mut offset = 0;
        for &p in parts {
            let d = self.value(p).shape()[axis];
            let pv = self.value(p).data();
            for o in 0..outer {
                let src = &pv[o * d * inner..(o + 1) * d * inner];
                let dst_start = (o * axis_total + offset) * inner;
                out[dst_start..dst_start + d * inner].copy_from_slice(src);
            }
            offset += d;
        }
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::Concat { parts: parts.to_vec(), axis },
            Vec::new(),
        ))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        if axis >= sh.len() || start + len > sh[axis] {
            return Err(Self::shape_err("slice", &sh, &[axis, start, len]));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let mut out_shape = sh.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0f32; outer * len * inner];
        {
            let av = self.value(a).data();
            for o in 0..outer {
                let src_start = (o * sh[axis] + start) * inner;
                out[o * len * inner..(o + 1) * len * inner]
                    .copy_from_slice(&av[src_start..src_start + len * inner]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(&out_shape, out)?,
            Op::Slice { a, axis, start },
            Vec::new(),
        ))
    }

    /// Log-sum-exp over the last dimension (drops it).
    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        let cols = *sh.last().ok_or_else(|| Self::shape_err("logsumexp", &sh, &[]))?;
        let rows = self.value(a).numel() / cols;
        let mut out = vec![0.0f32; rows];
        for (r, o) in out.iter_mut().enumerate() {
            *o = lse_row(&self.value(a).data()[r * cols..(r + 1) * cols]);
        }
        Ok(self.push(
            Tensor::from_vec(&sh[..sh.len() - 1], out)?,
            Op::LogSumExpRows { a },
            Vec::new(),
        ))
    }

    /// Elementwise `log(sigmoid(x))`, computed stably.
    pub fn log_sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let sh = self.value(a).shape().to_vec();
        let out: Vec<f32> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| {
                if x >= 0.0 {
                    -(1.0 + fast_exp(-x)).ln()
                } else {
                    x - (1.0 + fast_exp(x)).ln()
                }
            })
            .collect();
        Ok(self.push(Tensor::from_vec(&sh, out)?, Op::LogSigmoid { a }, Vec::new()))
    }

    fn ce_check(
        &self,
        logits: NodeId,
        targets: &[u32],
        mask: &[f32],
    ) -> Result<(usize, usize)> {
        let sh = self.value(logits).shape();
        if sh.len() < 2 {
            return Err(Self::shape_err("cross_entropy", sh, &[targets.len()]));
        }
        let cols = sh[sh.len() - 1];
        let rows = self.value(logits).numel() / cols;
        if targets.len() != rows || mask.len() != rows {
            return Err(Self::shape_err("cross_entropy", sh, &[targets.len(), mask.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= cols) {
            return Err(Error::InvalidId {
                id: bad,
                size: cols as u32,
            });
        }
        Ok((rows, cols))
    }

    /// Masked sum over positions of `-log softmax(logits)[target]`.
    /// `targets` and `mask` run over all leading positions of `logits`.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[u32],
        mask: &[f32],
    ) -> Result<NodeId> {
        let (rows, cols) = self.ce_check(logits, targets, mask)?;
        let mut aux = vec![0.0f32; rows];
        let mut total = 0.0f32;
        {
            let lv = self.value(logits).data();
            for r in 0..rows {
                let row = &lv[r * cols..(r + 1) * cols];
                let lse = lse_row(row);
                aux[r] = lse;
                total += mask[r] * (lse - row[targets[r] as usize]);
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            aux,
        ))
    }

    /// Per-sequence masked NLL: logits `[B, T, V]` reduce to `[B]`, each the
    /// masked sum over that row's positions.
    pub fn row_nll(&mut self, logits: NodeId, targets: &[u32], mask: &[f32]) -> Result<NodeId> {
        let sh = self.value(logits).shape().to_vec();
        if sh.len() != 3 {
            return Err(Self::shape_err("row_nll", &sh, &[targets.len()]));
        }
        let (rows, cols) = self.ce_check(logits, targets, mask)?;
        let (b, t) = (sh[0], sh[1]);
        debug_assert_eq!(rows, b * t);
        let mut aux = vec![0.0f32; rows];
        let mut out = vec![0.0f32; b];
        {
            let lv = self.value(logits).data();
            for r in 0..rows {
                let row = &lv[r * cols..(r + 1) * cols];
                let lse = lse_row(row);
                aux[r] = lse;
                out[r / t] += mask[r] * (lse - row[targets[r] as usize]);
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[b], out)?,
            Op::RowNll {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            aux,
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f32 = self.value(a).data().iter().sum();
        Ok(self.push(Tensor::scalar(total), Op::SumAll { a }, Vec::new()))
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).numel() as f32;
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n)
    }

    // ── Backward ───────────────────────────────────────────────────────

    /// Backpropagates from a scalar loss. Gradients accumulate into every
    /// tape participant; repeated calls keep accumulating.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        // One clean reverse pass in scratch buffers, merged into the
        // persistent per-node gradients afterwards.
        let mut pass: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        pass[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let g = match pass[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut pass);
            pass[id] = Some(g);
        }
        debug_assert!(pass.len() == self.grads.len());
        for (slot, computed) in self.grads.iter_mut().zip(pass) {
            if let Some(g) = computed {
                add_into(slot.get_or_insert_with(|| vec![0.0; g.len()]), &g);
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f32], pass: &mut [Option<Vec<f32>>]) {
        fn buf<'p>(
            pass: &'p mut [Option<Vec<f32>>],
            node: NodeId,
            numel: usize,
        ) -> &'p mut Vec<f32> {
            pass[node.0].get_or_insert_with(|| vec![0.0; numel])
        }
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let ash = self.value(a).shape();
                let bsh = self.value(b).shape();
                let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
                let n = bsh[bsh.len() - 1];
                let shared_rhs = bsh.len() == 2;
                let batch: usize = ash[..ash.len() - 2].iter().product();
                let av = self.value(a).data();
                let bv = self.value(b).data();
                {
                    let da = buf(pass, a, av.len());
                    for s in 0..batch {
                        let bslab = if shared_rhs {
                            bv
                        } else {
                            &bv[s * k * n..(s + 1) * k * n]
                        };
                        mm_abt_acc(
                            &g[s * m * n..(s + 1) * m * n],
                            bslab,
                            &mut da[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                {
                    let db = buf(pass, b, bv.len());
                    for s in 0..batch {
                        let dbslab = if shared_rhs {
                            &mut db[..]
                        } else {
                            &mut db[s * k * n..(s + 1) * k * n]
                        };
                        mm_atb_acc(
                            &av[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            dbslab,
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add { a, b, alpha } => {
                let (a, b, alpha) = (*a, *b, *alpha);
                add_into(buf(pass, a, g.len()), g);
                let bn = self.value(b).numel();
                let db = buf(pass, b, bn);
                if bn == g.len() {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += alpha * gv;
                    }
                } else {
                    for chunk in g.chunks(bn) {
                        for (d, &gv) in db.iter_mut().zip(chunk) {
                            *d += alpha * gv;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let av = self.value(a).data();
                let bv = self.value(b).data();
                {
                    let da = buf(pass, a, av.len());
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                let db = buf(pass, b, bv.len());
                for i in 0..g.len() {
                    db[i] += g[i] * av[i];
                }
            }
            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da = buf(pass, a, g.len());
                for i in 0..g.len() {
                    da[i] += c * g[i];
                }
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let d = self.value(table).shape()[1];
                let numel = self.value(table).numel();
                let dt = buf(pass, table, numel);
                for (row, &tok) in ids.iter().enumerate() {
                    let dst = &mut dt[tok as usize * d..(tok as usize + 1) * d];
                    for (j, dv) in dst.iter_mut().enumerate() {
                        *dv += g[row * d + j];
                    }
                }
            }
            Op::SoftmaxRows { a } => {
                let a = *a;
                let y = self.nodes[id].value.data();
                let cols = *self.nodes[id].value.shape().last().unwrap();
                let da = buf(pass, a, y.len());
                for r in 0..y.len() / cols {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f32 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    let dar = &mut da[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        dar[c] += yr[c] * (gr[c] - dot);
                    }
                }
            }
            Op::LayerNorm { a, gain, bias } => {
                let (a, gain, bias) = (*a, *gain, *bias);
                let aux = &self.nodes[id].aux;
                let x = self.value(a).data();
                let gn = self.value(gain).data();
                let cols = gn.len();
                let rows = x.len() / cols;
                {
                    let dg = buf(pass, gain, cols);
                    for r in 0..rows {
                        let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                        for c in 0..cols {
                            dg[c] += g[r * cols + c] * (x[r * cols + c] - mean) * rstd;
                        }
                    }
                }
                {
                    let db = buf(pass, bias, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            db[c] += g[r * cols + c];
                        }
                    }
                }
                let da = buf(pass, a, x.len());
                for r in 0..rows {
                    let (mean, rstd) = (aux[2 * r], aux[2 * r + 1]);
                    // dxhat = g * gain;
                    // dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let mut sum_dxh = 0.0f32;
                    let mut sum_dxh_xh = 0.0f32;
                    for c in 0..cols {
                        let xh = (x[r * cols + c] - mean) * rstd;
                        let dxh = g[r * cols + c] * gn[c];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    let inv = 1.0 / cols as f32;
                    for c in 0..cols {
                        let xh = (x[r * cols + c] - mean) * rstd;
                        let dxh = g[r * cols + c] * gn[c];
                        da[r * cols + c] += rstd * (dxh - inv * sum_dxh - xh * inv * sum_dxh_xh);
                    }
                }
            }
            Op::Gelu { a } => {
                let a = *a;
                let x = self.value(a).data();
                let da = buf(pass, a, x.len());
                for i in 0..g.len() {
                    let xi = x[i];
                    let u = GELU_C * (xi + 0.044715 * xi * xi * xi);
                    let t = fast_tanh(u);
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * xi * xi);
                    let d = 0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du;
                    da[i] += g[i] * d;
                }
            }
            Op::Reshape { a } => {
                let a = *a;
                add_into(buf(pass, a, g.len()), g);
            }
            Op::Transpose { a, ax0, ax1 } => {
                let (a, ax0, ax1) = (*a, *ax0, *ax1);
                let out_shape = self.nodes[id].value.shape();
                let gt = permute_swap(g, out_shape, ax0, ax1);
                add_into(buf(pass, a, gt.len()), &gt);
            }
            Op::Concat { parts, axis } => {
                let axis = *axis;
                let out_shape = self.nodes[id].value.shape();
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let axis_total = out_shape[axis];
                let mut offset = 0;
                for &p in parts {
                    let d = self.value(p).shape()[axis];
                    let numel = self.value(p).numel();
                    let dp = buf(pass, p, numel);
                    for o in 0..outer {
                        let src_start = (o * axis_total + offset) * inner;
                        let dst = &mut dp[o * d * inner..(o + 1) * d * inner];
                        for (j, dv) in dst.iter_mut().enumerate() {
                            *dv += g[src_start + j];
                        }
                    }
                    offset += d;
                }
            }
            Op::Slice { a, axis, start } => {
                let (a, axis, start) = (*a, *axis, *start);
                let in_shape = self.value(a).shape();
                let out_shape = self.nodes[id].value.shape();
                let outer: usize = in_shape[..axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = out_shape[axis];
                let in_axis = in_shape[axis];
                let numel = self.value(a).numel();
                let da = buf(pass, a, numel);
                for o in 0..outer {
                    let dst_start = (o * in_axis + start) * inner;
                    for j in 0..len * inner {
                        da[dst_start + j] += g[o * len * inner + j];
                    }
                }
            }
            Op::LogSumExpRows { a } => {
                let a = *a;
                let cols = *self.value(a).shape().last().unwrap();
                let x = self.value(a).data();
                let y = self.nodes[id].value.data();
                let da = buf(pass, a, x.len());
                for r in 0..y.len() {
                    for c in 0..cols {
                        da[r * cols + c] += g[r] * fast_exp(x[r * cols + c] - y[r]);
                    }
                }
            }
            Op::LogSigmoid { a } => {
                let a = *a;
                let x = self.value(a).data();
                let da = buf(pass, a, x.len());
                for i in 0..g.len() {
                    // d/dx log sigmoid(x) = sigmoid(-x)
                    da[i] += g[i] * sigmoid(-x[i]);
                }
            }
            Op::CrossEntropy { logits, targets, mask } => {
                let logits = *logits;
                let lse = &self.nodes[id].aux;
                let cols = *self.value(logits).shape().last().unwrap();
                let lv = self.value(logits).data();
                let gs = g[0];
                let dl = buf(pass, logits, lv.len());
                for r in 0..targets.len() {
                    if mask[r] == 0.0 {
                        continue;
                    }
                    let w = gs * mask[r];
                    let row = &lv[r * cols..(r + 1) * cols];
                    let drow = &mut dl[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let p = fast_exp(row[c] - lse[r]);
                        drow[c] += w * (p - if c as u32 == targets[r] { 1.0 } else { 0.0 });
                    }
                }
            }
            Op::RowNll { logits, targets, mask } => {
                let logits = *logits;
                let lse = &self.nodes[id].aux;
                let lsh = self.value(logits).shape();
                let (t, cols) = (lsh[1], lsh[2]);
                let lv = self.value(logits).data();
                let dl = buf(pass, logits, lv.len());
                for r in 0..targets.len() {
                    if mask[r] == 0.0 {
                        continue;
                    }
                    let w = g[r / t] * mask[r];
                    let row = &lv[r * cols..(r + 1) * cols];
                    let drow = &mut dl[r * cols..(r + 1) * cols];
                    for c in 0..cols {
                        let p = fast_exp(row[c] - lse[r]);
                        drow[c] += w * (p - if c as u32 == targets[r] { 1.0 } else { 0.0 });
                    }
                }
            }
            Op::SumAll { a } => {
                let a = *a;
                let numel = self.value(a).numel();
                let gs = g[0];
                let da = buf(pass, a, numel);
                for dv in da.iter_mut() {
                    *dv += gs;
                }
            }
        }
    }
}

// ── Kernels ────────────────────────────────────────────────────────────

/// `out[M,N] += a[M,K] @ b[K,N]` (axpy form; fixed summation order).
/// Four output rows share each loaded `b` row, which cuts the dominant
/// memory traffic without touching the per-element contraction order.
fn mm_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let m4 = m / 4 * 4;
    let mut mi = 0;
    while mi < m4 {
        let a0 = &a[mi * k..(mi + 1) * k];
        let a1 = &a[(mi + 1) * k..(mi + 2) * k];
        let a2 = &a[(mi + 2) * k..(mi + 3) * k];
        let a3 = &a[(mi + 3) * k..(mi + 4) * k];
        let (o01, rest) = out[mi * n..(mi + 4) * n].split_at_mut(2 * n);
        let (o0, o1) = o01.split_at_mut(n);
        let (o2, o3) = rest.split_at_mut(n);
        for ki in 0..k {
            let (v0, v1, v2, v3) = (a0[ki], a1[ki], a2[ki], a3[ki]);
            let brow = &b[ki * n..(ki + 1) * n];
            for j in 0..n {
                let bv = brow[j];
                o0[j] += v0 * bv;
                o1[j] += v1 * bv;
                o2[j] += v2 * bv;
                o3[j] += v3 * bv;
            }
        }
        mi += 4;
    }
    for mi in m4..m {
        let arow = &a[mi * k..(mi + 1) * k];
        let orow = &mut out[mi * n..(mi + 1) * n];
        for ki in 0..k {
            let av = arow[ki];
            let brow = &b[ki * n..(ki + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[M,K] += a[M,N] @ b[K,N]^T`. Materializes `b`'s transpose so the
/// inner accumulation runs in the vector-friendly axpy form; a plain dot
/// formulation is a sequential reduction the compiler cannot vectorize.
fn mm_abt_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, k: usize) {
    let mut bt = vec![0.0f32; n * k];
    for ki in 0..k {
        for ni in 0..n {
            bt[ni * k + ki] = b[ki * n + ni];
        }
    }
    for mi in 0..m {
        let arow = &a[mi * n..(mi + 1) * n];
        let orow = &mut out[mi * k..(mi + 1) * k];
        for ni in 0..n {
            let av = arow[ni];
            if av == 0.0 {
                continue;
            }
            let btrow = &bt[ni * k..(ni + 1) * k];
            for (o, &bv) in orow.iter_mut().zip(btrow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[K,N] += a[M,K]^T @ b[M,N]` (axpy form). Four `b` rows are folded
/// per pass so each output row is touched once per group; the contraction
/// order over `m` stays sequential.
fn mm_atb_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    let m4 = m / 4 * 4;
    let mut mi = 0;
    while mi < m4 {
        let b0 = &b[mi * n..(mi + 1) * n];
        let b1 = &b[(mi + 1) * n..(mi + 2) * n];
        let b2 = &b[(mi + 2) * n..(mi + 3) * n];
        let b3 = &b[(mi + 3) * n..(mi + 4) * n];
        for ki in 0..k {
            let v0 = a[mi * k + ki];
            let v1 = a[(mi + 1) * k + ki];
            let v2 = a[(mi + 2) * k + ki];
            let v3 = a[(mi + 3) * k + ki];
            let orow = &mut out[ki * n..(ki + 1) * n];
            for j in 0..n {
                orow[j] += v0 * b0[j];
                orow[j] += v1 * b1[j];
                orow[j] += v2 * b2[j];
                orow[j] += v3 * b3[j];
            }
        }
        mi += 4;
    }
    for mi in m4..m {
        let brow = &b[mi * n..(mi + 1) * n];
        for ki in 0..k {
            let av = a[mi * k + ki];
            let orow = &mut out[ki * n..(ki + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Branchless exponential that the compiler can vectorize: `2^j * p(r)`
/// with a degree-6 polynomial for the reduced argument. Relative error is
/// below 2e-6 over the finite range; inputs at or below -87 flush to
/// exactly zero (matching libm's underflow there), which keeps masked
/// attention scores exactly inert.
#[inline(always)]
fn fast_exp(x: f32) -> f32 {
    const LOG2_E: f32 = std::f32::consts::LOG2_E;
    const LN_2: f32 = std::f32::consts::LN_2;
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23: rounds to nearest integer
    let alive = (x > -87.0) as u32 as f32;
    let xc = x.clamp(-87.0, 88.0);
    let jf = (xc * LOG2_E + MAGIC) - MAGIC;
    let r = xc - jf * LN_2;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let bits = (((jf as i32) + 127) as u32) << 23;
    p * f32::from_bits(bits) * alive
}

/// `tanh` via [`fast_exp`]; same vectorization story.
#[inline(always)]
fn fast_tanh(x: f32) -> f32 {
    1.0 - 2.0 / (fast_exp(2.0 * x) + 1.0)
}

fn lse_row(row: &[f32]) -> f32 {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|&v| fast_exp(v - mx)).sum();
    mx + sum.ln()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + fast_exp(-x))
    } else {
        let e = fast_exp(x);
        e / (1.0 + e)
    }
}

fn permute_swap(data: &[f32], shape: &[usize], ax0: usize, ax1: usize) -> Vec<f32> {
    if ax0 == ax1 {
        return data.to_vec();
    }
    let (ax0, ax1) = (ax0.min(ax1), ax0.max(ax1));
    // Any adjacent-or-not pair reduces to (outer, a, mid, b, inner) blocks.
    let outer: usize = shape[..ax0].iter().product();
    let a = shape[ax0];
    let mid: usize = shape[ax0 + 1..ax1].iter().product();
    let b = shape[ax1];
    let inner: usize = shape[ax1 + 1..].iter().product();
    let numel: usize = shape.iter().product();
    let mut out = vec![0.0f32; numel];
    let in_b = inner;
    let in_mid = b * inner;
    let in_a = mid * in_mid;
    let in_outer = a * in_a;
    let out_a = inner;
    let out_mid = a * inner;
    let out_b = mid * out_mid;
    let out_outer = b * out_b;
    for o in 0..outer {
        for ia in 0..a {
            for im in 0..mid {
                let src_base = o * in_outer + ia * in_a + im * in_mid;
                let dst_base = o * out_outer + ia * out_a + im * out_mid;
                if inner == 1 {
                    for ib in 0..b {
                        out[dst_base + ib * out_b] = data[src_base + ib * in_b];
                    }
                } else {
                    for ib in 0..b {
                        let src = src_base + ib * in_b;
                        let dst = dst_base + ib * out_b;
                        out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                    }
                }
            }
        }
    }
    out
}

/// Lower-triangular causal mask: 0 on and below the diagonal, a large
/// negative value above it. Added to attention scores before softmax.
pub fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0f32; t * t];
    for r in 0..t {
        for c in r + 1..t {
            data[r * t + c] = -1e9;
        }
    }
    Tensor::from_vec(&[t, t], data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_known_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.leaf(t(&[3, 2], &[7., 8., 9., 10., 11., 12.]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[3, 4], &[0.1, -2., 3., 0.5, 1., 1., 1., 1., -5., 0., 5., 2.]));
        let s = tape.softmax_rows(a).unwrap();
        for row in tape.value(s).data().chunks(4) {
            let sum: f32 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row sums to {sum}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 11usize;
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[1, v]));
        let ce = tape.cross_entropy(logits, &[3], &[1.0]).unwrap();
        assert!((tape.value(ce).item() - (v as f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 1., 1.]);
    }

    #[test]
    fn backward_of_square_sum_is_2x() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1., -2., 0.5]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum_all(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., -4., 1.]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(
            tape.backward(x),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let s = tape.sum_all(x).unwrap();
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 2.]);
    }

    #[test]
    fn log_sigmoid_limits() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.0, 30.0, -30.0]));
        let y = tape.log_sigmoid(x).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - (-(2.0f32).ln())).abs() < 1e-6);
        assert!(d[1].abs() < 1e-6);
        assert!((d[2] + 30.0).abs() < 1e-3);
    }

    #[test]
    fn transpose_round_trips() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let xt = tape.transpose(x, 0, 1).unwrap();
        assert_eq!(tape.value(xt).shape(), &[3, 2]);
        assert_eq!(tape.value(xt).data(), &[1., 4., 2., 5., 3., 6.]);
        let xtt = tape.transpose(xt, 0, 1).unwrap();
        assert_eq!(tape.value(xtt).data(), tape.value(x).data());
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.leaf(t(&[2, 1], &[5., 6.]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1., 2., 5., 3., 4., 6.]);
        let back = tape.slice(c, 1, 0, 2).unwrap();
        assert_eq!(tape.value(back).data(), tape.value(a).data());
    }

    #[test]
    fn row_nll_matches_cross_entropy() {
        let mut tape = Tape::new();
        let logits = tape.leaf(t(
            &[2, 2, 3],
            &[0.3, -1., 2., 0., 0., 0., 1., 2., 3., -0.5, 0.5, 0.1],
        ));
        let targets = [2u32, 1, 0, 2];
        let mask = [1.0f32, 0.0, 1.0, 1.0];
        let nll = tape.row_nll(logits, &targets, &mask).unwrap();
        let ce = tape.cross_entropy(logits, &targets, &mask).unwrap();
        let per_row = tape.value(nll).data().to_vec();
        assert!((per_row.iter().sum::<f32>() - tape.value(ce).item()).abs() < 1e-5);
    }

    #[test]
    fn causal_mask_blocks_future() {
        let m = causal_mask(3);
        assert_eq!(m.data()[0 * 3 + 0], 0.0);
        assert_eq!(m.data()[0 * 3 + 2], -1e9);
        assert_eq!(m.data()[2 * 3 + 0], 0.0);
    }

    #[test]
    fn embedding_lookup_and_scatter() {
        let mut tape = Tape::new();
        let table = tape.leaf(t(&[3, 2], &[1., 2., 3., 4., 5., 6.]));
        let e = tape.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[5., 6., 1., 2., 5., 6.]);
        let s = tape.sum_all(e).unwrap();
        tape.backward(s).unwrap();
        // id 2 used twice, id 0 once, id 1 never
        assert_eq!(tape.grad(table).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }
}
