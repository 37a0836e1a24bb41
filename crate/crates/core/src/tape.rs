//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every primitive applied to tensors pushed onto it and
//! replays exact adjoints in reverse order. The cell-update loop unrolls a
//! dynamic number of steps, so recording beats a static graph here.
//!
//! Index tables (neighborhood gathers, attention windows) are shared via
//! `Rc` so the 9-cell tables built once per grid shape are reused by every
//! step recorded on the tape.

use std::rc::Rc;

use crate::error::{GecaError, Result};
use crate::tensor::{matmul_raw, transpose_raw, Tensor};

/// Handle to a tensor recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub usize);

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_A: f32 = 0.044_715;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f32),
    AddScalar(TensorId),
    /// x[r,c] + v[c]
    AddRow(TensorId, TensorId),
    /// x[r,c] * v[c]
    MulRow(TensorId, TensorId),
    /// x[r,c] * m[r]
    MulCol(TensorId, TensorId),
    Matmul(TensorId, TensorId),
    Gelu(TensorId),
    Silu(TensorId),
    Relu(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f32,
    },
    SoftmaxLast(TensorId),
    SumAll(TensorId),
    SliceCols {
        x: TensorId,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<TensorId>),
    /// Row gather with -1 producing a zero row.
    GatherRows {
        x: TensorId,
        idx: Rc<Vec<i64>>,
    },
    /// Windowed attention logits: out[n, h*w+j] = q[n,h]·k[idx[n*w+j],h] / sqrt(hd)
    LocalQk {
        q: TensorId,
        k: TensorId,
        idx: Rc<Vec<i64>>,
        heads: usize,
        window: usize,
    },
    /// Windowed attention read-out: out[n,h] = sum_j w[n,h*w+j] * v[idx[n*w+j],h]
    LocalApply {
        w: TensorId,
        v: TensorId,
        idx: Rc<Vec<i64>>,
        heads: usize,
        window: usize,
    },
    Reshape(TensorId),
    /// Mean binary cross-entropy on logits; targets are a constant.
    BceWithLogits {
        logits: TensorId,
        targets: TensorId,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations with enough structure to replay
/// adjoints in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits a shape into (rows, last-axis columns).
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&cols, rest)) => (rest.iter().product(), cols),
        None => (1, 1),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a tensor as a differentiable leaf.
    pub fn leaf(&mut self, tensor: Tensor) -> TensorId {
        self.push_node(tensor.requires_grad(true), Op::Leaf, true)
    }

    /// Record a tensor as a constant (no gradient tracked or propagated).
    pub fn constant(&mut self, tensor: Tensor) -> TensorId {
        self.push_node(tensor.requires_grad(false), Op::Leaf, false)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn value(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].tensor.data
    }

    /// Gradient buffer of `id`, if backward has produced one.
    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push_node(&mut self, tensor: Tensor, op: Op, needs_grad: bool) -> TensorId {
        self.nodes.push(Node {
            tensor,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: &[TensorId]) -> TensorId {
        let needs = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        let tensor = Tensor::new(shape, data).expect("op produced inconsistent shape");
        self.push_node(tensor, op, needs)
    }

    fn check_same_shape(&self, a: TensorId, b: TensorId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GecaError::Dimension(format!(
                "{}: {:?} vs {:?}",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push_op(self.shape(a).to_vec(), data, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push_op(self.shape(a).to_vec(), data, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push_op(self.shape(a).to_vec(), data, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: TensorId, c: f32) -> TensorId {
        let data = self.value(a).iter().map(|x| x * c).collect();
        self.push_op(self.shape(a).to_vec(), data, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f32) -> TensorId {
        let data = self.value(a).iter().map(|x| x + c).collect();
        self.push_op(self.shape(a).to_vec(), data, Op::AddScalar(a), &[a])
    }

    /// Broadcast a length-C vector over the rows of x.
    pub fn add_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.tensor(v).numel() != cols {
            return Err(GecaError::Dimension(format!(
                "add_row: vector numel {} vs row width {}",
                self.tensor(v).numel(),
                cols
            )));
        }
        let xv = self.value(x);
        let vv = self.value(v);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(xv[r * cols + c] + vv[c]);
            }
        }
        Ok(self.push_op(self.shape(x).to_vec(), data, Op::AddRow(x, v), &[x, v]))
    }

    pub fn mul_row(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.tensor(v).numel() != cols {
            return Err(GecaError::Dimension(format!(
                "mul_row: vector numel {} vs row width {}",
                self.tensor(v).numel(),
                cols
            )));
        }
        let xv = self.value(x);
        let vv = self.value(v);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(xv[r * cols + c] * vv[c]);
            }
        }
        Ok(self.push_op(self.shape(x).to_vec(), data, Op::MulRow(x, v), &[x, v]))
    }

    /// Scale each row r of x by m[r].
    pub fn mul_col(&mut self, x: TensorId, m: TensorId) -> Result<TensorId> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.tensor(m).numel() != rows {
            return Err(GecaError::Dimension(format!(
                "mul_col: vector numel {} vs row count {}",
                self.tensor(m).numel(),
                rows
            )));
        }
        let xv = self.value(x);
        let mv = self.value(m);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let s = mv[r];
            for c in 0..cols {
                data.push(xv[r * cols + c] * s);
            }
        }
        Ok(self.push_op(self.shape(x).to_vec(), data, Op::MulCol(x, m), &[x, m]))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(GecaError::Dimension(format!(
                "matmul expects 2-d operands, got {:?} and {:?}",
                sa, sb
            )));
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = (sb[0], sb[1]);
        if k != k2 {
            return Err(GecaError::Dimension(format!(
                "matmul inner extents differ: {} vs {}",
                k, k2
            )));
        }
        let data = matmul_raw(self.value(a), self.value(b), m, k, n);
        Ok(self.push_op(vec![m, n], data, Op::Matmul(a, b), &[a, b]))
    }

    // ── Nonlinearities ──────────────────────────────────────────────

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.push_op(self.shape(a).to_vec(), data, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let data = self
            .value(a)
            .iter()
            .map(|&x| x / (1.0 + (-x).exp()))
            .collect();
        self.push_op(self.shape(a).to_vec(), data, Op::Silu(a), &[a])
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        self.push_op(self.shape(a).to_vec(), data, Op::Relu(a), &[a])
    }

    /// Row-wise layer normalization over the last axis with affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f32,
    ) -> Result<TensorId> {
        let (rows, cols) = rows_cols(self.shape(x));
        if self.tensor(gain).numel() != cols || self.tensor(bias).numel() != cols {
            return Err(GecaError::Dimension(format!(
                "layer_norm: gain/bias must match last axis {}",
                cols
            )));
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let inv_std = 1.0 / (var + eps as f64).sqrt();
            for c in 0..cols {
                let xn = ((row[c] as f64 - mean) * inv_std) as f32;
                data[r * cols + c] = xn * gv[c] + bv[c];
            }
        }
        Ok(self.push_op(
            self.shape(x).to_vec(),
            data,
            Op::LayerNorm { x, gain, bias, eps },
            &[x, gain, bias],
        ))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = rows_cols(self.shape(a));
        let av = self.value(a);
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            let row = &av[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            for c in 0..cols {
                let e = (row[c] - max).exp();
                data[r * cols + c] = e;
                sum += e as f64;
            }
            let inv = (1.0 / sum) as f32;
            for c in 0..cols {
                data[r * cols + c] *= inv;
            }
        }
        self.push_op(self.shape(a).to_vec(), data, Op::SoftmaxLast(a), &[a])
    }

    // ── Reductions and shape ops ────────────────────────────────────

    /// Sum of all entries (f64 accumulation), as a 1-element tensor.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s = self.value(a).iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.push_op(vec![1], vec![s], Op::SumAll(a), &[a])
    }

    /// Mean of all entries.
    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.tensor(a).numel().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f32)
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (rows, cols) = rows_cols(self.shape(x));
        if start > end || end > cols {
            return Err(GecaError::Dimension(format!(
                "slice_cols {}..{} out of width {}",
                start, end, cols
            )));
        }
        let width = end - start;
        let xv = self.value(x);
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&xv[r * cols + start..r * cols + end]);
        }
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = width;
        Ok(self.push_op(shape, data, Op::SliceCols { x, start, end }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(GecaError::Dimension("concat_cols of zero tensors".into()));
        }
        let (rows, _) = rows_cols(self.shape(parts[0]));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != rows {
                return Err(GecaError::Dimension(format!(
                    "concat_cols: row counts differ ({} vs {})",
                    rows, r
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let pv = self.value(p);
                data.extend_from_slice(&pv[r * w..(r + 1) * w]);
            }
        }
        let mut shape = self.shape(parts[0]).to_vec();
        *shape.last_mut().unwrap() = total;
        Ok(self.push_op(shape, data, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Gather rows of x by index; -1 yields a zero row.
    pub fn gather_rows(&mut self, x: TensorId, idx: Rc<Vec<i64>>) -> TensorId {
        let (rows, cols) = rows_cols(self.shape(x));
        let mut data = vec![0.0f32; idx.len() * cols];
        let xv = self.value(x);
        for (r, &i) in idx.iter().enumerate() {
            if i >= 0 {
                debug_assert!((i as usize) < rows);
                data[r * cols..(r + 1) * cols]
                    .copy_from_slice(&xv[i as usize * cols..(i as usize + 1) * cols]);
            }
        }
        let n = idx.len();
        self.push_op(vec![n, cols], data, Op::GatherRows { x, idx }, &[x])
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(x).numel() {
            return Err(GecaError::Dimension(format!(
                "reshape {:?} -> {:?}",
                self.shape(x),
                shape
            )));
        }
        let data = self.value(x).to_vec();
        Ok(self.push_op(shape, data, Op::Reshape(x), &[x]))
    }

    // ── Windowed attention kernels ──────────────────────────────────

    /// Per-cell attention logits over a fixed window of key cells.
    ///
    /// `q` and `k` are [N, heads*hd]; `idx[n*window + j]` is the key row for
    /// query n's j-th window slot, -1 marking an out-of-grid slot (logit 0;
    /// callers mask those slots out before the softmax).
    pub fn local_qk(
        &mut self,
        q: TensorId,
        k: TensorId,
        idx: Rc<Vec<i64>>,
        heads: usize,
        window: usize,
    ) -> Result<TensorId> {
        let (n, a) = rows_cols(self.shape(q));
        if self.shape(k).last() != Some(&a) {
            return Err(GecaError::Dimension("local_qk: q/k widths differ".into()));
        }
        if a % heads != 0 {
            return Err(GecaError::Dimension(format!(
                "local_qk: width {} not divisible by {} heads",
                a, heads
            )));
        }
        if idx.len() != n * window {
            return Err(GecaError::Dimension("local_qk: index table size".into()));
        }
        let hd = a / heads;
        let inv_sqrt = 1.0 / (hd as f32).sqrt();
        let qv = self.value(q);
        let kv = self.value(k);
        let mut data = vec![0.0f32; n * heads * window];
        for cell in 0..n {
            let qrow = &qv[cell * a..(cell + 1) * a];
            for j in 0..window {
                let src = idx[cell * window + j];
                if src < 0 {
                    continue;
                }
                let krow = &kv[src as usize * a..(src as usize + 1) * a];
                for h in 0..heads {
                    let mut dot = 0.0f32;
                    for d in 0..hd {
                        dot += qrow[h * hd + d] * krow[h * hd + d];
                    }
                    data[cell * heads * window + h * window + j] = dot * inv_sqrt;
                }
            }
        }
        Ok(self.push_op(
            vec![n, heads * window],
            data,
            Op::LocalQk {
                q,
                k,
                idx,
                heads,
                window,
            },
            &[q, k],
        ))
    }

    /// Weighted sum of value rows over the attention window.
    pub fn local_apply(
        &mut self,
        w: TensorId,
        v: TensorId,
        idx: Rc<Vec<i64>>,
        heads: usize,
        window: usize,
    ) -> Result<TensorId> {
        let (n, wcols) = rows_cols(self.shape(w));
        if wcols != heads * window {
            return Err(GecaError::Dimension(
                "local_apply: weight width must be heads*window".into(),
            ));
        }
        let (_, a) = rows_cols(self.shape(v));
        if a % heads != 0 {
            return Err(GecaError::Dimension(format!(
                "local_apply: width {} not divisible by {} heads",
                a, heads
            )));
        }
        if idx.len() != n * window {
            return Err(GecaError::Dimension("local_apply: index table size".into()));
        }
        let hd = a / heads;
        let wv = self.value(w);
        let vv = self.value(v);
        let mut data = vec![0.0f32; n * a];
        for cell in 0..n {
            for j in 0..window {
                let src = idx[cell * window + j];
                if src < 0 {
                    continue;
                }
                let vrow = &vv[src as usize * a..(src as usize + 1) * a];
                for h in 0..heads {
                    let weight = wv[cell * heads * window + h * window + j];
                    if weight == 0.0 {
                        continue;
                    }
                    for d in 0..hd {
                        data[cell * a + h * hd + d] += weight * vrow[h * hd + d];
                    }
                }
            }
        }
        Ok(self.push_op(
            vec![n, a],
            data,
            Op::LocalApply {
                w,
                v,
                idx,
                heads,
                window,
            },
            &[w, v],
        ))
    }

    // ── Losses ──────────────────────────────────────────────────────

    /// Mean binary cross-entropy over logits against constant {0,1} targets.
    ///
    /// Computed in the stable form max(z,0) - z*y + ln(1 + exp(-|z|)).
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: TensorId) -> Result<TensorId> {
        self.check_same_shape(logits, targets, "bce_with_logits")?;
        let zv = self.value(logits);
        let yv = self.value(targets);
        let n = zv.len().max(1);
        let mut total = 0.0f64;
        for (&z, &y) in zv.iter().zip(yv) {
            let term = z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
            total += term as f64;
        }
        let mean = (total / n as f64) as f32;
        Ok(self.push_op(
            vec![1],
            vec![mean],
            Op::BceWithLogits { logits, targets },
            &[logits, targets],
        ))
    }

    // ── Backward ────────────────────────────────────────────────────

    fn accumulate(&mut self, id: TensorId, contribution: &[f32]) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match &mut node.tensor.grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contribution) {
                    *gi += ci;
                }
            }
            None => node.tensor.grad = Some(contribution.to_vec()),
        }
    }

    fn take_grad(&mut self, i: usize) -> Option<Vec<f32>> {
        self.nodes[i].tensor.grad.clone()
    }

    /// Reverse sweep seeding d(loss)/d(loss) = 1.
    ///
    /// `loss` must be a single-element tensor. After this call every
    /// reachable leaf pushed with [`Tape::leaf`] carries its gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.tensor(loss).numel() != 1 {
            return Err(GecaError::Dimension(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.nodes[loss.0].tensor.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match self.take_grad(i) {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, &g);
                    self.accumulate(b, &g);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, &g);
                    let neg: Vec<f32> = g.iter().map(|x| -x).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(self.value(b))
                        .map(|(gi, bi)| gi * bi)
                        .collect();
                    let db: Vec<f32> = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(gi, ai)| gi * ai)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale(a, c) => {
                    let da: Vec<f32> = g.iter().map(|gi| gi * c).collect();
                    self.accumulate(a, &da);
                }
                Op::AddScalar(a) => {
                    self.accumulate(a, &g);
                }
                Op::AddRow(x, v) => {
                    let (rows, cols) = rows_cols(self.shape(x));
                    self.accumulate(x, &g);
                    let mut dv = vec![0.0f32; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dv[c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(v, &dv);
                }
                Op::MulRow(x, v) => {
                    let (rows, cols) = rows_cols(self.shape(x));
                    let vv = self.value(v).to_vec();
                    let xv = self.value(x);
                    let mut dx = vec![0.0f32; rows * cols];
                    let mut dv = vec![0.0f32; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g[r * cols + c];
                            dx[r * cols + c] = gi * vv[c];
                            dv[c] += gi * xv[r * cols + c];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(v, &dv);
                }
                Op::MulCol(x, m) => {
                    let (rows, cols) = rows_cols(self.shape(x));
                    let mv = self.value(m).to_vec();
                    let xv = self.value(x);
                    let mut dx = vec![0.0f32; rows * cols];
                    let mut dm = vec![0.0f32; rows];
                    for r in 0..rows {
                        for c in 0..cols {
                            let gi = g[r * cols + c];
                            dx[r * cols + c] = gi * mv[r];
                            dm[r] += gi * xv[r * cols + c];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(m, &dm);
                }
                Op::Matmul(a, b) => {
                    let sa = self.shape(a).to_vec();
                    let sb = self.shape(b).to_vec();
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    // dA = G Bᵀ ; dB = Aᵀ G
                    let bt = transpose_raw(self.value(b), k, n);
                    let da = matmul_raw(&g, &bt, m, n, k);
                    let at = transpose_raw(self.value(a), m, k);
                    let db = matmul_raw(&at, &g, k, m, n);
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Gelu(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(&gi, &x)| {
                            let inner = GELU_C * (x + GELU_A * x * x * x);
                            let t = inner.tanh();
                            let sech2 = 1.0 - t * t;
                            let dinner = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            gi * (0.5 * (1.0 + t) + 0.5 * x * sech2 * dinner)
                        })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Silu(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(&gi, &x)| {
                            let s = 1.0 / (1.0 + (-x).exp());
                            gi * (s * (1.0 + x * (1.0 - s)))
                        })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::Relu(a) => {
                    let da: Vec<f32> = g
                        .iter()
                        .zip(self.value(a))
                        .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
                        .collect();
                    self.accumulate(a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (rows, cols) = rows_cols(self.shape(x));
                    let xv = self.value(x).to_vec();
                    let gv = self.value(gain).to_vec();
                    let mut dx = vec![0.0f32; rows * cols];
                    let mut dgain = vec![0.0f32; cols];
                    let mut dbias = vec![0.0f32; cols];
                    for r in 0..rows {
                        let row = &xv[r * cols..(r + 1) * cols];
                        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
                        let var = row
                            .iter()
                            .map(|&v| {
                                let d = v as f64 - mean;
                                d * d
                            })
                            .sum::<f64>()
                            / cols as f64;
                        let inv_std = 1.0 / (var + eps as f64).sqrt();
                        let mut mean_gy = 0.0f64;
                        let mut mean_gyxn = 0.0f64;
                        let mut xn = vec![0.0f64; cols];
                        for c in 0..cols {
                            xn[c] = (row[c] as f64 - mean) * inv_std;
                            let gy = g[r * cols + c] as f64 * gv[c] as f64;
                            mean_gy += gy;
                            mean_gyxn += gy * xn[c];
                        }
                        mean_gy /= cols as f64;
                        mean_gyxn /= cols as f64;
                        for c in 0..cols {
                            let gy = g[r * cols + c] as f64 * gv[c] as f64;
                            dx[r * cols + c] =
                                ((gy - mean_gy - xn[c] * mean_gyxn) * inv_std) as f32;
                            dgain[c] += (g[r * cols + c] as f64 * xn[c]) as f32;
                            dbias[c] += g[r * cols + c];
                        }
                    }
                    self.accumulate(x, &dx);
                    self.accumulate(gain, &dgain);
                    self.accumulate(bias, &dbias);
                }
                Op::SoftmaxLast(a) => {
                    let (rows, cols) = rows_cols(self.shape(a));
                    let yv = self.value(TensorId(i)).to_vec();
                    let mut da = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        let mut dot = 0.0f64;
                        for c in 0..cols {
                            dot += (yv[r * cols + c] * g[r * cols + c]) as f64;
                        }
                        for c in 0..cols {
                            da[r * cols + c] =
                                yv[r * cols + c] * (g[r * cols + c] - dot as f32);
                        }
                    }
                    self.accumulate(a, &da);
                }
                Op::SumAll(a) => {
                    let da = vec![g[0]; self.tensor(a).numel()];
                    self.accumulate(a, &da);
                }
                Op::SliceCols { x, start, end } => {
                    let (rows, cols) = rows_cols(self.shape(x));
                    let width = end - start;
                    let mut dx = vec![0.0f32; rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + end]
                            .copy_from_slice(&g[r * width..(r + 1) * width]);
                    }
                    self.accumulate(x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let widths: Vec<usize> =
                        parts.iter().map(|&p| rows_cols(self.shape(p)).1).collect();
                    let total: usize = widths.iter().sum();
                    let rows = rows_cols(self.shape(TensorId(i))).0;
                    let mut offset = 0;
                    for (&p, &w) in parts.iter().zip(&widths) {
                        let mut dp = vec![0.0f32; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        self.accumulate(p, &dp);
                        offset += w;
                    }
                }
                Op::GatherRows { x, idx } => {
                    let (rows, cols) = rows_cols(self.shape(x));
                    let mut dx = vec![0.0f32; rows * cols];
                    for (r, &src) in idx.iter().enumerate() {
                        if src >= 0 {
                            let base = src as usize * cols;
                            for c in 0..cols {
                                dx[base + c] += g[r * cols + c];
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LocalQk {
                    q,
                    k,
                    idx,
                    heads,
                    window,
                } => {
                    let (n, a) = rows_cols(self.shape(q));
                    let hd = a / heads;
                    let inv_sqrt = 1.0 / (hd as f32).sqrt();
                    let qv = self.value(q).to_vec();
                    let kv = self.value(k).to_vec();
                    let mut dq = vec![0.0f32; n * a];
                    let mut dk = vec![0.0f32; kv.len()];
                    for cell in 0..n {
                        for j in 0..window {
                            let src = idx[cell * window + j];
                            if src < 0 {
                                continue;
                            }
                            let kbase = src as usize * a;
                            for h in 0..heads {
                                let gi = g[cell * heads * window + h * window + j] * inv_sqrt;
                                if gi == 0.0 {
                                    continue;
                                }
                                for d in 0..hd {
                                    dq[cell * a + h * hd + d] += gi * kv[kbase + h * hd + d];
                                    dk[kbase + h * hd + d] += gi * qv[cell * a + h * hd + d];
                                }
                            }
                        }
                    }
                    self.accumulate(q, &dq);
                    self.accumulate(k, &dk);
                }
                Op::LocalApply {
                    w,
                    v,
                    idx,
                    heads,
                    window,
                } => {
                    let (n, a) = rows_cols(self.shape(TensorId(i)));
                    let hd = a / heads;
                    let wv = self.value(w).to_vec();
                    let vv = self.value(v).to_vec();
                    let mut dw = vec![0.0f32; n * heads * window];
                    let mut dv = vec![0.0f32; vv.len()];
                    for cell in 0..n {
                        for j in 0..window {
                            let src = idx[cell * window + j];
                            if src < 0 {
                                continue;
                            }
                            let vbase = src as usize * a;
                            for h in 0..heads {
                                let weight = wv[cell * heads * window + h * window + j];
                                let mut dwsum = 0.0f32;
                                for d in 0..hd {
                                    let gi = g[cell * a + h * hd + d];
                                    dwsum += gi * vv[vbase + h * hd + d];
                                    dv[vbase + h * hd + d] += gi * weight;
                                }
                                dw[cell * heads * window + h * window + j] += dwsum;
                            }
                        }
                    }
                    self.accumulate(w, &dw);
                    self.accumulate(v, &dv);
                }
                Op::Reshape(x) => {
                    self.accumulate(x, &g);
                }
                Op::BceWithLogits { logits, targets } => {
                    let zv = self.value(logits).to_vec();
                    let yv = self.value(targets).to_vec();
                    let n = zv.len().max(1) as f32;
                    let scale = g[0] / n;
                    let dz: Vec<f32> = zv
                        .iter()
                        .zip(&yv)
                        .map(|(&z, &y)| {
                            let s = 1.0 / (1.0 + (-z).exp());
                            scale * (s - y)
                        })
                        .collect();
                    self.accumulate(logits, &dz);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_grad, GradCheckCfg};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let id = tape.constant(t(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]));
        let b = tape.constant(t(vec![2, 2], vec![3.0, -1.0, 2.0, 5.0]));
        let out = tape.matmul(id, b).unwrap();
        assert_eq!(tape.value(out), &[3.0, -1.0, 2.0, 5.0]);
    }

    #[test]
    fn matmul_scalar_case() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![1, 1], vec![2.0]));
        let b = tape.constant(t(vec![1, 1], vec![3.0]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(GecaError::Dimension(_))));
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_bt() {
        // d sum(A B) / dA = ones(m,n) Bᵀ
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(vec![4, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let ia = tape.leaf(a.clone());
        let ib = tape.constant(b.clone());
        let out = tape.matmul(ia, ib).unwrap();
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        let got = tape.grad(ia).unwrap();
        let ones = vec![1.0f32; 3 * 2];
        let bt = transpose_raw(&b.data, 4, 2);
        let want = matmul_raw(&ones, &bt, 3, 2, 4);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-5, "{} vs {}", g, w);
        }
    }

    #[test]
    fn matmul_fd_check() {
        let cfg = GradCheckCfg::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a0 = Tensor::rand_uniform(vec![3, 4], -1.0, 1.0, &mut rng);
            let b0 = Tensor::rand_uniform(vec![4, 2], -1.0, 1.0, &mut rng);
            check_grad(
                &a0,
                |a, tape| {
                    let ia = tape.leaf(a.clone());
                    let ib = tape.constant(b0.clone());
                    let out = tape.matmul(ia, ib)?;
                    let sq = tape.mul(out, out)?;
                    Ok((tape.sum_all(sq), ia))
                },
                &cfg,
            )
            .unwrap();
        }
    }

    #[test]
    fn softmax_uniform_on_zeros() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], vec![0.0, 0.0, 0.0]));
        let y = tape.softmax_last(x);
        for v in tape.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_no_overflow_on_large_inputs() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2], vec![1000.0, 0.0]));
        let y = tape.softmax_last(x);
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-6);
        assert!(v[1].abs() < 1e-6);
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::rand_uniform(vec![4, 7], -3.0, 3.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(x0);
        let y = tape.softmax_last(x);
        let v = tape.value(y);
        for r in 0..4 {
            let s: f32 = v[r * 7..(r + 1) * 7].iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_fd_check() {
        let cfg = GradCheckCfg::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x0 = Tensor::rand_uniform(vec![5], -1.0, 1.0, &mut rng);
            let w0 = Tensor::rand_uniform(vec![5], 0.5, 1.5, &mut rng);
            check_grad(
                &x0,
                |x, tape| {
                    let ix = tape.leaf(x.clone());
                    let iw = tape.constant(w0.clone());
                    let y = tape.softmax_last(ix);
                    let wy = tape.mul(y, iw)?;
                    Ok((tape.sum_all(wy), ix))
                },
                &cfg,
            )
            .unwrap();
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![4], vec![2.5; 4]));
        let gain = tape.constant(Tensor::ones(vec![4]));
        let bias = tape.constant(Tensor::zeros(vec![4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        for v in tape.value(y) {
            assert!(v.abs() < 1e-3);
        }
    }

    #[test]
    fn layer_norm_already_normalized() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2], vec![1.0, -1.0]));
        let gain = tape.constant(Tensor::ones(vec![2]));
        let bias = tape.constant(Tensor::zeros(vec![2]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let v = tape.value(y);
        assert!((v[0] - 1.0).abs() < 1e-4);
        assert!((v[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_fd_check() {
        let cfg = GradCheckCfg::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x0 = Tensor::rand_uniform(vec![8], -1.0, 1.0, &mut rng);
            let g0 = Tensor::rand_uniform(vec![8], 0.5, 1.5, &mut rng);
            let b0 = Tensor::rand_uniform(vec![8], -0.5, 0.5, &mut rng);
            let w0 = Tensor::rand_uniform(vec![8], 0.5, 1.5, &mut rng);
            check_grad(
                &x0,
                |x, tape| {
                    let ix = tape.leaf(x.clone());
                    let ig = tape.constant(g0.clone());
                    let ib = tape.constant(b0.clone());
                    let iw = tape.constant(w0.clone());
                    let y = tape.layer_norm(ix, ig, ib, 1e-5)?;
                    let wy = tape.mul(y, iw)?;
                    Ok((tape.sum_all(wy), ix))
                },
                &cfg,
            )
            .unwrap();
        }
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2], vec![0.0, 10.0]));
        let y = tape.gelu(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 10.0).abs() < 1e-4);
    }

    #[test]
    fn gelu_fd_check() {
        let cfg = GradCheckCfg::default();
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let x0 = Tensor::rand_uniform(vec![16], -1.0, 1.0, &mut rng);
            check_grad(
                &x0,
                |x, tape| {
                    let ix = tape.leaf(x.clone());
                    let y = tape.gelu(ix);
                    let sq = tape.mul(y, y)?;
                    Ok((tape.sum_all(sq), ix))
                },
                &cfg,
            )
            .unwrap();
        }
    }

    #[test]
    fn silu_and_relu_fd_check() {
        let cfg = GradCheckCfg::default();
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            // keep relu inputs away from the kink
            let x0 = Tensor::new(
                vec![12],
                (0..12)
                    .map(|_| {
                        let v: f32 = rng.gen_range(0.1..1.0);
                        if rng.gen_bool(0.5) {
                            v
                        } else {
                            -v
                        }
                    })
                    .collect(),
            )
            .unwrap();
            check_grad(
                &x0,
                |x, tape| {
                    let ix = tape.leaf(x.clone());
                    let s = tape.silu(ix);
                    let r = tape.relu(s);
                    Ok((tape.sum_all(r), ix))
                },
                &cfg,
            )
            .unwrap();
        }
    }

    #[test]
    fn gather_concat_slice_fd_check() {
        let cfg = GradCheckCfg::default();
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        let x0 = Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let idx = Rc::new(vec![0i64, 2, -1, 3, 1, 1]);
        check_grad(
            &x0,
            |x, tape| {
                let ix = tape.leaf(x.clone());
                let gathered = tape.gather_rows(ix, idx.clone());
                let both = tape.concat_cols(&[gathered, gathered])?;
                let part = tape.slice_cols(both, 1, 5)?;
                let sq = tape.mul(part, part)?;
                Ok((tape.sum_all(sq), ix))
            },
            &cfg,
        )
        .unwrap();
    }

    #[test]
    fn local_attention_ops_fd_check() {
        let cfg = GradCheckCfg::default();
        let mut rng = ChaCha8Rng::seed_from_u64(600);
        // 2x2 grid, window 9, 2 heads, width 4
        let idx = Rc::new(crate::grid::neighbor_index_table(2, 2));
        let q0 = Tensor::rand_uniform(vec![4, 4], -1.0, 1.0, &mut rng);
        let k0 = Tensor::rand_uniform(vec![4, 4], -1.0, 1.0, &mut rng);
        let v0 = Tensor::rand_uniform(vec![4, 4], -1.0, 1.0, &mut rng);
        for target in 0..3 {
            let (a0, b0, c0) = (q0.clone(), k0.clone(), v0.clone());
            check_grad(
                &[&a0, &b0, &c0][target].clone(),
                |x, tape| {
                    let mut parts = [a0.clone(), b0.clone(), c0.clone()];
                    parts[target] = x.clone();
                    let iq = tape.leaf(parts[0].clone());
                    let ik = tape.leaf(parts[1].clone());
                    let iv = tape.leaf(parts[2].clone());
                    let logits = tape.local_qk(iq, ik, idx.clone(), 2, 9)?;
                    let rows = tape.reshape(logits, vec![4 * 2, 9])?;
                    let w = tape.softmax_last(rows);
                    let w = tape.reshape(w, vec![4, 18])?;
                    let out = tape.local_apply(w, iv, idx.clone(), 2, 9)?;
                    let sq = tape.mul(out, out)?;
                    let ids = [iq, ik, iv];
                    Ok((tape.sum_all(sq), ids[target]))
                },
                &cfg,
            )
            .unwrap();
        }
    }

    #[test]
    fn bce_fd_check() {
        let cfg = GradCheckCfg::default();
        let mut rng = ChaCha8Rng::seed_from_u64(700);
        let z0 = Tensor::rand_uniform(vec![6], -2.0, 2.0, &mut rng);
        let y0 = Tensor::new(vec![6], vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        check_grad(
            &z0,
            |z, tape| {
                let iz = tape.leaf(z.clone());
                let iy = tape.constant(y0.clone());
                Ok((tape.bce_with_logits(iz, iy)?, iz))
            },
            &cfg,
        )
        .unwrap();
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(42);
            let x = Tensor::rand_uniform(vec![5, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::rand_uniform(vec![6, 3], -1.0, 1.0, &mut rng);
            let mut tape = Tape::new();
            let ix = tape.constant(x);
            let iw = tape.constant(w);
            let h = tape.matmul(ix, iw).unwrap();
            let a = tape.gelu(h);
            let s = tape.sum_all(a);
            tape.value(s).to_vec()
        };
        assert_eq!(run(), run());
    }

    use rand::Rng;
}
