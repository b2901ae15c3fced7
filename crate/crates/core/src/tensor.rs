//! Dense 2-D tensors on a reverse-mode differentiation tape.
//!
//! The tape is define-by-run: every operation executes eagerly and records
//! how to propagate gradients. Graphs are rebuilt each optimization step,
//! which keeps teacher-forced and autoregressive topologies trivially
//! interchangeable; [`Tape::recycle`] clears the graph while returning every
//! buffer to an internal pool, so steady-state stepping allocates nothing.
//! Everything is f64; shapes are (rows, cols) with scalars as 1×1 and
//! vectors as n×1.
//!
//! Shape violations are programming errors and panic with the offending
//! operation and shapes. Numeric problems (non-finite losses) are the
//! caller's to detect; the ops themselves never clamp or mask values.

use std::sync::Arc;

use crate::kernels::{self, AttnShape};

/// Handle to a tensor on its tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// One recorded tensor: a value buffer plus how it was produced.
#[derive(Debug)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    MatMul(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Tanh(TensorId),
    Exp(TensorId),
    Log(TensorId),
    Recip(TensorId),
    Sum(TensorId),
    Mean(TensorId),
    RowSoftmax(TensorId),
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId },
    ScaleRows { x: TensorId, s: TensorId },
    SelectRows { x: TensorId, idx: Arc<[usize]> },
    RowPick { x: TensorId, idx: Arc<[usize]> },
    BlockConcatRows { a: TensorId, b: TensorId, blocks: usize },
    TileRows { x: TensorId, times: usize },
    Reshape(TensorId),
    CausalAttention { q: TensorId, k: TensorId, v: TensorId, shape: AttnShape, probs: Vec<f64> },
    StraightThroughOneHot(TensorId),
}

/// Size-keyed free list of value buffers.
#[derive(Default)]
struct BufferPool {
    by_len: Vec<(usize, Vec<Vec<f64>>)>,
}

impl BufferPool {
    /// An uninitialized (stale-content) buffer of exactly `len` elements;
    /// every op must overwrite its full output range.
    fn take(&mut self, len: usize) -> Vec<f64> {
        for (l, stack) in self.by_len.iter_mut() {
            if *l == len {
                if let Some(buf) = stack.pop() {
                    return buf;
                }
                break;
            }
        }
        vec![0.0; len]
    }

    fn put(&mut self, buf: Vec<f64>) {
        if buf.is_empty() {
            return;
        }
        let len = buf.len();
        for (l, stack) in self.by_len.iter_mut() {
            if *l == len {
                if stack.len() < 128 {
                    stack.push(buf);
                }
                return;
            }
        }
        self.by_len.push((len, vec![buf]));
    }
}

/// Reverse-mode tape. Operations append nodes; [`Tape::backward`] walks them
/// in reverse, visiting each node exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    pool: BufferPool,
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

    /// Drops the recorded graph, returning every buffer to the pool. Handles
    /// from before the call must not be used afterwards.
    pub fn recycle(&mut self) {
        for mut node in self.nodes.drain(..) {
            self.pool.put(std::mem::take(&mut node.values));
            if let Some(g) = node.grad.take() {
                self.pool.put(g);
            }
            if let Op::CausalAttention { probs, .. } = node.op {
                self.pool.put(probs);
            }
        }
    }

    /// Registers a differentiable or constant input tensor.
    pub fn leaf(&mut self, values: Vec<f64>, rows: usize, cols: usize, requires_grad: bool) -> TensorId {
        assert_eq!(
            values.len(),
            rows * cols,
            "leaf: buffer length {} does not match shape {}x{}",
            values.len(),
            rows,
            cols
        );
        self.push(values, rows, cols, requires_grad, Op::Leaf)
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, values: Vec<f64>, rows: usize, cols: usize) -> TensorId {
        self.leaf(values, rows, cols, false)
    }

    /// Constant leaf copied from a slice through the buffer pool.
    pub fn constant_from(&mut self, values: &[f64], rows: usize, cols: usize) -> TensorId {
        let mut buf = self.pool.take(values.len());
        buf.copy_from_slice(values);
        self.leaf(buf, rows, cols, false)
    }

    /// Constant leaf whose buffer is produced by `fill` into pooled storage.
    /// The buffer arrives with stale contents; `fill` must write every slot.
    pub fn constant_with(&mut self, rows: usize, cols: usize, fill: impl FnOnce(&mut [f64])) -> TensorId {
        let mut buf = self.pool.take(rows * cols);
        fill(&mut buf);
        self.leaf(buf, rows, cols, false)
    }

    /// Leaf copied from a slice through the buffer pool.
    pub fn leaf_from(&mut self, values: &[f64], rows: usize, cols: usize, requires_grad: bool) -> TensorId {
        let mut buf = self.pool.take(values.len());
        buf.copy_from_slice(values);
        self.leaf(buf, rows, cols, requires_grad)
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn values(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn shape(&self, id: TensorId) -> (usize, usize) {
        let t = &self.nodes[id.0];
        (t.rows, t.cols)
    }

    fn push(&mut self, values: Vec<f64>, rows: usize, cols: usize, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(values.len(), rows * cols);
        self.nodes.push(Tensor { rows, cols, values, requires_grad, grad: None, op });
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn assert_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert!(
            ar == br && ac == bc,
            "{op}: incompatible shapes {ar}x{ac} vs {br}x{bc}"
        );
    }

    // ── elementwise and scalar ops ──────────────────────────────────────

    fn binary_map(&mut self, op_name: &'static str, a: TensorId, b: TensorId, f: impl Fn(f64, f64) -> f64, op: Op) -> TensorId {
        self.assert_same_shape(op_name, a, b);
        let (r, c) = self.shape(a);
        let mut out = self.pool.take(r * c);
        for ((o, &x), &y) in out.iter_mut().zip(&self.nodes[a.0].values).zip(&self.nodes[b.0].values) {
            *o = f(x, y);
        }
        let rg = self.needs_grad(&[a, b]);
        self.push(out, r, c, rg, op)
    }

    fn unary_map(&mut self, x: TensorId, f: impl Fn(f64) -> f64, op: Op) -> TensorId {
        let (r, c) = self.shape(x);
        let mut out = self.pool.take(r * c);
        for (o, &v) in out.iter_mut().zip(&self.nodes[x.0].values) {
            *o = f(v);
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, r, c, rg, op)
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_map("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary_map(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        self.unary_map(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary_map(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: TensorId) -> TensorId {
        self.unary_map(x, f64::exp, Op::Exp(x))
    }

    pub fn log(&mut self, x: TensorId) -> TensorId {
        self.unary_map(x, f64::ln, Op::Log(x))
    }

    pub fn recip(&mut self, x: TensorId) -> TensorId {
        self.unary_map(x, |v| 1.0 / v, Op::Recip(x))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.values(x).iter().sum();
        let mut out = self.pool.take(1);
        out[0] = s;
        let rg = self.needs_grad(&[x]);
        self.push(out, 1, 1, rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.tensor(x).len();
        assert!(n > 0, "mean: empty tensor");
        let s: f64 = self.values(x).iter().sum::<f64>() / n as f64;
        let mut out = self.pool.take(1);
        out[0] = s;
        let rg = self.needs_grad(&[x]);
        self.push(out, 1, 1, rg, Op::Mean(x))
    }

    // ── matrix / row ops ────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        assert_eq!(ka, kb, "matmul: incompatible shapes {m}x{ka} vs {kb}x{n}");
        let mut out = self.pool.take(m * n);
        kernels::matmul(&self.nodes[a.0].values, &self.nodes[b.0].values, m, ka, n, &mut out);
        let rg = self.needs_grad(&[a, b]);
        self.push(out, m, n, rg, Op::MatMul(a, b))
    }

    /// Row-wise stable softmax.
    pub fn row_softmax(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        assert!(c > 0, "row_softmax: empty rows");
        let mut out = self.pool.take(r * c);
        out.copy_from_slice(&self.nodes[x.0].values);
        for row in out.chunks_mut(c) {
            kernels::softmax_row(row);
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, r, c, rg, Op::RowSoftmax(x))
    }

    /// Row-wise layer normalization with learnable gain/bias (1×cols each).
    pub fn layer_norm(&mut self, x: TensorId, gamma: TensorId, beta: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c), "layer_norm: gamma shape mismatch for {r}x{c}");
        assert_eq!(self.shape(beta), (1, c), "layer_norm: beta shape mismatch for {r}x{c}");
        let mut out = self.pool.take(r * c);
        for (row_out, row_in) in out.chunks_mut(c).zip(self.nodes[x.0].values.chunks(c)) {
            kernels::layer_norm_row(row_in, &self.nodes[gamma.0].values, &self.nodes[beta.0].values, row_out);
        }
        let rg = self.needs_grad(&[x, gamma, beta]);
        self.push(out, r, c, rg, Op::LayerNorm { x, gamma, beta })
    }

    /// Multiplies row `i` of `x` by `s[i]`; `s` has shape rows×1.
    pub fn scale_rows(&mut self, x: TensorId, s: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(s), (r, 1), "scale_rows: scale vector shape mismatch for {r}x{c}");
        let mut out = self.pool.take(r * c);
        for (i, (row_out, row_in)) in out.chunks_mut(c).zip(self.nodes[x.0].values.chunks(c)).enumerate() {
            let f = self.nodes[s.0].values[i];
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = v * f;
            }
        }
        let rg = self.needs_grad(&[x, s]);
        self.push(out, r, c, rg, Op::ScaleRows { x, s })
    }

    /// Gathers the listed rows (duplicates allowed).
    pub fn select_rows(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let (r, c) = self.shape(x);
        let mut out = self.pool.take(idx.len() * c);
        for (row_out, &i) in out.chunks_mut(c).zip(idx) {
            assert!(i < r, "select_rows: row {i} out of range for {r}x{c}");
            row_out.copy_from_slice(&self.nodes[x.0].values[i * c..(i + 1) * c]);
        }
        let rg = self.needs_grad(&[x]);
        let rows = idx.len();
        self.push(out, rows, c, rg, Op::SelectRows { x, idx: idx.into() })
    }

    /// Picks one entry per row: out[i] = x[i, idx[i]]. Output is rows×1.
    pub fn row_pick(&mut self, x: TensorId, idx: &[usize]) -> TensorId {
        let (r, c) = self.shape(x);
        assert_eq!(idx.len(), r, "row_pick: need one index per row ({r} rows)");
        let mut out = self.pool.take(r);
        for (i, (&j, o)) in idx.iter().zip(out.iter_mut()).enumerate() {
            assert!(j < c, "row_pick: column {j} out of range for {r}x{c}");
            *o = self.nodes[x.0].values[i * c + j];
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, r, 1, rg, Op::RowPick { x, idx: idx.into() })
    }

    /// Stacks the rows of `b` below the rows of `a`.
    pub fn concat_rows(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.block_concat_rows(a, b, 1)
    }

    /// Interleaves two blocked row matrices: `a` holds `blocks` groups of
    /// `la` rows, `b` holds `blocks` groups of `lb` rows; the output holds
    /// `blocks` groups of `la+lb` rows with each group's `a`-rows first.
    pub fn block_concat_rows(&mut self, a: TensorId, b: TensorId, blocks: usize) -> TensorId {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        assert_eq!(ac, bc, "block_concat_rows: column mismatch {ar}x{ac} vs {br}x{bc}");
        assert!(
            blocks > 0 && ar % blocks == 0 && br % blocks == 0,
            "block_concat_rows: {ar}+{br} rows not divisible into {blocks} blocks"
        );
        let (la, lb) = (ar / blocks, br / blocks);
        let mut out = self.pool.take((ar + br) * ac);
        let stride = (la + lb) * ac;
        for blk in 0..blocks {
            out[blk * stride..blk * stride + la * ac]
                .copy_from_slice(&self.nodes[a.0].values[blk * la * ac..(blk + 1) * la * ac]);
            out[blk * stride + la * ac..(blk + 1) * stride]
                .copy_from_slice(&self.nodes[b.0].values[blk * lb * bc..(blk + 1) * lb * bc]);
        }
        let rg = self.needs_grad(&[a, b]);
        self.push(out, ar + br, ac, rg, Op::BlockConcatRows { a, b, blocks })
    }

    /// Repeats the whole row matrix `times` times; the backward pass sums
    /// gradients over repetitions.
    pub fn tile_rows(&mut self, x: TensorId, times: usize) -> TensorId {
        assert!(times > 0, "tile_rows: times must be positive");
        let (r, c) = self.shape(x);
        let chunk = r * c;
        let mut out = self.pool.take(chunk * times);
        for t in 0..times {
            out[t * chunk..(t + 1) * chunk].copy_from_slice(&self.nodes[x.0].values);
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, r * times, c, rg, Op::TileRows { x, times })
    }

    /// Reinterprets the buffer with a new shape of identical length.
    pub fn reshape(&mut self, x: TensorId, rows: usize, cols: usize) -> TensorId {
        let len = self.tensor(x).len();
        assert_eq!(len, rows * cols, "reshape: length {len} != {rows}x{cols}");
        let mut out = self.pool.take(len);
        out.copy_from_slice(&self.nodes[x.0].values);
        let rg = self.needs_grad(&[x]);
        self.push(out, rows, cols, rg, Op::Reshape(x))
    }

    /// Blocked causal multi-head attention. `q` has blocks×lq rows and
    /// `k`/`v` have blocks×lk rows (lk ≥ lq); query `i` of each block sees
    /// keys up to `lk - lq + i`. Softmax weights are cached for backward.
    pub fn causal_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        blocks: usize,
    ) -> TensorId {
        let (qr, d) = self.shape(q);
        let (kr, kd) = self.shape(k);
        self.assert_same_shape("causal_attention(k,v)", k, v);
        assert_eq!(d, kd, "causal_attention: q/k width mismatch {d} vs {kd}");
        assert!(heads > 0 && d % heads == 0, "causal_attention: {d} not divisible by {heads} heads");
        assert!(
            blocks > 0 && qr % blocks == 0 && kr % blocks == 0,
            "causal_attention: rows {qr}/{kr} not divisible into {blocks} blocks"
        );
        let shape = AttnShape { blocks, lq: qr / blocks, lk: kr / blocks, heads, d };
        assert!(shape.lq <= shape.lk, "causal_attention: more queries than keys per block");
        let mut out = self.pool.take(qr * d);
        let mut probs = self.pool.take(shape.probs_len());
        kernels::attention_forward(
            &self.nodes[q.0].values,
            &self.nodes[k.0].values,
            &self.nodes[v.0].values,
            shape,
            &mut out,
            &mut probs,
        );
        let rg = self.needs_grad(&[q, k, v]);
        self.push(out, qr, d, rg, Op::CausalAttention { q, k, v, shape, probs })
    }

    /// Forward value: exact one-hot at each row's argmax (ties to the lowest
    /// column). Backward: identity, so gradients flow as if the loss had been
    /// evaluated on the soft input rows.
    pub fn straight_through_one_hot(&mut self, x: TensorId) -> TensorId {
        let (r, c) = self.shape(x);
        let mut out = self.pool.take(r * c);
        out.fill(0.0);
        for (i, row) in self.nodes[x.0].values.chunks(c).enumerate() {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out[i * c + best] = 1.0;
        }
        let rg = self.needs_grad(&[x]);
        self.push(out, r, c, rg, Op::StraightThroughOneHot(x))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagates d(loss)/d(node) to every gradient-requiring node.
    ///
    /// Panics if `loss` is not scalar or is detached from every
    /// differentiable leaf.
    pub fn backward(&mut self, loss: TensorId) {
        {
            let t = self.tensor(loss);
            assert_eq!((t.rows, t.cols), (1, 1), "backward: loss must be scalar, got {}x{}", t.rows, t.cols);
            assert!(
                t.requires_grad,
                "backward: loss is not connected to any differentiable leaf"
            );
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad && self.nodes[i].grad.is_none() {
                let len = self.nodes[i].len();
                let buf = self.pool.take(len);
                self.nodes[i].grad = Some(buf);
            }
            if let Some(g) = self.nodes[i].grad.as_mut() {
                g.fill(0.0);
            }
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = 1.0;

        let Tape { nodes, pool } = self;
        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let (prev, rest) = nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(prev, *a, |ga| axpy(ga, 1.0, g));
                    accumulate(prev, *b, |gb| axpy(gb, 1.0, g));
                }
                Op::Sub(a, b) => {
                    accumulate(prev, *a, |ga| axpy(ga, 1.0, g));
                    accumulate(prev, *b, |gb| axpy(gb, -1.0, g));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    if prev[a.0].requires_grad {
                        let bv = take_values(prev, b);
                        accumulate(prev, a, |ga| {
                            for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(bv.iter()) {
                                *o += gv * x;
                            }
                        });
                        restore_values(prev, b, bv);
                    }
                    if prev[b.0].requires_grad {
                        let av = take_values(prev, a);
                        accumulate(prev, b, |gb| {
                            for ((o, &gv), &x) in gb.iter_mut().zip(g).zip(av.iter()) {
                                *o += gv * x;
                            }
                        });
                        restore_values(prev, a, av);
                    }
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (prev[a.0].rows, prev[a.0].cols);
                    let n = prev[b.0].cols;
                    if prev[a.0].requires_grad {
                        let bv = take_values(prev, b);
                        accumulate(prev, a, |ga| kernels::matmul_a_bt_acc(g, &bv, m, n, k, ga));
                        restore_values(prev, b, bv);
                    }
                    if prev[b.0].requires_grad {
                        let av = take_values(prev, a);
                        accumulate(prev, b, |gb| kernels::matmul_at_b_acc(&av, g, m, k, n, gb));
                        restore_values(prev, a, av);
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    accumulate(prev, *x, |gx| axpy(gx, c, g));
                }
                Op::AddScalar(x) => accumulate(prev, *x, |gx| axpy(gx, 1.0, g)),
                Op::Tanh(x) => {
                    let y = &node.values;
                    accumulate(prev, *x, |gx| {
                        for ((o, &gv), &t) in gx.iter_mut().zip(g).zip(y.iter()) {
                            *o += gv * (1.0 - t * t);
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = &node.values;
                    accumulate(prev, *x, |gx| {
                        for ((o, &gv), &e) in gx.iter_mut().zip(g).zip(y.iter()) {
                            *o += gv * e;
                        }
                    });
                }
                Op::Log(x) => {
                    let x = *x;
                    let xv = take_values(prev, x);
                    accumulate(prev, x, |gx| {
                        for ((o, &gv), &v) in gx.iter_mut().zip(g).zip(xv.iter()) {
                            *o += gv / v;
                        }
                    });
                    restore_values(prev, x, xv);
                }
                Op::Recip(x) => {
                    let y = &node.values;
                    accumulate(prev, *x, |gx| {
                        for ((o, &gv), &r) in gx.iter_mut().zip(g).zip(y.iter()) {
                            *o -= gv * r * r;
                        }
                    });
                }
                Op::Sum(x) => {
                    let gv = g[0];
                    accumulate(prev, *x, |gx| {
                        for o in gx.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::Mean(x) => {
                    let n = prev[x.0].rows * prev[x.0].cols;
                    let gv = g[0] / n as f64;
                    accumulate(prev, *x, |gx| {
                        for o in gx.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::RowSoftmax(x) => {
                    let c = node.cols;
                    let y = &node.values;
                    accumulate(prev, *x, |gx| {
                        for ((grow, yrow), gxrow) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                            let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((o, &gv), &yv) in gxrow.iter_mut().zip(grow).zip(yrow) {
                                *o += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let c = node.cols;
                    let mut dx = pool.take(prev[x.0].len());
                    dx.fill(0.0);
                    let mut dgamma = pool.take(c);
                    dgamma.fill(0.0);
                    let mut dbeta = pool.take(c);
                    dbeta.fill(0.0);
                    {
                        let xv = &prev[x.0].values;
                        let gv = &prev[gamma.0].values;
                        for ((xrow, grow), dxrow) in xv.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                            kernels::layer_norm_row_backward(xrow, gv, grow, dxrow, &mut dgamma, &mut dbeta);
                        }
                    }
                    accumulate(prev, x, |gx| axpy(gx, 1.0, &dx));
                    accumulate(prev, gamma, |gg| axpy(gg, 1.0, &dgamma));
                    accumulate(prev, beta, |gb| axpy(gb, 1.0, &dbeta));
                    pool.put(dx);
                    pool.put(dgamma);
                    pool.put(dbeta);
                }
                Op::ScaleRows { x, s } => {
                    let (x, s) = (*x, *s);
                    let c = node.cols;
                    if prev[x.0].requires_grad {
                        let sv = take_values(prev, s);
                        accumulate(prev, x, |gx| {
                            for ((gxrow, grow), &f) in gx.chunks_mut(c).zip(g.chunks(c)).zip(sv.iter()) {
                                for (o, &gv) in gxrow.iter_mut().zip(grow) {
                                    *o += gv * f;
                                }
                            }
                        });
                        restore_values(prev, s, sv);
                    }
                    if prev[s.0].requires_grad {
                        let xv = take_values(prev, x);
                        accumulate(prev, s, |gs| {
                            for ((xrow, grow), o) in xv.chunks(c).zip(g.chunks(c)).zip(gs.iter_mut()) {
                                *o += xrow.iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        });
                        restore_values(prev, x, xv);
                    }
                }
                Op::SelectRows { x, idx } => {
                    let c = node.cols;
                    let idx = idx.clone();
                    accumulate(prev, *x, |gx| {
                        for (grow, &i) in g.chunks(c).zip(idx.iter()) {
                            for (o, &gv) in gx[i * c..(i + 1) * c].iter_mut().zip(grow) {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::RowPick { x, idx } => {
                    let c = prev[x.0].cols;
                    let idx = idx.clone();
                    accumulate(prev, *x, |gx| {
                        for (i, (&gv, &j)) in g.iter().zip(idx.iter()).enumerate() {
                            gx[i * c + j] += gv;
                        }
                    });
                }
                Op::BlockConcatRows { a, b, blocks } => {
                    let (a, b, blocks) = (*a, *b, *blocks);
                    let c = node.cols;
                    let la = prev[a.0].rows / blocks;
                    let lb = prev[b.0].rows / blocks;
                    let stride = (la + lb) * c;
                    accumulate(prev, a, |ga| {
                        for blk in 0..blocks {
                            let src = &g[blk * stride..blk * stride + la * c];
                            axpy(&mut ga[blk * la * c..(blk + 1) * la * c], 1.0, src);
                        }
                    });
                    accumulate(prev, b, |gb| {
                        for blk in 0..blocks {
                            let src = &g[blk * stride + la * c..(blk + 1) * stride];
                            axpy(&mut gb[blk * lb * c..(blk + 1) * lb * c], 1.0, src);
                        }
                    });
                }
                Op::TileRows { x, times } => {
                    let chunk = prev[x.0].rows * prev[x.0].cols;
                    let times = *times;
                    accumulate(prev, *x, |gx| {
                        for t in 0..times {
                            axpy(gx, 1.0, &g[t * chunk..(t + 1) * chunk]);
                        }
                    });
                }
                Op::Reshape(x) => accumulate(prev, *x, |gx| axpy(gx, 1.0, g)),
                Op::CausalAttention { q, k, v, shape, probs } => {
                    let (q, k, v) = (*q, *k, *v);
                    let shape = *shape;
                    let mut dq = pool.take(prev[q.0].len());
                    dq.fill(0.0);
                    let mut dk = pool.take(prev[k.0].len());
                    dk.fill(0.0);
                    let mut dv = pool.take(prev[v.0].len());
                    dv.fill(0.0);
                    kernels::attention_backward(
                        &prev[q.0].values,
                        &prev[k.0].values,
                        &prev[v.0].values,
                        probs,
                        g,
                        shape,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    accumulate(prev, q, |gq| axpy(gq, 1.0, &dq));
                    accumulate(prev, k, |gk| axpy(gk, 1.0, &dk));
                    accumulate(prev, v, |gv2| axpy(gv2, 1.0, &dv));
                    pool.put(dq);
                    pool.put(dk);
                    pool.put(dv);
                }
                Op::StraightThroughOneHot(x) => accumulate(prev, *x, |gx| axpy(gx, 1.0, g)),
            }
        }
    }
}

fn axpy(out: &mut [f64], a: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

/// Runs `f` against the gradient buffer of `id` when that node wants one.
fn accumulate(nodes: &mut [Tensor], id: TensorId, f: impl FnOnce(&mut [f64])) {
    if !nodes[id.0].requires_grad {
        return;
    }
    let mut grad = nodes[id.0].grad.take().expect("grad buffers allocated before backward");
    f(&mut grad);
    nodes[id.0].grad = Some(grad);
}

/// Temporarily moves a node's value buffer out so another node in the same
/// slice can be mutated; must be paired with [`restore_values`].
fn take_values(nodes: &mut [Tensor], id: TensorId) -> Vec<f64> {
    std::mem::take(&mut nodes[id.0].values)
}

fn restore_values(nodes: &mut [Tensor], id: TensorId, values: Vec<f64>) {
    nodes[id.0].values = values;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_form_gradient() {
        // loss = sum(x ⊙ y), x=[1,2], y=[3,4] -> dx = [3,4]
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], 2, 1, true);
        let y = tape.constant(vec![3.0, 4.0], 2, 1);
        let m = tape.mul(x, y);
        let loss = tape.sum(m);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![1.0, 2.0, 3.0, 4.0], 2, 2);
        let id = tape.constant(vec![1.0, 0.0, 0.0, 1.0], 2, 2);
        let out = tape.matmul(a, id);
        assert_eq!(tape.values(out), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn row_softmax_rows_sum_to_one_and_positive() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0, 0.0, 0.0, 5.0, -3.0, 1.0], 2, 3);
        let s = tape.row_softmax(x);
        for row in tape.values(s).chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        assert!((tape.values(s)[0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_unary_values() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![0.0], 1, 1);
        let t = tape.tanh(x);
        let e = tape.exp(x);
        assert_eq!(tape.values(t)[0], 0.0);
        assert_eq!(tape.values(e)[0], 1.0);
    }

    #[test]
    fn gradient_accumulation_is_linear() {
        // backward of sum of two independent subgraphs == each run alone
        let run = |combined: bool| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![0.5, -1.0], 1, 2, true);
            let y = tape.leaf(vec![2.0, 0.25], 1, 2, true);
            let xs = tape.tanh(x);
            let ys = tape.exp(y);
            let lx = tape.sum(xs);
            let ly = tape.sum(ys);
            if combined {
                let total = tape.add(lx, ly);
                tape.backward(total);
            } else {
                tape.backward(lx);
                let gx = tape.grad(x).unwrap().to_vec();
                tape.backward(ly);
                return (gx, tape.grad(y).unwrap().to_vec());
            }
            (tape.grad(x).unwrap().to_vec(), tape.grad(y).unwrap().to_vec())
        };
        let (gx1, gy1) = run(true);
        let (gx2, gy2) = run(false);
        assert_eq!(gx1, gx2);
        assert_eq!(gy1, gy2);
    }

    #[test]
    fn taped_computation_is_bit_deterministic() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(vec![0.3, -0.7, 1.1, 0.2, 0.9, -0.4], 2, 3, true);
            let w = tape.leaf(vec![0.5, -0.1, 0.8, 0.2, -0.6, 0.4, 0.05, 1.2, -0.3], 3, 3, true);
            let h = tape.matmul(x, w);
            let s = tape.row_softmax(h);
            let l = tape.mean(s);
            tape.backward(l);
            (
                tape.values(l).to_vec(),
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn recycled_tape_reproduces_results_bitwise() {
        let mut tape = Tape::new();
        let mut first = None;
        for _ in 0..3 {
            tape.recycle();
            let x = tape.leaf(vec![0.3, -0.7, 1.1, 0.2], 2, 2, true);
            let w = tape.leaf(vec![0.5, -0.1, 0.8, 0.2], 2, 2, true);
            let h = tape.matmul(x, w);
            let a = tape.causal_attention(h, h, h, 1, 1);
            let s = tape.row_softmax(a);
            let l = tape.mean(s);
            tape.backward(l);
            let result = (tape.values(l).to_vec(), tape.grad(x).unwrap().to_vec());
            match &first {
                None => first = Some(result),
                Some(f) => assert_eq!(f, &result),
            }
        }
    }

    #[test]
    fn select_rows_scatters_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0, 4.0], 2, 2, true);
        let sel = tape.select_rows(x, &[1, 1, 0]);
        assert_eq!(tape.values(sel), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        let loss = tape.sum(sel);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn tile_rows_sums_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], 1, 2, true);
        let t = tape.tile_rows(x, 3);
        assert_eq!(tape.shape(t), (3, 2));
        let loss = tape.sum(t);
        tape.backward(loss);
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn block_concat_rows_interleaves_blocks() {
        let mut tape = Tape::new();
        // two blocks of one row each
        let a = tape.leaf(vec![1.0, 10.0], 2, 1, true);
        let b = tape.leaf(vec![2.0, 3.0, 20.0, 30.0], 4, 1, true);
        let cat = tape.block_concat_rows(a, b, 2);
        assert_eq!(tape.values(cat), &[1.0, 2.0, 3.0, 10.0, 20.0, 30.0]);
        let loss = tape.sum(cat);
        tape.backward(loss);
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn straight_through_one_hot_forward_and_identity_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.2, 0.5, 0.3, 0.9, 0.05, 0.05], 2, 3, true);
        let st = tape.straight_through_one_hot(x);
        assert_eq!(tape.values(st), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        let picked = tape.row_pick(st, &[1, 0]);
        let loss = tape.sum(picked);
        tape.backward(loss);
        // identity backward: gradient lands on the picked coordinates of x
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_shape_mismatch_panics() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![0.0; 6], 2, 3);
        let b = tape.constant(vec![0.0; 4], 2, 2);
        tape.matmul(a, b);
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn backward_rejects_nonscalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], 1, 2, true);
        let y = tape.tanh(x);
        tape.backward(y);
    }

    #[test]
    #[should_panic(expected = "not connected to any differentiable leaf")]
    fn backward_rejects_detached_loss() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1.0], 1, 1);
        let y = tape.exp(x);
        tape.backward(y);
    }
}
