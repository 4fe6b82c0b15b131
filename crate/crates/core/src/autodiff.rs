//! Tape-based reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles during the
//! forward pass. [`Tape::backward`] then walks the recording in reverse and
//! accumulates vector-Jacobian products into a [`Gradients`] map.
//!
//! ```
//! use dga_core::autodiff::Tape;
//! use dga_core::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let w = tape.param(Tensor::full(2, 2, 3.0));
//! let loss = tape.sum(w).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(w).unwrap().data(), &[1.0; 4]);
//! ```
//!
//! Nodes are appended in execution order, so the recording is always a
//! topological order of the computation graph.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm, gemm_view, norm, MatMut, MatRef, Tensor, NORM_EPS};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

/// Reduction direction for [`Tape::softmax`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Normalize across the columns of each row (rows sum to one).
    Cols,
    /// Normalize across the rows of each column (columns sum to one).
    Rows,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, Var),
    Affine {
        x: Var,
        mul: f64,
    },
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax(Var, Axis),
    SegmentSoftmax {
        x: Var,
        offsets: Arc<Vec<usize>>,
    },
    NormalizeBlocks {
        x: Var,
        width: usize,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SelectCols {
        x: Var,
        cols: Arc<Vec<usize>>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    GatherRows {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    ScatterAddRows {
        x: Var,
        index: Arc<Vec<usize>>,
    },
    FactorMax(FactorMaxCache),
    Route(Box<RouteCache>),
    LinkBce(Box<LinkBceCache>),
    BceWithLogits(BceCache),
    CrossEntropy {
        logits: Var,
        labels: Arc<Vec<usize>>,
    },
}

#[derive(Clone, Debug)]
struct FactorMaxCache {
    z: Var,
    channels: usize,
    /// Channel-wise normalized copy of `z`.
    unit: Tensor,
    /// Winning channel for every (u, v) entry.
    argmax: Vec<u16>,
}

#[derive(Clone, Debug)]
struct RouteCache {
    z: Var,
    c: Var,
    alpha: Var,
    beta: Var,
    sources: Arc<Vec<usize>>,
    targets: Arc<Vec<usize>>,
    offsets: Arc<Vec<usize>>,
    width: usize,
    p: Arc<Tensor>,
    q: Arc<Tensor>,
}

#[derive(Clone, Debug)]
struct LinkBceCache {
    z: Var,
    channels: usize,
    /// Channel-wise normalized `z`, present with the factor term.
    unit: Option<Tensor>,
    argmax: Vec<u16>,
    /// Derivative of the loss with respect to every logit.
    dlogits: Tensor,
}

/// Rows per tile of the fused link loss.
const LINK_TILE: usize = 64;

#[derive(Clone, Debug)]
struct BceCache {
    logits: Var,
    target: Arc<Tensor>,
    pos_weight: f64,
    norm: f64,
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to recorded nodes.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`; `None` for nodes that do not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, requires_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id, tape: self.id }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Detached(v.id));
        }
        self.nodes.get(v.id).ok_or(Error::Detached(v.id))
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Like [`Tape::constant`] but shares the buffer instead of copying it.
    pub fn constant_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.node(a)?.value.matmul(&self.node(b)?.value)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Elementwise sum. `b` may also be a `1 x cols` row broadcast over the
    /// rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let out = broadcast_zip("add", av, bv, |x, y| x + y)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.zip_map(bv, |x, y| x - y);
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product, with the same row broadcast as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let out = broadcast_zip("mul", av, bv, |x, y| x * y)?;
        check_finite("mul", &out)?;
        let rg = self.grad_flag(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every entry of `x` by the `1 x 1` value `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = &self.node(s)?.value;
        if sv.shape() != (1, 1) {
            return Err(Error::shape("scale", format!("factor is {:?}", sv.shape())));
        }
        let f = sv.item();
        let out = self.node(x)?.value.map(|v| v * f);
        let rg = self.grad_flag(&[x, s]);
        Ok(self.push(out, Op::Scale(x, s), rg))
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| mul * v + add);
        check_finite("affine", &out)?;
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Affine { x, mul }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v.max(0.0));
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Relu(x), rg))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(sigmoid);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Sigmoid(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(f64::tanh);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Tanh(x), rg))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.map(f64::exp);
        check_finite("exp", &out)?;
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Exp(x), rg))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if let Some(bad) = xv.data().iter().find(|&&v| v <= 0.0) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        let out = xv.map(f64::ln);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Log(x), rg))
    }

    /// Entries limited to `[lo, hi]`; the gradient is zero where clamped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let out = self.node(x)?.value.map(|v| v.clamp(lo, hi));
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Clamp { x, lo, hi }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let out = match axis {
            Axis::Cols => softmax_rows(xv),
            Axis::Rows => softmax_rows(&xv.transpose()).transpose(),
        };
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Softmax(x, axis), rg))
    }

    /// Softmax over the rows of each contiguous segment, column by column.
    /// Segment `s` spans rows `offsets[s]..offsets[s + 1]`; empty segments are
    /// allowed.
    pub fn segment_softmax(&mut self, x: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&xv.rows())
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::shape(
                "segment_softmax",
                format!("offsets do not partition {} rows", xv.rows()),
            ));
        }
        let out = segment_softmax_values(xv, &offsets);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::SegmentSoftmax { x, offsets }, rg))
    }

    /// Unit-normalizes each row.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let width = self.node(x)?.value.cols();
        self.normalize_blocks(x, width)
    }

    /// Unit-normalizes each `width`-column block of each row separately.
    pub fn normalize_blocks(&mut self, x: Var, width: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if width == 0 || xv.cols() % width != 0 {
            return Err(Error::shape(
                "normalize_blocks",
                format!("{} columns not divisible by block {width}", xv.cols()),
            ));
        }
        let out = xv.normalize_blocks(width);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::NormalizeBlocks { x, width }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut vals = Vec::with_capacity(parts.len());
        for &p in parts {
            vals.push(&*self.node(p)?.value);
        }
        let out = Tensor::concat_cols(&vals)?;
        let rg = self.grad_flag(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if start + width > xv.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("[{start}, {}) of {} columns", start + width, xv.cols()),
            ));
        }
        let out = xv.slice_cols(start, width);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Column `j` of the output is column `cols[j]` of `x`.
    pub fn select_cols(&mut self, x: Var, cols: Arc<Vec<usize>>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if let Some(&bad) = cols.iter().find(|&&c| c >= xv.cols()) {
            return Err(Error::shape(
                "select_cols",
                format!("column {bad} of {}", xv.cols()),
            ));
        }
        let out = Tensor::from_fn(xv.rows(), cols.len(), |i, j| xv.get(i, cols[j]));
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::SelectCols { x, cols }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.node(x)?.value.transpose();
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.node(x)?.value.sum());
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(xv.sum() / xv.len() as f64);
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::Mean(x), rg))
    }

    /// Per-row sums as a `rows x 1` column.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let data = (0..xv.rows()).map(|i| xv.row(i).iter().sum()).collect();
        let out = Tensor::from_vec(xv.rows(), 1, data)?;
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::SumRows(x), rg))
    }

    /// Output row `e` is row `index[e]` of `x`.
    pub fn gather_rows(&mut self, x: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if let Some(&bad) = index.iter().find(|&&r| r >= xv.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row {bad} of {}", xv.rows()),
            ));
        }
        let mut out = Tensor::zeros(index.len(), xv.cols());
        for (e, &r) in index.iter().enumerate() {
            out.row_mut(e).copy_from_slice(xv.row(r));
        }
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::GatherRows { x, index }, rg))
    }

    /// `out[index[e]] += x[e]` into an `n_rows`-row zero matrix.
    pub fn scatter_add_rows(
        &mut self,
        x: Var,
        index: Arc<Vec<usize>>,
        n_rows: usize,
    ) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if index.len() != xv.rows() {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {} rows", index.len(), xv.rows()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&r| r >= n_rows) {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("target row {bad} of {n_rows}"),
            ));
        }
        let mut out = Tensor::zeros(n_rows, xv.cols());
        for (e, &r) in index.iter().enumerate() {
            for (o, &v) in out.row_mut(r).iter_mut().zip(xv.row(e)) {
                *o += v;
            }
        }
        let rg = self.grad_flag(&[x]);
        Ok(self.push(out, Op::ScatterAddRows { x, index }, rg))
    }

    /// Factor-wise similarity fusion: for `z` split into `channels` column
    /// blocks, `out[u][v] = max_k cos(z[u]_k, z[v]_k)`.
    ///
    /// Zero channel rows have similarity 0 with everything. The subgradient of
    /// the max goes to the first maximal channel.
    pub fn factor_max_similarity(&mut self, z: Var, channels: usize) -> Result<Var> {
        let zv = &self.node(z)?.value;
        let (n, d) = zv.shape();
        if channels == 0 || d % channels != 0 {
            return Err(Error::shape(
                "factor_max_similarity",
                format!("{d} columns not divisible into {channels} channels"),
            ));
        }
        if channels > u16::MAX as usize {
            return Err(Error::shape("factor_max_similarity", "too many channels"));
        }
        let width = d / channels;
        let unit = zv.normalize_blocks(width);
        let mut best = Tensor::full(n, n, f64::NEG_INFINITY);
        let mut argmax = vec![0u16; n * n];
        let mut sim = Tensor::zeros(n, n);
        for k in 0..channels {
            let block = unit.slice_cols(k * width, width);
            gemm(&block, false, &block, true, 1.0, &mut sim, 0.0);
            for ((b, a), &s) in best
                .data_mut()
                .iter_mut()
                .zip(argmax.iter_mut())
                .zip(sim.data())
            {
                let better = s > *b;
                *b = if better { s } else { *b };
                *a = if better { k as u16 } else { *a };
            }
        }
        let rg = self.grad_flag(&[z]);
        let cache = FactorMaxCache {
            z,
            channels,
            unit,
            argmax,
        };
        Ok(self.push(best, Op::FactorMax(cache), rg))
    }

    /// One routing round over directed edges `e = (sources[e], targets[e])`,
    /// grouped by source with `offsets` delimiting each source's edges.
    ///
    /// With blockwise scores `s[e][k] = <z[src]_k, c[tgt]_k>` over
    /// `width`-column blocks, `p` is the softmax of `s[e]` over blocks and `q`
    /// the softmax of `s[., k]` over the edges of each source. The output is
    /// `c[u]_k + sum_e (alpha p[e][k] + beta q[e][k]) c[tgt]_k` for edges
    /// leaving `u`. Returns the output and constant copies of `p` and `q`.
    #[allow(clippy::too_many_arguments)]
    pub fn route(
        &mut self,
        z: Var,
        c: Var,
        alpha: Var,
        beta: Var,
        sources: Arc<Vec<usize>>,
        targets: Arc<Vec<usize>>,
        offsets: Arc<Vec<usize>>,
        width: usize,
    ) -> Result<(Var, Var, Var)> {
        let (zv, cv) = (&self.node(z)?.value, &self.node(c)?.value);
        let (a, b) = (&self.node(alpha)?.value, &self.node(beta)?.value);
        let (n, d) = cv.shape();
        if zv.shape() != (n, d) || width == 0 || d % width != 0 {
            return Err(Error::shape(
                "route",
                format!("z {:?}, c {:?}, block {width}", zv.shape(), cv.shape()),
            ));
        }
        if a.shape() != (1, 1) || b.shape() != (1, 1) {
            return Err(Error::shape("route", "alpha and beta must be 1x1"));
        }
        let m = sources.len();
        let bad_offsets = offsets.len() != n + 1
            || offsets[0] != 0
            || offsets[n] != m
            || offsets.windows(2).any(|w| w[0] > w[1]);
        if bad_offsets || targets.len() != m {
            return Err(Error::shape("route", "edge index does not match the nodes"));
        }
        for u in 0..n {
            for e in offsets[u]..offsets[u + 1] {
                if sources[e] != u || targets[e] >= n {
                    return Err(Error::shape("route", format!("edge {e} out of place")));
                }
            }
        }
        let k = d / width;
        let mut scores = Tensor::zeros(m, k);
        for e in 0..m {
            let (zr, cr) = (zv.row(sources[e]), cv.row(targets[e]));
            for (j, s) in scores.row_mut(e).iter_mut().enumerate() {
                let blk = j * width..(j + 1) * width;
                *s = dot(&zr[blk.clone()], &cr[blk]);
            }
        }
        let p = softmax_rows(&scores);
        let q = segment_softmax_values(&scores, &offsets);
        let (av, bv) = (a.item(), b.item());
        let mut out = Tensor::clone(cv);
        for e in 0..m {
            let (pr, qr) = (p.row(e), q.row(e));
            let cr = cv.row(targets[e]);
            let orow = out.row_mut(sources[e]);
            for j in 0..k {
                let w = av * pr[j] + bv * qr[j];
                let blk = j * width..(j + 1) * width;
                for (o, &x) in orow[blk.clone()].iter_mut().zip(&cr[blk]) {
                    *o += w * x;
                }
            }
        }
        check_finite("route", &out)?;
        let (p, q) = (Arc::new(p), Arc::new(q));
        let pv = self.constant_shared(p.clone());
        let qv = self.constant_shared(q.clone());
        let rg = self.grad_flag(&[z, c, alpha, beta]);
        let cache = RouteCache {
            z,
            c,
            alpha,
            beta,
            sources,
            targets,
            offsets,
            width,
            p,
            q,
        };
        let y = self.push(out, Op::Route(Box::new(cache)), rg);
        Ok((y, pv, qv))
    }

    /// Weighted binary cross-entropy on logits, averaged over all entries:
    /// `norm / len * sum(w * y * softplus(-x) + (1 - y) * softplus(x))` with
    /// `w = pos_weight` on positive targets.
    pub fn bce_with_logits(
        &mut self,
        logits: Var,
        target: Arc<Tensor>,
        pos_weight: f64,
        norm: f64,
    ) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        if lv.shape() != target.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("logits {:?} vs target {:?}", lv.shape(), target.shape()),
            ));
        }
        let mut total = 0.0;
        for (&x, &y) in lv.data().iter().zip(target.data()) {
            // softplus(-x) = softplus(x) - x
            let sp = softplus(x);
            total += pos_weight * y * (sp - x) + (1.0 - y) * sp;
        }
        let out = Tensor::scalar(norm * total / lv.len().max(1) as f64);
        check_finite("bce_with_logits", &out)?;
        let rg = self.grad_flag(&[logits]);
        let cache = BceCache {
            logits,
            target,
            pos_weight,
            norm,
        };
        Ok(self.push(out, Op::BceWithLogits(cache), rg))
    }

    /// Weighted binary cross-entropy of the link scores of `z` against the
    /// square 0/1 `target`, in one step. The scores are `Z Zᵀ`, plus
    /// `max_k cos(z[u]_k, z[v]_k)` over `channels` column blocks when
    /// `factor` is set; the loss and its gradient match
    /// [`Tape::bce_with_logits`] applied to those scores, without keeping
    /// any intermediate `N x N` score matrix.
    pub fn link_bce(
        &mut self,
        z: Var,
        channels: usize,
        factor: bool,
        target: Arc<Tensor>,
        pos_weight: f64,
        norm: f64,
    ) -> Result<Var> {
        let zv = &self.node(z)?.value;
        let (n, d) = zv.shape();
        if target.shape() != (n, n) {
            return Err(Error::shape(
                "link_bce",
                format!("embedding {n}x{d} vs target {:?}", target.shape()),
            ));
        }
        if channels == 0 || d % channels != 0 || channels > u16::MAX as usize {
            return Err(Error::shape(
                "link_bce",
                format!("{d} columns into {channels} channels"),
            ));
        }
        let width = d / channels;
        let unit = factor.then(|| zv.normalize_blocks(width));
        let mut argmax = if factor { vec![0u16; n * n] } else { Vec::new() };
        let mut dlogits = Tensor::zeros(n, n);
        let mut best = vec![0.0; LINK_TILE * n];
        let mut sim = vec![0.0; LINK_TILE * n];
        let scale = norm / (n * n).max(1) as f64;
        let mut total = 0.0;
        for r0 in (0..n).step_by(LINK_TILE) {
            let rows = LINK_TILE.min(n - r0);
            let tile = r0 * n..(r0 + rows) * n;
            let logits = &mut dlogits.data_mut()[tile.clone()];
            let out = MatMut {
                data: logits,
                rows,
                cols: n,
                stride: n,
            };
            let zr = MatRef::of(zv);
            gemm_view(zr.sub(r0, rows, 0, d), false, zr, true, 1.0, out, 0.0);
            if let Some(u) = &unit {
                let best = &mut best[..rows * n];
                let am = &mut argmax[tile.clone()];
                best.fill(f64::NEG_INFINITY);
                let ur = MatRef::of(u);
                for k in 0..channels {
                    let sim = &mut sim[..rows * n];
                    let block = ur.sub(0, n, k * width, width);
                    let out = MatMut {
                        data: sim,
                        rows,
                        cols: n,
                        stride: n,
                    };
                    gemm_view(block.sub(r0, rows, 0, width), false, block, true, 1.0, out, 0.0);
                    for ((b, a), &s) in best.iter_mut().zip(am.iter_mut()).zip(sim.iter()) {
                        let better = s > *b;
                        *b = if better { s } else { *b };
                        *a = if better { k as u16 } else { *a };
                    }
                }
                let logits = &mut dlogits.data_mut()[tile.clone()];
                logits.iter_mut().zip(best.iter()).for_each(|(l, b)| *l += b);
            }
            let logits = &mut dlogits.data_mut()[tile.clone()];
            for (l, &y) in logits.iter_mut().zip(&target.data()[tile]) {
                let x = *l;
                let e = (-x.abs()).exp();
                let sp = x.max(0.0) + e.ln_1p();
                let s = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
                // softplus(-x) = softplus(x) - x
                total += pos_weight * y * (sp - x) + (1.0 - y) * sp;
                *l = scale * (pos_weight * y * (s - 1.0) + (1.0 - y) * s);
            }
        }
        let out = Tensor::scalar(scale * total);
        check_finite("link_bce", &out)?;
        let rg = self.grad_flag(&[z]);
        let cache = LinkBceCache {
            z,
            channels,
            unit,
            argmax,
            dlogits,
        };
        Ok(self.push(out, Op::LinkBce(Box::new(cache)), rg))
    }

    /// Mean over rows of `-log softmax(logits[i])[labels[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Arc<Vec<usize>>) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        if labels.len() != lv.rows() || labels.iter().any(|&l| l >= lv.cols()) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} labels for {:?} logits", labels.len(), lv.shape()),
            ));
        }
        if lv.rows() == 0 {
            return Err(Error::shape("cross_entropy", "no rows"));
        }
        let mut total = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = lv.row(i);
            let m = row.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[l];
        }
        let out = Tensor::scalar(total / lv.rows() as f64);
        let rg = self.grad_flag(&[logits]);
        Ok(self.push(out, Op::CrossEntropy { logits, labels }, rg))
    }

    /// Reverse pass from the scalar `loss`.
    ///
    /// Every leaf recorded with [`Tape::param`] gets a gradient, zero when it
    /// did not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.node(loss)?.value;
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && g.is_none() {
                *g = Some(Tensor::zeros(node.value.rows(), node.value.cols()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.id].value
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &*node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let ga = slot(grads, *a, av.shape());
                    gemm(g, false, bv, true, 1.0, ga, 1.0);
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, bv.shape());
                    gemm(av, true, g, false, 1.0, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    let bshape = self.val(*b).shape();
                    if bshape == g.shape() {
                        accumulate(grads, *b, g);
                    } else {
                        accumulate_broadcast(slot(grads, *b, bshape), g, |gv, _| gv);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, g);
                }
                if self.wants(*b) {
                    slot(grads, *b, g.shape()).axpy(-1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.wants(*a) {
                    let ga = slot(grads, *a, av.shape());
                    let bcols = bv.cols();
                    let broadcast = bv.rows() == 1 && av.rows() != 1;
                    for i in 0..av.rows() {
                        let brow = if broadcast { bv.row(0) } else { bv.row(i) };
                        for j in 0..bcols {
                            let idx = i * bcols + j;
                            ga.data_mut()[idx] += g.data()[idx] * brow[j];
                        }
                    }
                }
                if self.wants(*b) {
                    let gb = slot(grads, *b, bv.shape());
                    accumulate_broadcast(gb, g, |gv, idx| gv * av.data()[idx]);
                }
            }
            Op::Scale(x, s) => {
                let f = self.val(*s).item();
                if self.wants(*x) {
                    slot(grads, *x, g.shape()).axpy(f, g);
                }
                if self.wants(*s) {
                    let xv = self.val(*x);
                    let gs = dot(g.data(), xv.data());
                    slot(grads, *s, (1, 1)).data_mut()[0] += gs;
                }
            }
            Op::Affine { x, mul } => {
                slot(grads, *x, g.shape()).axpy(*mul, g);
            }
            Op::Relu(x) => {
                let xv = self.val(*x);
                let gx = slot(grads, *x, g.shape());
                for ((o, &gv), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if xi > 0.0 {
                        *o += gv;
                    }
                }
            }
            Op::Sigmoid(x) => {
                let gx = slot(grads, *x, g.shape());
                for ((o, &gv), &yi) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * yi * (1.0 - yi);
                }
            }
            Op::Tanh(x) => {
                let gx = slot(grads, *x, g.shape());
                for ((o, &gv), &yi) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * (1.0 - yi * yi);
                }
            }
            Op::Exp(x) => {
                let gx = slot(grads, *x, g.shape());
                for ((o, &gv), &yi) in gx.data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                    *o += gv * yi;
                }
            }
            Op::Log(x) => {
                let xv = self.val(*x);
                let gx = slot(grads, *x, g.shape());
                for ((o, &gv), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    *o += gv / xi;
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.val(*x);
                let gx = slot(grads, *x, g.shape());
                for ((o, &gv), &xi) in gx.data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                    if xi >= *lo && xi <= *hi {
                        *o += gv;
                    }
                }
            }
            Op::Softmax(x, axis) => {
                let gx = slot(grads, *x, g.shape());
                match axis {
                    Axis::Cols => {
                        for i in 0..y.rows() {
                            let (yr, gr) = (y.row(i), g.row(i));
                            let s = dot(yr, gr);
                            for ((o, &yi), &gi) in gx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                                *o += yi * (gi - s);
                            }
                        }
                    }
                    Axis::Rows => {
                        for j in 0..y.cols() {
                            let s: f64 = (0..y.rows()).map(|i| y.get(i, j) * g.get(i, j)).sum();
                            for i in 0..y.rows() {
                                let v = gx.get(i, j) + y.get(i, j) * (g.get(i, j) - s);
                                gx.set(i, j, v);
                            }
                        }
                    }
                }
            }
            Op::SegmentSoftmax { x, offsets } => {
                let gx = slot(grads, *x, g.shape());
                for seg in offsets.windows(2) {
                    let (lo, hi) = (seg[0], seg[1]);
                    for j in 0..y.cols() {
                        let s: f64 = (lo..hi).map(|r| y.get(r, j) * g.get(r, j)).sum();
                        for r in lo..hi {
                            let v = gx.get(r, j) + y.get(r, j) * (g.get(r, j) - s);
                            gx.set(r, j, v);
                        }
                    }
                }
            }
            Op::NormalizeBlocks { x, width } => {
                let xv = self.val(*x);
                let gx = slot(grads, *x, g.shape());
                let w = *width;
                for ((xb, yb), (gb, ob)) in xv
                    .data()
                    .chunks(w)
                    .zip(y.data().chunks(w))
                    .zip(g.data().chunks(w).zip(gx.data_mut().chunks_mut(w)))
                {
                    let n = norm(xb);
                    if n <= NORM_EPS {
                        continue;
                    }
                    let s = dot(yb, gb);
                    for ((o, &yi), &gi) in ob.iter_mut().zip(yb).zip(gb) {
                        *o += (gi - yi * s) / n;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.val(p).cols();
                    if self.wants(p) {
                        let gp = slot(grads, p, (g.rows(), w));
                        for i in 0..g.rows() {
                            for (o, &gv) in gp.row_mut(i).iter_mut().zip(&g.row(i)[off..off + w]) {
                                *o += gv;
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let shape = self.val(*x).shape();
                let gx = slot(grads, *x, shape);
                for i in 0..g.rows() {
                    let dst = &mut gx.row_mut(i)[*start..*start + g.cols()];
                    for (o, &gv) in dst.iter_mut().zip(g.row(i)) {
                        *o += gv;
                    }
                }
            }
            Op::SelectCols { x, cols } => {
                let shape = self.val(*x).shape();
                let gx = slot(grads, *x, shape);
                for i in 0..g.rows() {
                    for (j, &c) in cols.iter().enumerate() {
                        let v = gx.get(i, c) + g.get(i, j);
                        gx.set(i, c, v);
                    }
                }
            }
            Op::Transpose(x) => {
                let gt = g.transpose();
                slot(grads, *x, gt.shape()).axpy(1.0, &gt);
            }
            Op::Sum(x) => {
                let gv = g.item();
                let shape = self.val(*x).shape();
                slot(grads, *x, shape)
                    .data_mut()
                    .iter_mut()
                    .for_each(|o| *o += gv);
            }
            Op::Mean(x) => {
                let xv = self.val(*x);
                let gv = g.item() / xv.len() as f64;
                slot(grads, *x, xv.shape())
                    .data_mut()
                    .iter_mut()
                    .for_each(|o| *o += gv);
            }
            Op::SumRows(x) => {
                let shape = self.val(*x).shape();
                let gx = slot(grads, *x, shape);
                for i in 0..shape.0 {
                    let gi = g.data()[i];
                    gx.row_mut(i).iter_mut().for_each(|o| *o += gi);
                }
            }
            Op::GatherRows { x, index } => {
                let shape = self.val(*x).shape();
                let gx = slot(grads, *x, shape);
                for (e, &r) in index.iter().enumerate() {
                    for (o, &gv) in gx.row_mut(r).iter_mut().zip(g.row(e)) {
                        *o += gv;
                    }
                }
            }
            Op::ScatterAddRows { x, index } => {
                let shape = self.val(*x).shape();
                let gx = slot(grads, *x, shape);
                for (e, &r) in index.iter().enumerate() {
                    for (o, &gv) in gx.row_mut(e).iter_mut().zip(g.row(r)) {
                        *o += gv;
                    }
                }
            }
            Op::FactorMax(cache) => self.backprop_factor_max(cache, g, grads),
            Op::Route(cache) => self.backprop_route(cache, g, grads),
            Op::LinkBce(cache) => self.backprop_link_bce(cache, g.item(), grads),
            Op::BceWithLogits(cache) => {
                let lv = self.val(cache.logits);
                let scale = g.item() * cache.norm / lv.len().max(1) as f64;
                let gx = slot(grads, cache.logits, lv.shape());
                for ((o, &x), &t) in gx
                    .data_mut()
                    .iter_mut()
                    .zip(lv.data())
                    .zip(cache.target.data())
                {
                    let s = sigmoid(x);
                    *o += scale * (cache.pos_weight * t * (s - 1.0) + (1.0 - t) * s);
                }
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.val(*logits);
                let probs = softmax_rows(lv);
                let scale = g.item() / lv.rows() as f64;
                let gx = slot(grads, *logits, lv.shape());
                for (i, &l) in labels.iter().enumerate() {
                    for (j, (o, &p)) in gx.row_mut(i).iter_mut().zip(probs.row(i)).enumerate() {
                        let onehot = if j == l { 1.0 } else { 0.0 };
                        *o += scale * (p - onehot);
                    }
                }
            }
        }
    }

    fn backprop_route(&self, cache: &RouteCache, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (zv, cv) = (self.val(cache.z), self.val(cache.c));
        let (av, bv) = (self.val(cache.alpha).item(), self.val(cache.beta).item());
        let (p, q) = (&*cache.p, &*cache.q);
        let (src, tgt) = (&*cache.sources, &*cache.targets);
        let (n, d) = cv.shape();
        let width = cache.width;
        let k = d / width;
        let m = src.len();
        let want_c = self.wants(cache.c);
        let mut dc = if want_c {
            g.clone()
        } else {
            Tensor::zeros(n, d)
        };
        // Gradient with respect to each edge weight alpha p + beta q.
        let mut dw = Tensor::zeros(m, k);
        for e in 0..m {
            let (gr, cr) = (g.row(src[e]), cv.row(tgt[e]));
            let (pr, qr) = (p.row(e), q.row(e));
            for j in 0..k {
                let blk = j * width..(j + 1) * width;
                dw.row_mut(e)[j] = dot(&gr[blk.clone()], &cr[blk.clone()]);
                if want_c {
                    let w = av * pr[j] + bv * qr[j];
                    for (o, &gi) in dc.row_mut(tgt[e])[blk.clone()].iter_mut().zip(&gr[blk]) {
                        *o += w * gi;
                    }
                }
            }
        }
        if self.wants(cache.alpha) {
            slot(grads, cache.alpha, (1, 1)).data_mut()[0] += dot(dw.data(), p.data());
        }
        if self.wants(cache.beta) {
            slot(grads, cache.beta, (1, 1)).data_mut()[0] += dot(dw.data(), q.data());
        }
        let mut ds = Tensor::zeros(m, k);
        for e in 0..m {
            let (pr, dr) = (p.row(e), dw.row(e));
            let s = av * dot(pr, dr);
            for ((o, &pi), &di) in ds.row_mut(e).iter_mut().zip(pr).zip(dr) {
                *o = pi * (av * di - s);
            }
        }
        for seg in cache.offsets.windows(2) {
            let (lo, hi) = (seg[0], seg[1]);
            for j in 0..k {
                let s: f64 = (lo..hi).map(|e| q.get(e, j) * dw.get(e, j)).sum::<f64>() * bv;
                for e in lo..hi {
                    let v = ds.get(e, j) + q.get(e, j) * (bv * dw.get(e, j) - s);
                    ds.set(e, j, v);
                }
            }
        }
        let want_z = self.wants(cache.z);
        let mut dz = Tensor::zeros(if want_z { n } else { 0 }, d);
        for e in 0..m {
            let (u, v) = (src[e], tgt[e]);
            let sr = ds.row(e);
            for j in 0..k {
                let blk = j * width..(j + 1) * width;
                if want_z {
                    let cr = &cv.row(v)[blk.clone()];
                    for (o, &x) in dz.row_mut(u)[blk.clone()].iter_mut().zip(cr) {
                        *o += sr[j] * x;
                    }
                }
                if want_c {
                    let zr = &zv.row(u)[blk.clone()];
                    for (o, &x) in dc.row_mut(v)[blk].iter_mut().zip(zr) {
                        *o += sr[j] * x;
                    }
                }
            }
        }
        if want_z {
            slot(grads, cache.z, (n, d)).axpy(1.0, &dz);
        }
        if want_c {
            slot(grads, cache.c, (n, d)).axpy(1.0, &dc);
        }
    }

    fn backprop_link_bce(&self, cache: &LinkBceCache, g: f64, grads: &mut [Option<Tensor>]) {
        let zv = self.val(cache.z);
        let (n, d) = zv.shape();
        let gl = &cache.dlogits;
        let gz = slot(grads, cache.z, (n, d));
        // Z Zᵀ: dZ = (G + Gᵀ) Z
        gemm(gl, false, zv, false, g, gz, 1.0);
        gemm(gl, true, zv, false, g, gz, 1.0);
        let Some(unit) = &cache.unit else { return };
        let width = d / cache.channels;
        let mut d_unit = Tensor::zeros(n, d);
        let mut masked = vec![0.0; LINK_TILE * n];
        let ur = MatRef::of(unit);
        for r0 in (0..n).step_by(LINK_TILE) {
            let rows = LINK_TILE.min(n - r0);
            let tile = r0 * n..(r0 + rows) * n;
            for k in 0..cache.channels {
                let k16 = k as u16;
                let masked = &mut masked[..rows * n];
                for ((m, &gv), &a) in masked
                    .iter_mut()
                    .zip(&gl.data()[tile.clone()])
                    .zip(&cache.argmax[tile.clone()])
                {
                    *m = if a == k16 { gv } else { 0.0 };
                }
                let a = MatRef {
                    data: masked,
                    rows,
                    cols: n,
                    stride: n,
                };
                let block = ur.sub(0, n, k * width, width);
                let du = MatMut::of(&mut d_unit).sub(r0, rows, k * width, width);
                gemm_view(a, false, block, false, g, du, 1.0);
                let du = MatMut::of(&mut d_unit).sub(0, n, k * width, width);
                gemm_view(a, true, block.sub(r0, rows, 0, width), false, g, du, 1.0);
            }
        }
        for ((zb, yb), (gb, ob)) in zv
            .data()
            .chunks(width)
            .zip(unit.data().chunks(width))
            .zip(d_unit.data().chunks(width).zip(gz.data_mut().chunks_mut(width)))
        {
            let nrm = norm(zb);
            if nrm <= NORM_EPS {
                continue;
            }
            let s = dot(yb, gb);
            for ((o, &yi), &gi) in ob.iter_mut().zip(yb).zip(gb) {
                *o += (gi - yi * s) / nrm;
            }
        }
    }

    fn backprop_factor_max(
        &self,
        cache: &FactorMaxCache,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let zv = self.val(cache.z);
        let (n, d) = zv.shape();
        let width = d / cache.channels;
        let mut masked = Tensor::zeros(n, n);
        let mut d_unit = Tensor::zeros(n, width);
        let gz = slot(grads, cache.z, (n, d));
        for k in 0..cache.channels {
            let k16 = k as u16;
            // S = U U^T routes dU = (A + A^T) U with A the gradient masked to k.
            for ((a, &gv), &am) in masked
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(&cache.argmax)
            {
                *a = if am == k16 { gv } else { 0.0 };
            }
            let block = cache.unit.slice_cols(k * width, width);
            gemm(&masked, false, &block, false, 1.0, &mut d_unit, 0.0);
            gemm(&masked, true, &block, false, 1.0, &mut d_unit, 1.0);
            for u in 0..n {
                let zb = &zv.row(u)[k * width..(k + 1) * width];
                let nrm = norm(zb);
                if nrm <= NORM_EPS {
                    continue;
                }
                let yb = block.row(u);
                let gb = d_unit.row(u);
                let s = dot(yb, gb);
                let out = &mut gz.row_mut(u)[k * width..(k + 1) * width];
                for ((o, &yi), &gi) in out.iter_mut().zip(yb).zip(gb) {
                    *o += (gi - yi * s) / nrm;
                }
            }
        }
    }
}

/// Adds `g` into the gradient of `v`, taking a copy when there is none yet.
fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: &Tensor) {
    match &mut grads[v.id] {
        Some(t) => t.axpy(1.0, g),
        empty => *empty = Some(g.clone()),
    }
}

fn slot(grads: &mut [Option<Tensor>], v: Var, shape: (usize, usize)) -> &mut Tensor {
    grads[v.id].get_or_insert_with(|| Tensor::zeros(shape.0, shape.1))
}

/// Adds `f(g[idx], idx)` into `target`, summing over rows when `target` is a
/// broadcast row.
fn accumulate_broadcast(target: &mut Tensor, g: &Tensor, f: impl Fn(f64, usize) -> f64) {
    if target.shape() == g.shape() {
        for (idx, (o, &gv)) in target.data_mut().iter_mut().zip(g.data()).enumerate() {
            *o += f(gv, idx);
        }
    } else {
        let cols = g.cols();
        for i in 0..g.rows() {
            for j in 0..cols {
                let idx = i * cols + j;
                target.data_mut()[j] += f(g.data()[idx], idx);
            }
        }
    }
}

fn broadcast_zip(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    if b.rows() == 1 && b.cols() == a.cols() {
        let brow = b.row(0);
        return Ok(Tensor::from_fn(a.rows(), a.cols(), |i, j| {
            f(a.get(i, j), brow[j])
        }));
    }
    Err(Error::shape(
        op,
        format!("{:?} vs {:?}", a.shape(), b.shape()),
    ))
}

/// Softmax over the rows of each segment, column by column.
fn segment_softmax_values(xv: &Tensor, offsets: &[usize]) -> Tensor {
    let cols = xv.cols();
    let mut out = Tensor::zeros(xv.rows(), cols);
    for seg in offsets.windows(2) {
        let (lo, hi) = (seg[0], seg[1]);
        if lo == hi {
            continue;
        }
        for j in 0..cols {
            let m = (lo..hi).map(|r| xv.get(r, j)).fold(f64::MIN, f64::max);
            let mut z = 0.0;
            for r in lo..hi {
                let e = (xv.get(r, j) - m).exp();
                out.set(r, j, e);
                z += e;
            }
            for r in lo..hi {
                out.set(r, j, out.get(r, j) / z);
            }
        }
    }
    out
}

/// Softmax across the columns of every row.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}
