//! Reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node to a [`Tape`]. Node ids are handed out in
//! creation order, which is a valid topological order of the computation
//! graph, so [`Tape::backward`] simply walks the node list in reverse and
//! accumulates (sums) gradients into the parents of each node.
//!
//! A node requires a gradient iff it is a leaf created with
//! `requires_grad = true` or any of its parents requires one. Frozen
//! parameters are therefore leaves without `requires_grad`; gradients still
//! flow *through* the operations that consume them, but no weight gradient is
//! ever computed for them.
//!
//! Batches of clip sequences are stored as stacked rows: `B` sequences of `T`
//! clips form a `(B*T) x d` matrix. The `segment_*` operations, [`Tape::attention`]
//! and [`Tape::merge`] operate per contiguous block of `seg` rows.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Matrix};

/// Epsilon inside the layer-norm variance root.
pub const LAYER_NORM_EPS: f64 = 1e-5;
/// Lower bound on the product of norms in [`Tape::segment_cosine`].
pub const COSINE_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    SegmentMean {
        x: Var,
        seg: usize,
    },
    ConcatCols(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seg: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    SegmentLeftMul {
        m: Var,
        x: Var,
        seg: usize,
    },
    Merge {
        outputs: Vec<Var>,
        w: Var,
        seg: usize,
    },
    SegmentCosine {
        a: Var,
        b: Var,
        seg: usize,
        norms: Vec<(f64, f64, bool)>,
    },
    SumCols(Var),
    SumAll(Var),
    SqNormRows(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    GradReverse {
        x: Var,
        lambda: f64,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    grad: Option<Matrix>,
}

/// Records a computation and differentiates it.
///
/// A tape is single-use per training step and is not `Sync`-shared; build a
/// fresh tape for every forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_finite(op: &'static str, m: &Matrix) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric {
            op,
            detail: "non-finite input".into(),
        })
    }
}

fn check_segments(op: &'static str, rows: usize, seg: usize) -> Result<usize> {
    if seg == 0 || rows % seg != 0 {
        return Err(Error::dim(op, (rows, 0), (seg, 0)));
    }
    Ok(rows / seg)
}

/// Standard normal CDF.
fn phi_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    x * phi_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    phi_cdf(x) + x * phi_pdf(x)
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A trainable input.
    pub fn var(&mut self, value: Matrix) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = &self.nodes[v.0].value;
        debug_assert_eq!(m.shape(), (1, 1));
        m.data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient populated by the last [`Tape::backward`] call.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::dim("matmul", va.shape(), vb.shape()));
        }
        let mut out = Matrix::zeros(va.rows(), vb.cols());
        gemm(va, false, vb, false, &mut out, 0.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    /// Sum of several same-shaped nodes, left to right.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::Config("add_all of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `x + bias` with a `1 x cols` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.rows() != 1 || vb.cols() != vx.cols() {
            return Err(Error::dim("add_row", vx.shape(), vb.shape()));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddRow(x, bias), rg))
    }

    /// `x * w + b` for a weight `in x out` and bias `1 x out`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    /// Row-wise layer normalisation followed by the affine `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let vx = self.value(x);
        let (rows, cols) = vx.shape();
        if cols == 0 {
            return Err(Error::dim("layer_norm", vx.shape(), (1, 0)));
        }
        let (vg, vb) = (self.value(gain), self.value(bias));
        if vg.shape() != (1, cols) || vb.shape() != (1, cols) {
            return Err(Error::dim("layer_norm", vx.shape(), vg.shape()));
        }
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(inv);
            let xr = xhat.row_mut(r);
            for (h, x) in xr.iter_mut().zip(row) {
                *h = (x - mean) * inv;
            }
            let orow = out.row_mut(r);
            for c in 0..cols {
                orow[c] = xr[c] * vg.data()[c] + vb.data()[c];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        check_finite("softmax", vx)?;
        let mut out = Matrix::zeros(vx.rows(), vx.cols());
        for r in 0..vx.rows() {
            softmax_into(vx.row(r), out.row_mut(r));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    /// Mean over each block of `seg` consecutive rows: `(B*seg) x d -> B x d`.
    pub fn segment_mean(&mut self, x: Var, seg: usize) -> Result<Var> {
        let vx = self.value(x);
        let b = check_segments("segment_mean", vx.rows(), seg)?;
        let mut out = Matrix::zeros(b, vx.cols());
        let inv = 1.0 / seg as f64;
        for s in 0..b {
            let orow = out.row_mut(s);
            for t in 0..seg {
                for (o, v) in orow.iter_mut().zip(vx.row(s * seg + t)) {
                    *o += v;
                }
            }
            orow.iter_mut().for_each(|o| *o *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::SegmentMean { x, seg }, rg))
    }

    /// Column-wise concatenation `[a ; b]` along the feature axis.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(Error::dim("concat_cols", va.shape(), vb.shape()));
        }
        let (ca, cb) = (va.cols(), vb.cols());
        let mut out = Matrix::zeros(va.rows(), ca + cb);
        for r in 0..va.rows() {
            let orow = out.row_mut(r);
            orow[..ca].copy_from_slice(va.row(r));
            orow[ca..].copy_from_slice(vb.row(r));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    /// Multi-head scaled dot-product attention inside each block of `seg`
    /// rows. `q`, `k`, `v` are already projected; head `h` owns columns
    /// `h*dh..(h+1)*dh`. Returns the concatenated head outputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seg: usize, heads: usize) -> Result<Var> {
        self.same_shape("attention", q, k)?;
        self.same_shape("attention", q, v)?;
        let (rows, d) = self.shape(q);
        let nseg = check_segments("attention", rows, seg)?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::dim("attention", (rows, d), (heads, 0)));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; nseg * heads * seg * seg];
        let mut out = Matrix::zeros(rows, d);
        let mut scores = vec![0.0; seg];
        for s in 0..nseg {
            let base = s * seg;
            for h in 0..heads {
                let c0 = h * dh;
                for i in 0..seg {
                    let qi = &vq.row(base + i)[c0..c0 + dh];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let kj = &vk.row(base + j)[c0..c0 + dh];
                        *sc = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    }
                    let p0 = ((s * heads + h) * seg + i) * seg;
                    let p = &mut probs[p0..p0 + seg];
                    softmax_into(&scores, p);
                    let orow = &mut out.row_mut(base + i)[c0..c0 + dh];
                    for (j, &pj) in p.iter().enumerate() {
                        let vj = &vv.row(base + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vj) {
                            *o += pj * x;
                        }
                    }
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::Numeric {
                op: "attention",
                detail: "non-finite scores".into(),
            });
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seg,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid out
    /// as `[segment][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Left-multiplies every block of `seg` rows of `x` by the `seg x seg`
    /// matrix `m`: `y_b = m * x_b`.
    pub fn segment_left_mul(&mut self, m: Var, x: Var, seg: usize) -> Result<Var> {
        let (vm, vx) = (self.value(m), self.value(x));
        let nseg = check_segments("segment_left_mul", vx.rows(), seg)?;
        if vm.shape() != (seg, seg) {
            return Err(Error::dim("segment_left_mul", vm.shape(), vx.shape()));
        }
        let d = vx.cols();
        let mut out = Matrix::zeros(vx.rows(), d);
        for s in 0..nseg {
            let base = s * seg;
            for i in 0..seg {
                let mrow = vm.row(i);
                let orow = out.row_mut(base + i);
                for (j, &mij) in mrow.iter().enumerate() {
                    if mij == 0.0 {
                        continue;
                    }
                    for (o, v) in orow.iter_mut().zip(vx.row(base + j)) {
                        *o += mij * v;
                    }
                }
            }
        }
        let rg = self.rg(m) || self.rg(x);
        Ok(self.push(out, Op::SegmentLeftMul { m, x, seg }, rg))
    }

    /// Soft merge: block `b` of the result is `sum_i w[b, i] * outputs[i]_b`
    /// where `w` is `B x N` and each output is `(B*seg) x d`.
    pub fn merge(&mut self, outputs: &[Var], w: Var, seg: usize) -> Result<Var> {
        let (&first, _) = outputs
            .split_first()
            .ok_or_else(|| Error::Config("merge of no outputs".into()))?;
        for &o in outputs {
            self.same_shape("merge", first, o)?;
        }
        let (rows, d) = self.shape(first);
        let nseg = check_segments("merge", rows, seg)?;
        let vw = self.value(w);
        if vw.shape() != (nseg, outputs.len()) {
            return Err(Error::dim("merge", (nseg, outputs.len()), vw.shape()));
        }
        let mut out = Matrix::zeros(rows, d);
        for (i, &o) in outputs.iter().enumerate() {
            let vo = self.value(o);
            for s in 0..nseg {
                let wi = vw.get(s, i);
                for t in 0..seg {
                    let r = s * seg + t;
                    for (a, b) in out.row_mut(r).iter_mut().zip(vo.row(r)) {
                        *a += wi * b;
                    }
                }
            }
        }
        let rg = self.rg(w) || outputs.iter().any(|&o| self.rg(o));
        Ok(self.push(
            out,
            Op::Merge {
                outputs: outputs.to_vec(),
                w,
                seg,
            },
            rg,
        ))
    }

    /// Cosine similarity between corresponding flattened blocks of `a` and
    /// `b`, one value per block (`B x 1`). The product of norms is clamped
    /// below at [`COSINE_EPS`].
    pub fn segment_cosine(&mut self, a: Var, b: Var, seg: usize) -> Result<Var> {
        self.same_shape("segment_cosine", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nseg = check_segments("segment_cosine", va.rows(), seg)?;
        let d = va.cols();
        let mut out = Matrix::zeros(nseg, 1);
        let mut norms = Vec::with_capacity(nseg);
        for s in 0..nseg {
            let range = s * seg * d..(s + 1) * seg * d;
            let (xa, xb) = (&va.data()[range.clone()], &vb.data()[range]);
            let mut dot = 0.0;
            let mut na = 0.0;
            let mut nb = 0.0;
            for (x, y) in xa.iter().zip(xb) {
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            let clamped = na * nb < COSINE_EPS;
            let denom = if clamped { COSINE_EPS } else { na * nb };
            out.set(s, 0, dot / denom);
            norms.push((na, nb, clamped));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::SegmentCosine { a, b, seg, norms }, rg))
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = Matrix::zeros(vx.rows(), 1);
        for r in 0..vx.rows() {
            out.set(r, 0, vx.row(r).iter().sum());
        }
        let rg = self.rg(x);
        self.push(out, Op::SumCols(x), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Matrix::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(out, Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Squared Euclidean norm of each row: `r x c -> r x 1`.
    pub fn sq_norm_rows(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let mut out = Matrix::zeros(vx.rows(), 1);
        for r in 0..vx.rows() {
            out.set(r, 0, vx.row(r).iter().map(|v| v * v).sum());
        }
        let rg = self.rg(x);
        self.push(out, Op::SqNormRows(x), rg)
    }

    /// Mean softmax cross-entropy of `B x C` logits against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let vl = self.value(logits);
        if vl.rows() != labels.len() || vl.rows() == 0 {
            return Err(Error::dim("cross_entropy", vl.shape(), (labels.len(), 1)));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= vl.cols()) {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                vl.cols()
            )));
        }
        check_finite("cross_entropy", vl)?;
        let mut probs = Matrix::zeros(vl.rows(), vl.cols());
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = vl.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            softmax_into(row, probs.row_mut(r));
        }
        let out = Matrix::scalar(loss / labels.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Identity forward; the backward pass multiplies the incoming gradient
    /// by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let out = self.value(x).clone();
        let rg = self.rg(x);
        self.push(out, Op::GradReverse { x, lambda }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(Error::dim("gather_rows", vx.shape(), (bad, 0)));
        }
        let mut out = Matrix::zeros(idx.len(), vx.cols());
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(vx.row(i));
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Back-propagates from the `1 x 1` node `loss` with seed 1.
    ///
    /// Gradients from a previous call are discarded. Afterwards every node
    /// that requires a gradient and lies on a path to `loss` has one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(Error::dim("backward", shape, (1, 1)));
        }
        let mut grads: Vec<Option<Matrix>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if self.rg(loss) {
            grads[loss.0] = Some(Matrix::scalar(1.0));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.into_iter().chain(std::iter::repeat_with(|| None))) {
            node.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accum_gemm(grads, *a, g, false, val(*b), true);
                }
                if rg(*b) {
                    accum_gemm(grads, *b, val(*a), true, g, false);
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    accum(grads, *a, g.transpose());
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accum_ref(grads, *a, g, 1.0);
                }
                if rg(*b) {
                    accum_ref(grads, *b, g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    accum_ref(grads, *a, g, 1.0);
                }
                if rg(*b) {
                    accum_ref(grads, *b, g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    accum(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if rg(*b) {
                    accum(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => {
                if rg(*a) {
                    accum_ref(grads, *a, g, *s);
                }
            }
            Op::AddRow(x, bias) => {
                if rg(*x) {
                    accum_ref(grads, *x, g, 1.0);
                }
                if rg(*bias) {
                    accum(grads, *bias, g.mean_rows().scale(g.rows() as f64));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = g.shape();
                let vg = val(*gain);
                if rg(*gain) {
                    let mut dg = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                    accum(grads, *gain, dg);
                }
                if rg(*bias) {
                    accum(grads, *bias, g.mean_rows().scale(rows as f64));
                }
                if rg(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            dxhat[c] = g.get(r, c) * vg.data()[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat.get(r, c);
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let inv = inv_std[r];
                        let drow = dx.row_mut(r);
                        for c in 0..cols {
                            drow[c] = inv * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        }
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                if rg(*x) {
                    accum(grads, *x, g.zip_map(val(*x), |gv, xv| gv * gelu_grad(xv)));
                }
            }
            Op::Relu(x) => {
                if rg(*x) {
                    accum(grads, *x, g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
            }
            Op::Softmax(x) => {
                if rg(*x) {
                    let y = &nodes[id].value;
                    let mut dx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (d, (yv, gv)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *d = yv * (gv - dot);
                        }
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::SegmentMean { x, seg } => {
                if rg(*x) {
                    let vx = val(*x);
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    let inv = 1.0 / *seg as f64;
                    for r in 0..vx.rows() {
                        for (d, gv) in dx.row_mut(r).iter_mut().zip(g.row(r / seg)) {
                            *d = gv * inv;
                        }
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = val(*a).cols();
                if rg(*a) {
                    let mut da = Matrix::zeros(g.rows(), ca);
                    for r in 0..g.rows() {
                        da.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    }
                    accum(grads, *a, da);
                }
                if rg(*b) {
                    let cb = val(*b).cols();
                    let mut db = Matrix::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        db.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    accum(grads, *b, db);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seg,
                heads,
                probs,
            } => {
                let (vq, vk, vv) = (val(*q), val(*k), val(*v));
                let (rows, d) = vq.shape();
                let (seg, heads) = (*seg, *heads);
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(rows, d);
                let mut dk = Matrix::zeros(rows, d);
                let mut dv = Matrix::zeros(rows, d);
                let mut dp = vec![0.0; seg];
                for s in 0..rows / seg {
                    let base = s * seg;
                    for h in 0..heads {
                        let c0 = h * dh;
                        for i in 0..seg {
                            let p0 = ((s * heads + h) * seg + i) * seg;
                            let p = &probs[p0..p0 + seg];
                            let go = &g.row(base + i)[c0..c0 + dh];
                            // dP_ij = <dO_i, V_j>, dV_j += P_ij dO_i
                            for j in 0..seg {
                                let vj = &vv.row(base + j)[c0..c0 + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                let dvj = &mut dv.row_mut(base + j)[c0..c0 + dh];
                                for (dvv, gv) in dvj.iter_mut().zip(go) {
                                    *dvv += p[j] * gv;
                                }
                            }
                            let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            for j in 0..seg {
                                let ds = p[j] * (dp[j] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kj = &vk.row(base + j)[c0..c0 + dh];
                                let dqi = &mut dq.row_mut(base + i)[c0..c0 + dh];
                                for (a, b) in dqi.iter_mut().zip(kj) {
                                    *a += ds * b;
                                }
                                let qi = &vq.row(base + i)[c0..c0 + dh];
                                let dkj = &mut dk.row_mut(base + j)[c0..c0 + dh];
                                for (a, b) in dkj.iter_mut().zip(qi) {
                                    *a += ds * b;
                                }
                            }
                        }
                    }
                }
                if rg(*q) {
                    accum(grads, *q, dq);
                }
                if rg(*k) {
                    accum(grads, *k, dk);
                }
                if rg(*v) {
                    accum(grads, *v, dv);
                }
            }
            Op::SegmentLeftMul { m, x, seg } => {
                let (vm, vx) = (val(*m), val(*x));
                let seg = *seg;
                let nseg = vx.rows() / seg;
                if rg(*m) {
                    // dM = sum_b dY_b X_b^T
                    let mut dm = Matrix::zeros(seg, seg);
                    for s in 0..nseg {
                        for i in 0..seg {
                            let gi = g.row(s * seg + i);
                            for j in 0..seg {
                                let xj = vx.row(s * seg + j);
                                let v: f64 = gi.iter().zip(xj).map(|(a, b)| a * b).sum();
                                dm.data_mut()[i * seg + j] += v;
                            }
                        }
                    }
                    accum(grads, *m, dm);
                }
                if rg(*x) {
                    // dX_b = M^T dY_b
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    for s in 0..nseg {
                        for i in 0..seg {
                            for j in 0..seg {
                                let mij = vm.get(i, j);
                                if mij == 0.0 {
                                    continue;
                                }
                                let gi = g.row(s * seg + i);
                                for (d, gv) in dx.row_mut(s * seg + j).iter_mut().zip(gi) {
                                    *d += mij * gv;
                                }
                            }
                        }
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::Merge { outputs, w, seg } => {
                let vw = val(*w);
                let seg = *seg;
                let nseg = g.rows() / seg;
                let mut dw = if rg(*w) {
                    Some(Matrix::zeros(vw.rows(), vw.cols()))
                } else {
                    None
                };
                for (i, &o) in outputs.iter().enumerate() {
                    if let Some(dw) = dw.as_mut() {
                        let vo = val(o);
                        for s in 0..nseg {
                            let range = s * seg * g.cols()..(s + 1) * seg * g.cols();
                            let dot: f64 = g.data()[range.clone()]
                                .iter()
                                .zip(&vo.data()[range])
                                .map(|(a, b)| a * b)
                                .sum();
                            dw.data_mut()[s * vw.cols() + i] += dot;
                        }
                    }
                    if rg(o) {
                        let mut d = g.clone();
                        for s in 0..nseg {
                            let wi = vw.get(s, i);
                            let cols = g.cols();
                            d.data_mut()[s * seg * cols..(s + 1) * seg * cols]
                                .iter_mut()
                                .for_each(|x| *x *= wi);
                        }
                        accum(grads, o, d);
                    }
                }
                if let Some(dw) = dw {
                    accum(grads, *w, dw);
                }
            }
            Op::SegmentCosine { a, b, seg, norms } => {
                let (va, vb) = (val(*a), val(*b));
                let d = va.cols();
                let width = seg * d;
                let cos = &nodes[id].value;
                let mut da = if rg(*a) { Some(Matrix::zeros(va.rows(), d)) } else { None };
                let mut db = if rg(*b) { Some(Matrix::zeros(vb.rows(), d)) } else { None };
                for (s, &(na, nb, clamped)) in norms.iter().enumerate() {
                    let gs = g.get(s, 0);
                    let c = cos.get(s, 0);
                    let range = s * width..(s + 1) * width;
                    let (xa, xb) = (&va.data()[range.clone()], &vb.data()[range.clone()]);
                    let (inv_ab, ca, cb) = if clamped {
                        (1.0 / COSINE_EPS, 0.0, 0.0)
                    } else {
                        (1.0 / (na * nb), c / (na * na), c / (nb * nb))
                    };
                    if let Some(da) = da.as_mut() {
                        for ((o, x), y) in da.data_mut()[range.clone()].iter_mut().zip(xa).zip(xb) {
                            *o = gs * (y * inv_ab - ca * x);
                        }
                    }
                    if let Some(db) = db.as_mut() {
                        for ((o, x), y) in db.data_mut()[range].iter_mut().zip(xa).zip(xb) {
                            *o = gs * (x * inv_ab - cb * y);
                        }
                    }
                }
                if let Some(da) = da {
                    accum(grads, *a, da);
                }
                if let Some(db) = db {
                    accum(grads, *b, db);
                }
            }
            Op::SumCols(x) => {
                if rg(*x) {
                    let vx = val(*x);
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    for r in 0..vx.rows() {
                        let gv = g.get(r, 0);
                        dx.row_mut(r).iter_mut().for_each(|d| *d = gv);
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::SumAll(x) => {
                if rg(*x) {
                    let vx = val(*x);
                    accum(grads, *x, Matrix::filled(vx.rows(), vx.cols(), g.data()[0]));
                }
            }
            Op::SqNormRows(x) => {
                if rg(*x) {
                    let vx = val(*x);
                    let mut dx = vx.scale(2.0);
                    for r in 0..vx.rows() {
                        let gv = g.get(r, 0);
                        dx.row_mut(r).iter_mut().for_each(|d| *d *= gv);
                    }
                    accum(grads, *x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if rg(*logits) {
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let c = d.cols();
                        d.data_mut()[r * c + y] -= 1.0;
                    }
                    d.data_mut().iter_mut().for_each(|x| *x *= scale);
                    accum(grads, *logits, d);
                }
            }
            Op::GradReverse { x, lambda } => {
                if rg(*x) {
                    accum_ref(grads, *x, g, -lambda);
                }
            }
            Op::GatherRows { x, idx } => {
                if rg(*x) {
                    let vx = val(*x);
                    let mut dx = Matrix::zeros(vx.rows(), vx.cols());
                    for (o, &i) in idx.iter().enumerate() {
                        for (d, gv) in dx.row_mut(i).iter_mut().zip(g.row(o)) {
                            *d += gv;
                        }
                    }
                    accum(grads, *x, dx);
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accum_ref(grads: &mut [Option<Matrix>], v: Var, g: &Matrix, scale: f64) {
    match &mut grads[v.0] {
        Some(existing) => existing.axpy(scale, g),
        slot @ None => *slot = Some(if scale == 1.0 { g.clone() } else { g.scale(scale) }),
    }
}

/// `grad[v] += op(a) * op(b)`, accumulating in place.
fn accum_gemm(grads: &mut [Option<Matrix>], v: Var, a: &Matrix, ta: bool, b: &Matrix, tb: bool) {
    let rows = if ta { a.cols() } else { a.rows() };
    let cols = if tb { b.rows() } else { b.cols() };
    match &mut grads[v.0] {
        Some(existing) => gemm(a, ta, b, tb, existing, 1.0),
        slot @ None => {
            let mut out = Matrix::zeros(rows, cols);
            gemm(a, ta, b, tb, &mut out, 0.0);
            *slot = Some(out);
        }
    }
}
