//! A small reverse-mode automatic differentiation tape.
//!
//! Every forward pass records its operations on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar node propagates gradients to all nodes that
//! require them. Only the operations the models in this crate need are
//! provided, several of them fused (layer norm, multi-head attention,
//! softmax cross-entropy) to keep the tape short.

use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seg_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        weights: Vec<f64>,
        probs: Tensor,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    ShiftRows {
        x: Var,
        offset: isize,
        seg_len: usize,
    },
    Sum(Var),
    MeanRows(Var),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph and differentiates it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

/// Exact GELU, `x · Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise layer normalization without the tape; returns `(xhat, inv_std)`.
pub fn layer_norm_rows(x: &Tensor) -> (Tensor, Vec<f64>) {
    let (r, c) = x.shape();
    let mut xhat = Tensor::zeros(r, c);
    let mut inv = Vec::with_capacity(r);
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        inv.push(is);
    }
    (xhat, inv)
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient (data, frozen weights, `sg(·)`).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `x` with gradient flow cut.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`, the natural form for `x · Wᵀ` with `W` stored `[out × in]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds the `1 × c` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(bv.rows(), 1, "add_row expects a row vector");
        assert_eq!(bv.cols(), self.value(x).cols(), "add_row width mismatch");
        let mut v = self.value(x).clone();
        let c = v.cols();
        let brow = self.value(b).data().to_vec();
        for chunk in v.data_mut().chunks_mut(c) {
            for (o, bb) in chunk.iter_mut().zip(&brow) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(v, Op::AddRow(x, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).map(|a| a * s);
        let rg = self.rg(x);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(v, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(v, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        let rg = self.rg(x);
        self.push(v, Op::Tanh(x), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::abs);
        let rg = self.rg(x);
        self.push(v, Op::Abs(x), rg)
    }

    /// Row-wise layer normalization with affine `gain`, `bias` (`1 × c`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (xhat, inv_std) = layer_norm_rows(self.value(x));
        let g = self.value(gain).data().to_vec();
        let b = self.value(bias).data().to_vec();
        let mut out = xhat.clone();
        let c = out.cols();
        for chunk in out.data_mut().chunks_mut(c) {
            for j in 0..c {
                chunk[j] = chunk[j] * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Bidirectional multi-head scaled dot-product attention.
    ///
    /// `q`, `k`, `v` hold `B` consecutive segments of `seg_len` rows each.
    /// Attention never crosses a segment boundary, and keys whose
    /// `key_valid` flag is false receive zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seg_len: usize, heads: usize, key_valid: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.shape();
        assert_eq!(kv.shape(), (rows, d));
        assert_eq!(vv.shape(), (rows, d));
        assert_eq!(rows % seg_len, 0, "rows not a multiple of segment length");
        assert_eq!(d % heads, 0, "model width not divisible by heads");
        assert_eq!(key_valid.len(), rows);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let segs = rows / seg_len;
        let t = seg_len;
        let mut probs = vec![0.0; segs * heads * t * t];
        let mut out = Tensor::zeros(rows, d);
        let mut scores = vec![0.0; t];
        for s in 0..segs {
            let base = s * t;
            for h in 0..heads {
                let off = h * dh;
                for i in 0..t {
                    let qi = &qv.row(base + i)[off..off + dh];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..t {
                        if key_valid[base + j] {
                            let kj = &kv.row(base + j)[off..off + dh];
                            let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                            scores[j] = dot * scale;
                            m = m.max(scores[j]);
                        }
                    }
                    let p = &mut probs[((s * heads + h) * t + i) * t..][..t];
                    let mut z = 0.0;
                    for j in 0..t {
                        if key_valid[base + j] {
                            p[j] = (scores[j] - m).exp();
                            z += p[j];
                        } else {
                            p[j] = 0.0;
                        }
                    }
                    for pj in p.iter_mut() {
                        *pj /= z;
                    }
                    let orow = &mut out.row_mut(base + i)[off..off + dh];
                    for j in 0..t {
                        if p[j] != 0.0 {
                            let vj = &vv.row(base + j)[off..off + dh];
                            for (o, vvv) in orow.iter_mut().zip(vj) {
                                *o += p[j] * vvv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                seg_len,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Weighted softmax cross-entropy, `Σ_r w_r · −log softmax(logits_r)[t_r]`
    /// over rows with a target. Returns a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let (r, c) = lv.shape();
        assert_eq!(targets.len(), r);
        assert_eq!(weights.len(), r);
        let mut probs = Tensor::zeros(r, c);
        let mut loss = 0.0;
        for i in 0..r {
            let Some(t) = targets[i] else { continue };
            assert!(t < c, "target {t} outside {c} classes");
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            for (p, x) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
            loss += weights[i] * (lse - row[t]);
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Embedding lookup: row `i` of the result is row `idx[i]` of `table`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let tv = self.value(table);
        let c = tv.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(table);
        self.push(
            Tensor::from_vec(idx.len(), c, data),
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows width mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_vec(rows, c, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(r, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), r, "concat_cols height mismatch");
            let pc = pv.cols();
            for i in 0..r {
                out.row_mut(i)[off..off + pc].copy_from_slice(pv.row(i));
            }
            off += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        let rg = self.rg(x);
        self.push(v, Op::SliceRows { x, start }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        let rg = self.rg(x);
        self.push(v, Op::SliceCols { x, start }, rg)
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(x).clone().reshape(rows, cols);
        let rg = self.rg(x);
        self.push(v, Op::Reshape(x), rg)
    }

    /// `out[i] = x[i + offset]` within each segment of `seg_len` rows, zero
    /// where the source row falls outside the segment.
    pub fn shift_rows(&mut self, x: Var, offset: isize, seg_len: usize) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        assert_eq!(r % seg_len, 0);
        let mut out = Tensor::zeros(r, c);
        for s in 0..r / seg_len {
            for i in 0..seg_len {
                let src = i as isize + offset;
                if src >= 0 && (src as usize) < seg_len {
                    out.row_mut(s * seg_len + i)
                        .copy_from_slice(xv.row(s * seg_len + src as usize));
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::ShiftRows { x, offset, seg_len }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(v, Op::Sum(x), rg)
    }

    /// Column means, `1 × c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let mut out = vec![0.0; c];
        for row in xv.iter_rows() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(x);
        self.push(Tensor::row_vector(out), Op::MeanRows(x), rg)
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let n = xv.row(i).iter().map(|a| a * a).sum::<f64>().sqrt();
            for o in out.row_mut(i) {
                *o /= n;
            }
            norms.push(n);
        }
        let rg = self.rg(x);
        self.push(out, Op::NormalizeRows { x, norms }, rg)
    }

    /// `‖x‖²` summed over every element.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let sq = self.mul(x, x);
        self.sum(sq)
    }

    /// `x · Wᵀ + b` for a weight stored `[out × in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul_nt(x, w);
        match b {
            Some(b) => self.add_row(y, b),
            None => y,
        }
    }

    fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// Back-propagates from the scalar node `loss`.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward target must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    Self::accumulate(grads, *a, gemm(g, false, val(*b), true));
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, gemm(val(*a), true, g, false));
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b, db = gᵀ a
                if rg(*a) {
                    Self::accumulate(grads, *a, gemm(g, false, val(*b), false));
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, gemm(g, true, val(*a), false));
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    Self::accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    Self::accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if rg(*b) {
                    Self::accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(x, b) => {
                if rg(*x) {
                    Self::accumulate(grads, *x, g.clone());
                }
                if rg(*b) {
                    let mut gb = vec![0.0; g.cols()];
                    for row in g.iter_rows() {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Self::accumulate(grads, *b, Tensor::row_vector(gb));
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                Self::accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Gelu(x) => {
                Self::accumulate(grads, *x, g.zip_map(val(*x), |gv, xv| gv * gelu_grad(xv)));
            }
            Op::Sigmoid(x) => {
                Self::accumulate(grads, *x, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y)));
            }
            Op::Tanh(x) => {
                Self::accumulate(grads, *x, g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y)));
            }
            Op::Abs(x) => {
                Self::accumulate(
                    grads,
                    *x,
                    g.zip_map(val(*x), |gv, xv| {
                        if xv > 0.0 {
                            gv
                        } else if xv < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    }),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = g.shape();
                let gv = val(*gain).data();
                if rg(*gain) {
                    let mut gg = vec![0.0; c];
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += g.get(i, j) * xhat.get(i, j);
                        }
                    }
                    Self::accumulate(grads, *gain, Tensor::row_vector(gg));
                }
                if rg(*bias) {
                    let mut gb = vec![0.0; c];
                    for row in g.iter_rows() {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Self::accumulate(grads, *bias, Tensor::row_vector(gb));
                }
                if rg(*x) {
                    let mut gx = Tensor::zeros(r, c);
                    let n = c as f64;
                    for i in 0..r {
                        let xh = xhat.row(i);
                        let dxhat: Vec<f64> = g.row(i).iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    Self::accumulate(grads, *x, gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seg_len,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (rows, d) = qv.shape();
                let t = *seg_len;
                let heads = *heads;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut gq = Tensor::zeros(rows, d);
                let mut gk = Tensor::zeros(rows, d);
                let mut gvv = Tensor::zeros(rows, d);
                let mut dp = vec![0.0; t];
                for s in 0..rows / t {
                    let base = s * t;
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..t {
                            let p = &probs[((s * heads + h) * t + i) * t..][..t];
                            let go = &g.row(base + i)[off..off + dh];
                            // dV_j += p_ij dO_i ; dP_ij = dO_i · V_j
                            let mut dot_pdp = 0.0;
                            for j in 0..t {
                                if p[j] == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vj = &vv.row(base + j)[off..off + dh];
                                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot_pdp += p[j] * dp[j];
                                let gvj = &mut gvv.row_mut(base + j)[off..off + dh];
                                for (o, gg) in gvj.iter_mut().zip(go) {
                                    *o += p[j] * gg;
                                }
                            }
                            for j in 0..t {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                let ds = p[j] * (dp[j] - dot_pdp) * scale;
                                let kj = kv.row(base + j)[off..off + dh].to_vec();
                                let qi = qv.row(base + i)[off..off + dh].to_vec();
                                for (o, kk) in gq.row_mut(base + i)[off..off + dh].iter_mut().zip(&kj) {
                                    *o += ds * kk;
                                }
                                for (o, qq) in gk.row_mut(base + j)[off..off + dh].iter_mut().zip(&qi) {
                                    *o += ds * qq;
                                }
                            }
                        }
                    }
                }
                if rg(*q) {
                    Self::accumulate(grads, *q, gq);
                }
                if rg(*k) {
                    Self::accumulate(grads, *k, gk);
                }
                if rg(*v) {
                    Self::accumulate(grads, *v, gvv);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let s = g.item();
                let mut gl = Tensor::zeros(probs.rows(), probs.cols());
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let w = weights[i] * s;
                    for (o, p) in gl.row_mut(i).iter_mut().zip(probs.row(i)) {
                        *o = w * p;
                    }
                    gl.row_mut(i)[t] -= w;
                }
                Self::accumulate(grads, *logits, gl);
            }
            Op::Gather { table, idx } => {
                let tv = val(*table);
                let mut gt = Tensor::zeros(tv.rows(), tv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                Self::accumulate(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).rows();
                    if rg(p) {
                        Self::accumulate(grads, p, g.slice_rows(start, n));
                    }
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = val(p).cols();
                    if rg(p) {
                        Self::accumulate(grads, p, g.slice_cols(start, n));
                    }
                    start += n;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let c = xv.cols();
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                Self::accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = val(*x);
                let mut gx = Tensor::zeros(xv.rows(), xv.cols());
                let n = g.cols();
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..start + n].copy_from_slice(g.row(i));
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => {
                let (r, c) = val(*x).shape();
                Self::accumulate(grads, *x, g.clone().reshape(r, c));
            }
            Op::ShiftRows { x, offset, seg_len } => {
                let (r, c) = g.shape();
                let mut gx = Tensor::zeros(r, c);
                for s in 0..r / seg_len {
                    for i in 0..*seg_len {
                        let src = i as isize + offset;
                        if src >= 0 && (src as usize) < *seg_len {
                            let dst = s * seg_len + src as usize;
                            let gi = g.row(s * seg_len + i).to_vec();
                            for (o, v) in gx.row_mut(dst).iter_mut().zip(&gi) {
                                *o += v;
                            }
                        }
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let (r, c) = val(*x).shape();
                Self::accumulate(grads, *x, Tensor::filled(r, c, g.item()));
            }
            Op::MeanRows(x) => {
                let (r, c) = val(*x).shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.data()) {
                        *o = v / r as f64;
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let (r, c) = y.shape();
                let mut gx = Tensor::zeros(r, c);
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (j, o) in gx.row_mut(i).iter_mut().enumerate() {
                        *o = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                Self::accumulate(grads, *x, gx);
            }
        }
    }
}

/// Central finite-difference gradient of `f` at `x`, step `h`.
pub fn finite_difference(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut g = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        g.data_mut()[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, the relative error used by gradient checks.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).sum_squares().sqrt();
    let scale = a.sum_squares().sqrt().max(b.sum_squares().sqrt()).max(floor);
    diff / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(w ⊙ build(x)))/dx against finite differences.
    fn check(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let y = build(&mut tape, xv);
        let (r, c) = tape.value(y).shape();
        let w = rand_tensor(&mut rng, r, c);
        let wv = tape.constant(w.clone());
        let prod = tape.mul(y, wv);
        let loss = tape.sum(prod);
        tape.backward(loss);
        let analytic = tape.grad(xv).unwrap().clone();
        let f = |p: &Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(p.clone());
            let y = build(&mut t, xv);
            let wv = t.constant(w.clone());
            let prod = t.mul(y, wv);
            let l = t.sum(prod);
            t.value(l).item()
        };
        let numeric = finite_difference(f, &x, 1e-5);
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-6, "relative error {err}: {analytic:?} vs {numeric:?}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 3, 4);
        check(|t, x| t.gelu(x), x.clone());
        check(|t, x| t.sigmoid(x), x.clone());
        check(|t, x| t.tanh(x), x.clone());
        check(|t, x| t.abs(x), x.clone());
        check(|t, x| t.normalize_rows(x), x.clone());
        check(|t, x| t.mean_rows(x), x.clone());
        check(|t, x| t.shift_rows(x, 1, 3), x.clone());
        check(|t, x| t.shift_rows(x, -1, 3), x.clone());
        check(|t, x| t.mul(x, x), x.clone());
        check(
            |t, x| {
                let a = t.slice_cols(x, 0, 2);
                let b = t.slice_rows(x, 1, 2);
                let b = t.reshape(b, 4, 2);
                let a2 = t.concat_rows(&[a, b]);
                t.concat_cols(&[a2, a2])
            },
            x,
        );
    }

    #[test]
    fn layer_norm_and_matmul_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 3, 5);
        let g = rand_tensor(&mut rng, 1, 5);
        let b = rand_tensor(&mut rng, 1, 5);
        let w = rand_tensor(&mut rng, 4, 5);
        check(
            |t, x| {
                let g = t.constant(g.clone());
                let b = t.constant(b.clone());
                t.layer_norm(x, g, b)
            },
            x.clone(),
        );
        let xc = x.clone();
        check(
            |t, g| {
                let x = t.constant(xc.clone());
                let b = t.constant(b.clone());
                t.layer_norm(x, g, b)
            },
            g.clone(),
        );
        check(
            |t, x| {
                let w = t.constant(w.clone());
                t.linear(x, w, None)
            },
            x.clone(),
        );
        check(
            |t, w| {
                let x = t.constant(x.clone());
                let y = t.matmul_nt(x, w);
                let z = t.matmul(y, w);
                let gg = t.constant(g.clone());
                t.add_row(z, gg)
            },
            w,
        );
    }

    #[test]
    fn attention_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seg = 3;
        let q = rand_tensor(&mut rng, 6, 4);
        let k = rand_tensor(&mut rng, 6, 4);
        let v = rand_tensor(&mut rng, 6, 4);
        let valid = vec![true, true, false, true, true, true];
        let (k1, v1) = (k.clone(), v.clone());
        let va = valid.clone();
        check(
            move |t, q| {
                let k = t.constant(k1.clone());
                let v = t.constant(v1.clone());
                t.attention(q, k, v, seg, 2, &va)
            },
            q.clone(),
        );
        let (q1, v1) = (q.clone(), v.clone());
        let va = valid.clone();
        check(
            move |t, k| {
                let q = t.constant(q1.clone());
                let v = t.constant(v1.clone());
                t.attention(q, k, v, seg, 2, &va)
            },
            k.clone(),
        );
        check(
            move |t, v| {
                let q = t.constant(q.clone());
                let k = t.constant(k.clone());
                t.attention(q, k, v, seg, 2, &valid)
            },
            v,
        );
    }

    #[test]
    fn attention_ignores_masked_keys_and_other_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_tensor(&mut rng, 4, 2);
        let k = rand_tensor(&mut rng, 4, 2);
        let mut v = rand_tensor(&mut rng, 4, 2);
        let valid = [true, false, true, true];
        let run = |v: &Tensor| {
            let mut t = Tape::new();
            let (qv, kv, vv) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
            let o = t.attention(qv, kv, vv, 2, 1, &valid);
            t.value(o).clone()
        };
        let before = run(&v);
        // masked key row 1 and the second segment's values cannot affect row 0
        v.set(1, 0, 100.0);
        let after = run(&v);
        assert_eq!(before.row(0), after.row(0));
        v.set(2, 1, -50.0);
        let after2 = run(&v);
        assert_eq!(before.row(0), after2.row(0));
    }

    #[test]
    fn cross_entropy_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, 4, 5);
        let targets = [Some(1), None, Some(4), Some(0)];
        let weights = [0.5, 1.0, 0.25, 1.0];
        check(move |t, x| t.cross_entropy(x, &targets, &weights), x);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let mut t = Tape::new();
        let table = t.param(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let g = t.gather(table, &[2, 0, 2]);
        assert_eq!(t.value(g).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let s = t.sum(g);
        t.backward(s);
        assert_eq!(t.grad(table).unwrap().data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(Tensor::scalar(2.0));
        let b = t.constant(Tensor::scalar(3.0));
        let sg = t.stop_gradient(a);
        let p = t.mul(a, b);
        let q = t.mul(p, sg);
        t.backward(q);
        assert_eq!(t.grad(a).unwrap().item(), 6.0);
        assert!(t.grad(b).is_none());
        assert!(t.grad(sg).is_none());
    }
}
