//! Tape of tensor operations recorded during a forward pass.
//!
//! Every node owns its value. Inputs always precede the node that consumes
//! them, so a single reverse sweep over the node list applies the chain rule.
//! Discrete branch decisions (rectifier signs, argmins, interpolation cells,
//! clamping) are folded into [`Tape::signature`] so finite-difference checks
//! can tell when a perturbation crossed a kink.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape {shape:?} does not match data");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: Vec::new(), data: vec![v] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    /// `[n, k] x [k, m]`
    MatMul(NodeId, NodeId),
    /// Adds a vector along the last axis.
    AddBias(NodeId, NodeId),
    /// Picks columns of a `[n, m]` tensor.
    Columns(NodeId, Vec<usize>),
    /// `x [B, I, T]`, `w [O, I, W]`, `b [O]`, zero "same" padding.
    Conv1d { x: NodeId, w: NodeId, b: NodeId, pad: usize },
    /// Normalizes `[B, F, T]` per feature over batch and time.
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    /// Mean over the last axis.
    MeanLast(NodeId),
    /// `src [K, T, C]` sampled at `pos [B, K, T]` (1-based, clamped).
    InterpGather { src: NodeId, pos: NodeId },
    /// `a [B, K, T, C] + off [B, K, C]`
    AddOffset(NodeId, NodeId),
    /// `rec [B, K, T, C]` against constant `x [B, T, C]` with normalized
    /// weights `w [B, T]`; output `[B, K]`.
    MaskedSqErr { rec: NodeId, x: Vec<f64>, w: Vec<f64> },
    /// Row minimum of `[B, K]`; saved argmins.
    MinRows(NodeId, Vec<usize>),
    /// Picks one column per row of `[B, K]`.
    SelectRows(NodeId, Vec<usize>),
    /// Row-wise log-sum-exp of `[B, K]`.
    LogSumExpRows(NodeId),
    /// Mean channel-vector L2 norm of consecutive differences of `[K, T, C]`.
    TotalVariation(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations; see the module docs.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    signature: u64,
}

/// Gradients of a scalar with respect to every node that needs one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss for `id`; zeros when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> &[f64] {
        self.grads[id.0].as_deref().unwrap_or(&[])
    }

    pub fn take(&mut self, id: NodeId, len: usize) -> Vec<f64> {
        self.grads[id.0].take().unwrap_or_else(|| vec![0.0; len])
    }
}

const FNV_PRIME: u64 = 0x100_0000_01b3;

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), signature: 0xcbf2_9ce4_8422_2325 }
    }

    /// Hash of every discrete branch taken so far.
    pub fn signature(&self) -> u64 {
        self.signature
    }

    fn mix(&mut self, v: u64) {
        self.signature = (self.signature ^ v).wrapping_mul(FNV_PRIME);
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

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = &self.nodes[a.0].value;
        let out = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| f(x)).collect() };
        let ng = self.ng(a);
        self.push(out, op, ng)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape, vb.shape, "elementwise shape mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor { shape: va.shape.clone(), data };
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), math::tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let mut h: u64 = 0;
        for (i, &x) in self.nodes[a.0].value.data.iter().enumerate() {
            if x > 0.0 {
                h = h.wrapping_mul(31).wrapping_add(i as u64 + 1);
            }
        }
        self.mix(h);
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data.iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value.data;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        let v = &self.nodes[a.0].value;
        let out = Tensor::new(shape, v.data.clone());
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.shape.len() == 2 && vb.shape.len() == 2 && va.shape[1] == vb.shape[0], "matmul shapes");
        let (n, k, m) = (va.shape[0], va.shape[1], vb.shape[1]);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = va.data[i * k + p];
                if x != 0.0 {
                    for (o, &y) in row.iter_mut().zip(&vb.data[p * m..(p + 1) * m]) {
                        *o += x * y;
                    }
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![n, m], out), Op::MatMul(a, b), ng)
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        let m = *va.shape.last().expect("add_bias on scalar");
        assert_eq!(vb.data.len(), m, "bias length");
        let mut out = va.clone();
        for row in out.data.chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(&vb.data) {
                *o += b;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(out, Op::AddBias(a, bias), ng)
    }

    pub fn columns(&mut self, a: NodeId, cols: Vec<usize>) -> NodeId {
        let va = &self.nodes[a.0].value;
        assert_eq!(va.shape.len(), 2, "columns expects a matrix");
        let (n, m) = (va.shape[0], va.shape[1]);
        let mut out = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            for &c in &cols {
                out.push(va.data[i * m + c]);
            }
        }
        let ng = self.ng(a);
        let shape = vec![n, cols.len()];
        self.push(Tensor::new(shape, out), Op::Columns(a, cols), ng)
    }

    /// 1D convolution with zero padding that preserves the length; for even
    /// kernel widths the extra pad goes on the right.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (vx, vw, vb) = (&self.nodes[x.0].value, &self.nodes[w.0].value, &self.nodes[b.0].value);
        let (bs, ci, len) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (co, ci2, kw) = (vw.shape[0], vw.shape[1], vw.shape[2]);
        assert_eq!(ci, ci2, "conv1d channel mismatch");
        assert_eq!(vb.data.len(), co, "conv1d bias length");
        let pad = (kw - 1) / 2;
        let mut out = vec![0.0; bs * co * len];
        for bi in 0..bs {
            for o in 0..co {
                let orow = &mut out[(bi * co + o) * len..(bi * co + o + 1) * len];
                orow.iter_mut().for_each(|v| *v = vb.data[o]);
                for i in 0..ci {
                    let xrow = &vx.data[(bi * ci + i) * len..(bi * ci + i + 1) * len];
                    for j in 0..kw {
                        let wv = vw.data[(o * ci + i) * kw + j];
                        // out[t] += w * x[t + j - pad]
                        let Some((t0, t1)) = valid_range(len, j, pad) else { continue };
                        let shift = j as isize - pad as isize;
                        let xs = &xrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                        for (ov, xv) in orow[t0..t1].iter_mut().zip(xs) {
                            *ov += wv * xv;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(Tensor::new(vec![bs, co, len], out), Op::Conv1d { x, w, b, pad }, ng)
    }

    /// Batch normalization in training mode. Returns the output node and
    /// the per-feature batch mean and (biased) variance.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> (NodeId, Vec<f64>, Vec<f64>) {
        let vx = &self.nodes[x.0].value;
        let (bs, f, len) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let n = (bs * len) as f64;
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for bi in 0..bs {
            for c in 0..f {
                let row = &vx.data[(bi * f + c) * len..(bi * f + c + 1) * len];
                mean[c] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for bi in 0..bs {
            for c in 0..f {
                let row = &vx.data[(bi * f + c) * len..(bi * f + c + 1) * len];
                var[c] += row.iter().map(|v| (v - mean[c]) * (v - mean[c])).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let (g, be) = (&self.nodes[gamma.0].value.data, &self.nodes[beta.0].value.data);
        let mut xhat = vec![0.0; vx.data.len()];
        let mut out = vec![0.0; vx.data.len()];
        for bi in 0..bs {
            for c in 0..f {
                let base = (bi * f + c) * len;
                for t in 0..len {
                    let h = (vx.data[base + t] - mean[c]) * inv_std[c];
                    xhat[base + t] = h;
                    out[base + t] = g[c] * h + be[c];
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let shape = vx.shape.clone();
        let id = self.push(Tensor::new(shape, out), Op::BatchNorm { x, gamma, beta, xhat, inv_std }, ng);
        (id, mean, var)
    }

    pub fn mean_last(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let len = *va.shape.last().unwrap();
        let data = va.data.chunks(len).map(|r| r.iter().sum::<f64>() / len as f64).collect();
        let shape = va.shape[..va.shape.len() - 1].to_vec();
        let ng = self.ng(a);
        self.push(Tensor::new(shape, data), Op::MeanLast(a), ng)
    }

    /// Linear interpolation of `src [K, T, C]` at 1-based positions
    /// `pos [B, K, T]`, clamped to `[1, T]`. Output `[B, K, T, C]`.
    pub fn interp_gather(&mut self, src: NodeId, pos: NodeId) -> NodeId {
        let (vs, vp) = (&self.nodes[src.0].value, &self.nodes[pos.0].value);
        let (k, len, ch) = (vs.shape[0], vs.shape[1], vs.shape[2]);
        let bs = vp.shape[0];
        assert_eq!(&vp.shape[1..], &[k, len], "interp_gather positions shape");
        let mut out = vec![0.0; bs * k * len * ch];
        let mut h: u64 = 0;
        for bi in 0..bs {
            for ki in 0..k {
                let proto = &vs.data[ki * len * ch..(ki + 1) * len * ch];
                for t in 0..len {
                    let p = vp.data[(bi * k + ki) * len + t];
                    let base = ((bi * k + ki) * len + t) * ch;
                    crate::transform::sample_row(proto, len, ch, p, &mut out[base..base + ch]);
                    let cell = if p < 1.0 {
                        0
                    } else if p > len as f64 {
                        u64::MAX
                    } else {
                        math::floor(p) as u64 + 1
                    };
                    h = h.wrapping_mul(1_000_003).wrapping_add(cell);
                }
            }
        }
        self.mix(h);
        let ng = self.ng(src) || self.ng(pos);
        self.push(Tensor::new(vec![bs, k, len, ch], out), Op::InterpGather { src, pos }, ng)
    }

    pub fn add_offset(&mut self, a: NodeId, off: NodeId) -> NodeId {
        let (va, vo) = (&self.nodes[a.0].value, &self.nodes[off.0].value);
        let (bs, k, len, ch) = (va.shape[0], va.shape[1], va.shape[2], va.shape[3]);
        assert_eq!(vo.shape, vec![bs, k, ch], "offset shape");
        let mut out = va.data.clone();
        for bk in 0..bs * k {
            let o = &vo.data[bk * ch..(bk + 1) * ch];
            for t in 0..len {
                let base = (bk * len + t) * ch;
                for c in 0..ch {
                    out[base + c] += o[c];
                }
            }
        }
        let ng = self.ng(a) || self.ng(off);
        let shape = va.shape.clone();
        self.push(Tensor::new(shape, out), Op::AddOffset(a, off), ng)
    }

    /// Per-(sample, prototype) masked mean squared error. `w` holds weights
    /// already normalized to sum to one per sample.
    pub fn masked_sq_err(&mut self, rec: NodeId, x: &[f64], w: &[f64]) -> NodeId {
        let vr = &self.nodes[rec.0].value;
        let (bs, k, len, ch) = (vr.shape[0], vr.shape[1], vr.shape[2], vr.shape[3]);
        assert_eq!(x.len(), bs * len * ch, "masked_sq_err input length");
        assert_eq!(w.len(), bs * len, "masked_sq_err weight length");
        let mut out = vec![0.0; bs * k];
        for bi in 0..bs {
            let xb = &x[bi * len * ch..(bi + 1) * len * ch];
            let wb = &w[bi * len..(bi + 1) * len];
            for ki in 0..k {
                let r = &vr.data[(bi * k + ki) * len * ch..(bi * k + ki + 1) * len * ch];
                out[bi * k + ki] = crate::losses::weighted_sq_err(xb, r, wb, ch);
            }
        }
        let ng = self.ng(rec);
        self.push(Tensor::new(vec![bs, k], out), Op::MaskedSqErr { rec, x: x.to_vec(), w: w.to_vec() }, ng)
    }

    pub fn min_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (bs, k) = (va.shape[0], va.shape[1]);
        let idx: Vec<usize> = (0..bs).map(|b| math::argmin(&va.data[b * k..(b + 1) * k])).collect();
        let data = idx.iter().enumerate().map(|(b, &i)| va.data[b * k + i]).collect();
        let h = idx.iter().fold(0u64, |h, &i| h.wrapping_mul(131).wrapping_add(i as u64));
        self.mix(h);
        let ng = self.ng(a);
        self.push(Tensor::new(vec![bs], data), Op::MinRows(a, idx), ng)
    }

    pub fn select_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let va = &self.nodes[a.0].value;
        let (bs, k) = (va.shape[0], va.shape[1]);
        assert_eq!(idx.len(), bs, "select_rows index count");
        let data = idx.iter().enumerate().map(|(b, &i)| va.data[b * k + i]).collect();
        let ng = self.ng(a);
        self.push(Tensor::new(vec![bs], data), Op::SelectRows(a, idx.to_vec()), ng)
    }

    pub fn log_sum_exp_rows(&mut self, a: NodeId) -> NodeId {
        let va = &self.nodes[a.0].value;
        let k = va.shape[1];
        let data = va.data.chunks(k).map(math::log_sum_exp).collect();
        let ng = self.ng(a);
        self.push(Tensor::new(vec![va.shape[0]], data), Op::LogSumExpRows(a), ng)
    }

    pub fn total_variation(&mut self, p: NodeId) -> NodeId {
        let vp = &self.nodes[p.0].value;
        let v = crate::losses::total_variation_raw(&vp.data, vp.shape[0], vp.shape[1], vp.shape[2]);
        let ng = self.ng(p);
        self.push(Tensor::scalar(v), Op::TotalVariation(p), ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].needs_grad {
                continue;
            }
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], id: NodeId) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        let len = self.nodes[id.0].value.data.len();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |n: NodeId| &self.nodes[n.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for n in [*a, *b] {
                    if let Some(ga) = self.acc(grads, n) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data.clone(), val(*b).data.clone());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Square(a) => {
                let va = &val(*a).data;
                let d: Vec<f64> = va.iter().zip(g).map(|(x, y)| 2.0 * x * y).collect();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = val(*a).data.len() as f64;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Tanh(a) => {
                let out = &node.value.data;
                let d: Vec<f64> = out.iter().zip(g).map(|(y, gy)| gy * (1.0 - y * y)).collect();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
            }
            Op::Relu(a) => {
                let va = &val(*a).data;
                let d: Vec<f64> = va.iter().zip(g).map(|(&x, &gy)| if x > 0.0 { gy } else { 0.0 }).collect();
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (n, k, m) = (va.shape[0], va.shape[1], vb.shape[1]);
                if self.nodes[a.0].needs_grad {
                    // dA = G B^T
                    let mut d = vec![0.0; n * k];
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            d[i * k + p] = gr.iter().zip(&vb.data[p * m..(p + 1) * m]).map(|(x, y)| x * y).sum();
                        }
                    }
                    let ga = self.acc(grads, *a).unwrap();
                    ga.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = A^T G
                    let mut d = vec![0.0; k * m];
                    for i in 0..n {
                        let gr = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = va.data[i * k + p];
                            if x != 0.0 {
                                for (o, y) in d[p * m..(p + 1) * m].iter_mut().zip(gr) {
                                    *o += x * y;
                                }
                            }
                        }
                    }
                    let gb = self.acc(grads, *b).unwrap();
                    gb.iter_mut().zip(&d).for_each(|(x, y)| *x += y);
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let m = val(*bias).data.len();
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Columns(a, cols) => {
                let m = val(*a).shape[1];
                let nc = cols.len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, row) in g.chunks(nc).enumerate() {
                        for (j, &c) in cols.iter().enumerate() {
                            ga[i * m + c] += row[j];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, pad } => self.conv1d_backward(*x, *w, *b, *pad, g, grads),
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let vx = val(*x);
                let (bs, f, len) = (vx.shape[0], vx.shape[1], vx.shape[2]);
                let n = (bs * len) as f64;
                let mut sum_g = vec![0.0; f];
                let mut sum_gx = vec![0.0; f];
                for bi in 0..bs {
                    for c in 0..f {
                        let base = (bi * f + c) * len;
                        for t in 0..len {
                            sum_g[c] += g[base + t];
                            sum_gx[c] += g[base + t] * xhat[base + t];
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let gam = &val(*gamma).data;
                    let mut d = vec![0.0; vx.data.len()];
                    for bi in 0..bs {
                        for c in 0..f {
                            let base = (bi * f + c) * len;
                            let k = gam[c] * inv_std[c] / n;
                            for t in 0..len {
                                d[base + t] = k * (n * g[base + t] - sum_g[c] - xhat[base + t] * sum_gx[c]);
                            }
                        }
                    }
                    let gx = self.acc(grads, *x).unwrap();
                    gx.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    gg.iter_mut().zip(&sum_gx).for_each(|(a, b)| *a += b);
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    gb.iter_mut().zip(&sum_g).for_each(|(a, b)| *a += b);
                }
            }
            Op::MeanLast(a) => {
                let len = *val(*a).shape.last().unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for (row, &gy) in ga.chunks_mut(len).zip(g) {
                        row.iter_mut().for_each(|x| *x += gy / len as f64);
                    }
                }
            }
            Op::InterpGather { src, pos } => {
                let (vs, vp) = (val(*src), val(*pos));
                let (k, len, ch) = (vs.shape[0], vs.shape[1], vs.shape[2]);
                let bs = vp.shape[0];
                let mut dsrc = if self.nodes[src.0].needs_grad { vec![0.0; vs.data.len()] } else { Vec::new() };
                let mut dpos = if self.nodes[pos.0].needs_grad { vec![0.0; vp.data.len()] } else { Vec::new() };
                for bi in 0..bs {
                    for ki in 0..k {
                        let proto = &vs.data[ki * len * ch..(ki + 1) * len * ch];
                        for t in 0..len {
                            let pi = (bi * k + ki) * len + t;
                            let p = vp.data[pi];
                            let gr = &g[pi * ch..(pi + 1) * ch];
                            let s = p.clamp(1.0, len as f64) - 1.0;
                            let i = math::floor(s) as usize;
                            let frac = s - i as f64;
                            if !dsrc.is_empty() {
                                let ds = &mut dsrc[ki * len * ch..(ki + 1) * len * ch];
                                if frac == 0.0 || i + 1 >= len {
                                    for c in 0..ch {
                                        ds[i * ch + c] += gr[c];
                                    }
                                } else {
                                    for c in 0..ch {
                                        ds[i * ch + c] += (1.0 - frac) * gr[c];
                                        ds[(i + 1) * ch + c] += frac * gr[c];
                                    }
                                }
                            }
                            // right-sided slope; zero outside the clamp range and at T
                            if !dpos.is_empty() && (1.0..=len as f64).contains(&p) && i + 1 < len {
                                let mut d = 0.0;
                                for c in 0..ch {
                                    d += gr[c] * (proto[(i + 1) * ch + c] - proto[i * ch + c]);
                                }
                                dpos[pi] += d;
                            }
                        }
                    }
                }
                if let Some(gs) = self.acc(grads, *src) {
                    gs.iter_mut().zip(&dsrc).for_each(|(a, b)| *a += b);
                }
                if let Some(gp) = self.acc(grads, *pos) {
                    gp.iter_mut().zip(&dpos).for_each(|(a, b)| *a += b);
                }
            }
            Op::AddOffset(a, off) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let sh = &val(*a).shape;
                let (bk, len, ch) = (sh[0] * sh[1], sh[2], sh[3]);
                if let Some(go) = self.acc(grads, *off) {
                    for j in 0..bk {
                        for t in 0..len {
                            let base = (j * len + t) * ch;
                            for c in 0..ch {
                                go[j * ch + c] += g[base + c];
                            }
                        }
                    }
                }
            }
            Op::MaskedSqErr { rec, x, w } => {
                let vr = val(*rec);
                let (bs, k, len, ch) = (vr.shape[0], vr.shape[1], vr.shape[2], vr.shape[3]);
                if let Some(gr) = self.acc(grads, *rec) {
                    for bi in 0..bs {
                        for ki in 0..k {
                            let gy = g[bi * k + ki];
                            if gy == 0.0 {
                                continue;
                            }
                            let base = (bi * k + ki) * len * ch;
                            for t in 0..len {
                                let wt = w[bi * len + t];
                                if wt == 0.0 {
                                    continue;
                                }
                                let f = gy * 2.0 * wt / ch as f64;
                                for c in 0..ch {
                                    let r = vr.data[base + t * ch + c];
                                    gr[base + t * ch + c] += f * (r - x[(bi * len + t) * ch + c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::MinRows(a, idx) => {
                let k = val(*a).shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (b, &i) in idx.iter().enumerate() {
                        ga[b * k + i] += g[b];
                    }
                }
            }
            Op::SelectRows(a, idx) => {
                let k = val(*a).shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (b, &i) in idx.iter().enumerate() {
                        ga[b * k + i] += g[b];
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let va = val(*a);
                let k = va.shape[1];
                let out = &node.value.data;
                if let Some(ga) = self.acc(grads, *a) {
                    for (b, row) in va.data.chunks(k).enumerate() {
                        for (j, &x) in row.iter().enumerate() {
                            ga[b * k + j] += g[b] * math::exp(x - out[b]);
                        }
                    }
                }
            }
            Op::TotalVariation(p) => {
                let vp = val(*p);
                let (k, len, ch) = (vp.shape[0], vp.shape[1], vp.shape[2]);
                let norm = (k * (len - 1) * ch) as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for ki in 0..k {
                        let pk = &vp.data[ki * len * ch..(ki + 1) * len * ch];
                        for t in 0..len - 1 {
                            let mut sq = 0.0;
                            for c in 0..ch {
                                let d = pk[(t + 1) * ch + c] - pk[t * ch + c];
                                sq += d * d;
                            }
                            let nrm = math::sqrt(sq);
                            // subgradient 0 at a zero difference
                            if nrm == 0.0 {
                                continue;
                            }
                            for c in 0..ch {
                                let d = (pk[(t + 1) * ch + c] - pk[t * ch + c]) / nrm * g[0] / norm;
                                gp[ki * len * ch + (t + 1) * ch + c] += d;
                                gp[ki * len * ch + t * ch + c] -= d;
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv1d_backward(&self, x: NodeId, w: NodeId, b: NodeId, pad: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (bs, ci, len) = (vx.shape[0], vx.shape[1], vx.shape[2]);
        let (co, kw) = (vw.shape[0], vw.shape[2]);
        if self.nodes[b.0].needs_grad {
            let mut d = vec![0.0; co];
            for bi in 0..bs {
                for (o, dv) in d.iter_mut().enumerate() {
                    *dv += g[(bi * co + o) * len..(bi * co + o + 1) * len].iter().sum::<f64>();
                }
            }
            let gb = self.acc(grads, b).unwrap();
            gb.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        if self.nodes[w.0].needs_grad {
            let mut d = vec![0.0; vw.data.len()];
            for bi in 0..bs {
                for o in 0..co {
                    let grow = &g[(bi * co + o) * len..(bi * co + o + 1) * len];
                    for i in 0..ci {
                        let xrow = &vx.data[(bi * ci + i) * len..(bi * ci + i + 1) * len];
                        for j in 0..kw {
                            let Some((t0, t1)) = valid_range(len, j, pad) else { continue };
                            let shift = j as isize - pad as isize;
                            let xs = &xrow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                            d[(o * ci + i) * kw + j] += grow[t0..t1].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            let gw = self.acc(grads, w).unwrap();
            gw.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
        if self.nodes[x.0].needs_grad {
            let mut d = vec![0.0; vx.data.len()];
            for bi in 0..bs {
                for o in 0..co {
                    let grow = &g[(bi * co + o) * len..(bi * co + o + 1) * len];
                    for i in 0..ci {
                        let drow = &mut d[(bi * ci + i) * len..(bi * ci + i + 1) * len];
                        for j in 0..kw {
                            let wv = vw.data[(o * ci + i) * kw + j];
                            let Some((t0, t1)) = valid_range(len, j, pad) else { continue };
                            let shift = j as isize - pad as isize;
                            let ds = &mut drow[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                            for (dv, gv) in ds.iter_mut().zip(&grow[t0..t1]) {
                                *dv += wv * gv;
                            }
                        }
                    }
                }
            }
            let gx = self.acc(grads, x).unwrap();
            gx.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
        }
    }
}

/// Output range `[t0, t1)` for which input index `t + j - pad` is in
/// bounds; `None` when tap `j` never fits (kernel wider than the series).
#[inline]
fn valid_range(len: usize, j: usize, pad: usize) -> Option<(usize, usize)> {
    let t0 = pad.saturating_sub(j);
    let t1 = (len + pad).saturating_sub(j).min(len);
    (t0 < t1).then_some((t0, t1))
}

impl core::fmt::Debug for Tape {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}
