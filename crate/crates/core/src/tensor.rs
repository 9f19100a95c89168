//! Minimal reverse-mode differentiation engine.
//!
//! A `Tape` records one dynamic forward graph per optimization step; nodes
//! hold row-major f64 buffers. `backward` walks the recorded ops in reverse,
//! accumulating gradients of a scalar output into every node that requires
//! them. The op set is exactly what the three networks in this crate need;
//! anything operator-specific (e.g. the k-space data term) enters through
//! [`CustomOp`].

use crate::error::{Error, Result};
use crate::kern;
use crate::nn::ParamSet;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Hand-rolled backward for ops the built-in set does not cover. The
/// implementation captures whatever forward state it needs.
pub trait CustomOp {
    fn backward(&self, out_grad: &[f64], input_grads: &mut [&mut [f64]]);
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

enum Op {
    Leaf,
    Relu(NodeId),
    LeakyRelu(NodeId, f64),
    Sigmoid(NodeId),
    Scale(NodeId, f64),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Linear { x: NodeId, w: NodeId, b: NodeId, batch: usize, d_in: usize, d_out: usize },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, spec: Conv2dSpec, h: usize, w_in: usize },
    MaxPool2 { x: NodeId, argmax: Vec<u32> },
    Upsample2 { x: NodeId },
    InstanceNorm { x: NodeId, gamma: NodeId, beta: NodeId, stats: Vec<(f64, f64)> },
    ConcatCh { a: NodeId, b: NodeId, c_a: usize, c_b: usize },
    Pad2 { x: NodeId, top: usize, left: usize, in_h: usize, in_w: usize },
    Crop2 { x: NodeId, top: usize, left: usize, in_h: usize, in_w: usize },
    /// [c, h, w] -> [h·w, c] pixel-major reordering.
    ChwToNc { x: NodeId },
    /// Per-row l2 normalization of [n, w]; zero rows pass through.
    RowNormalize { x: NodeId, norms: Vec<f64> },
    SumSqDiff { a: NodeId, b: NodeId },
    SumAbsDiff { a: NodeId, b: NodeId },
    Custom { inputs: Vec<NodeId>, op: Box<dyn CustomOp> },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<(usize, usize)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { shape, values, grad: Vec::new(), op, requires_grad, param: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    fn rq(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Constant or input leaf.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> NodeId {
        self.push(shape.to_vec(), values, Op::Leaf, requires_grad)
    }

    /// Leaf bound to parameter `pid` of the set registered under `group`;
    /// gradients flow back via [`Tape::write_param_grads`]. Distinct networks
    /// sharing one tape use distinct groups.
    pub fn param_in(&mut self, group: usize, set: &ParamSet, pid: usize) -> NodeId {
        let p = &set.params[pid];
        let id = self.push(p.shape.clone(), p.values.clone(), Op::Leaf, true);
        self.nodes[id.0].param = Some((group, pid));
        id
    }

    /// [`Tape::param_in`] with the default group 0.
    pub fn param(&mut self, set: &ParamSet, pid: usize) -> NodeId {
        self.param_in(0, set, pid)
    }

    /// Frozen parameter: gradient flows through the op but the weight itself
    /// receives none.
    pub fn frozen_param(&mut self, set: &ParamSet, pid: usize) -> NodeId {
        let p = &set.params[pid];
        self.push(p.shape.clone(), p.values.clone(), Op::Leaf, false)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].values.iter().map(|&a| a.max(0.0)).collect();
        let rq = self.rq(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, v, Op::Relu(x), rq)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let v = self.nodes[x.0]
            .values
            .iter()
            .map(|&a| if a >= 0.0 { a } else { slope * a })
            .collect();
        let rq = self.rq(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, v, Op::LeakyRelu(x, slope), rq)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].values.iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect();
        let rq = self.rq(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, v, Op::Sigmoid(x), rq)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x.0].values.iter().map(|&a| c * a).collect();
        let rq = self.rq(x);
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, v, Op::Scale(x, c), rq)
    }

    fn binary_elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> NodeId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape, "elementwise shape mismatch");
        let v = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rq = self.rq(a) || self.rq(b);
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, v, op, rq)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_elementwise(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// x: [batch, d_in], w: [d_out, d_in], b: [d_out] -> [batch, d_out].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (batch, d_in) = {
            let s = &self.nodes[x.0].shape;
            assert_eq!(s.len(), 2, "linear input must be 2-d");
            (s[0], s[1])
        };
        let d_out = self.nodes[w.0].shape[0];
        assert_eq!(self.nodes[w.0].shape[1], d_in, "linear weight shape");
        assert_eq!(self.nodes[b.0].shape, vec![d_out], "linear bias shape");

        let mut out = vec![0.0; batch * d_out];
        for row in out.chunks_exact_mut(d_out) {
            row.copy_from_slice(&self.nodes[b.0].values);
        }
        kern::matmul_abt(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            &mut out,
            batch,
            d_out,
            d_in,
        );
        let rq = self.rq(x) || self.rq(w) || self.rq(b);
        self.push(vec![batch, d_out], out, Op::Linear { x, w, b, batch, d_in, d_out }, rq)
    }

    /// x: [c_in, h, w], w: [c_out, c_in, k, k], b: [c_out].
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: Conv2dSpec) -> NodeId {
        let (h, w_in) = {
            let s = &self.nodes[x.0].shape;
            assert_eq!(s.len(), 3, "conv input must be [c, h, w]");
            assert_eq!(s[0], spec.c_in, "conv input channels");
            (s[1], s[2])
        };
        assert_eq!(
            self.nodes[w.0].shape,
            vec![spec.c_out, spec.c_in, spec.kernel, spec.kernel],
            "conv weight shape"
        );
        let out = conv2d_forward(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            &self.nodes[b.0].values,
            spec,
            h,
            w_in,
        );
        let (oh, ow) = conv_out_dims(spec, h, w_in);
        let rq = self.rq(x) || self.rq(w) || self.rq(b);
        self.push(vec![spec.c_out, oh, ow], out, Op::Conv2d { x, w, b, spec, h, w_in }, rq)
    }

    /// 2×2 max pooling, stride 2. Spatial dims must be even.
    pub fn max_pool2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = shape3(&self.nodes[x.0].shape);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut arg = 0u32;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let iy = 2 * oy + dy;
                            let ix = 2 * ox + dx;
                            let v = xv[ch * h * w + iy * w + ix];
                            if v > best {
                                best = v;
                                arg = (iy * w + ix) as u32;
                            }
                        }
                    }
                    out[ch * oh * ow + oy * ow + ox] = best;
                    argmax[ch * oh * ow + oy * ow + ox] = arg;
                }
            }
        }
        let rq = self.rq(x);
        self.push(vec![c, oh, ow], out, Op::MaxPool2 { x, argmax }, rq)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = shape3(&self.nodes[x.0].shape);
        let xv = &self.nodes[x.0].values;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out[ch * oh * ow + oy * ow + ox] = xv[ch * h * w + (oy / 2) * w + ox / 2];
                }
            }
        }
        let rq = self.rq(x);
        self.push(vec![c, oh, ow], out, Op::Upsample2 { x }, rq)
    }

    /// Per-channel normalization over the spatial extent with affine params.
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        const EPS: f64 = 1e-5;
        let (c, h, w) = shape3(&self.nodes[x.0].shape);
        assert_eq!(self.nodes[gamma.0].shape, vec![c]);
        assert_eq!(self.nodes[beta.0].shape, vec![c]);
        let n = h * w;
        let xv = &self.nodes[x.0].values;
        let gv = &self.nodes[gamma.0].values;
        let bv = &self.nodes[beta.0].values;
        let mut out = vec![0.0; c * n];
        let mut stats = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = &xv[ch * n..(ch + 1) * n];
            let mean = plane.iter().sum::<f64>() / n as f64;
            let var = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            stats.push((mean, inv));
            let op = &mut out[ch * n..(ch + 1) * n];
            for (o, &v) in op.iter_mut().zip(plane) {
                *o = gv[ch] * (v - mean) * inv + bv[ch];
            }
        }
        let rq = self.rq(x) || self.rq(gamma) || self.rq(beta);
        self.push(vec![c, h, w], out, Op::InstanceNorm { x, gamma, beta, stats }, rq)
    }

    /// Concatenate along the channel axis.
    pub fn concat_ch(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, h, w) = shape3(&self.nodes[a.0].shape);
        let (cb, hb, wb) = shape3(&self.nodes[b.0].shape);
        assert_eq!((h, w), (hb, wb), "concat spatial dims");
        let mut v = Vec::with_capacity((ca + cb) * h * w);
        v.extend_from_slice(&self.nodes[a.0].values);
        v.extend_from_slice(&self.nodes[b.0].values);
        let rq = self.rq(a) || self.rq(b);
        self.push(vec![ca + cb, h, w], v, Op::ConcatCh { a, b, c_a: ca, c_b: cb }, rq)
    }

    /// Zero-pad to `out_h`×`out_w`, placing the input at (top, left).
    pub fn pad2(&mut self, x: NodeId, top: usize, left: usize, out_h: usize, out_w: usize) -> NodeId {
        let (c, h, w) = shape3(&self.nodes[x.0].shape);
        assert!(top + h <= out_h && left + w <= out_w, "pad target too small");
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for r in 0..h {
                let src = &xv[ch * h * w + r * w..ch * h * w + (r + 1) * w];
                let off = ch * out_h * out_w + (top + r) * out_w + left;
                out[off..off + w].copy_from_slice(src);
            }
        }
        let rq = self.rq(x);
        self.push(vec![c, out_h, out_w], out, Op::Pad2 { x, top, left, in_h: h, in_w: w }, rq)
    }

    /// Crop a `out_h`×`out_w` window at (top, left).
    pub fn crop2(&mut self, x: NodeId, top: usize, left: usize, out_h: usize, out_w: usize) -> NodeId {
        let (c, h, w) = shape3(&self.nodes[x.0].shape);
        assert!(top + out_h <= h && left + out_w <= w, "crop window out of range");
        let xv = &self.nodes[x.0].values;
        let mut out = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for r in 0..out_h {
                let off = ch * h * w + (top + r) * w + left;
                out[ch * out_h * out_w + r * out_w..ch * out_h * out_w + (r + 1) * out_w]
                    .copy_from_slice(&xv[off..off + out_w]);
            }
        }
        let rq = self.rq(x);
        self.push(vec![c, out_h, out_w], out, Op::Crop2 { x, top, left, in_h: h, in_w: w }, rq)
    }

    /// Reorder [c, h, w] planes into pixel-major rows [h·w, c].
    pub fn chw_to_nc(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = shape3(&self.nodes[x.0].shape);
        let xv = &self.nodes[x.0].values;
        let n = h * w;
        let mut out = vec![0.0; n * c];
        for ch in 0..c {
            for p in 0..n {
                out[p * c + ch] = xv[ch * n + p];
            }
        }
        let rq = self.rq(x);
        self.push(vec![n, c], out, Op::ChwToNc { x }, rq)
    }

    /// l2-normalize each row of a [n, w] tensor; zero rows stay zero.
    pub fn row_normalize(&mut self, x: NodeId) -> NodeId {
        let shape = self.nodes[x.0].shape.clone();
        assert_eq!(shape.len(), 2, "row_normalize needs [n, w]");
        let w = shape[1];
        let mut out = self.nodes[x.0].values.clone();
        let mut norms = Vec::with_capacity(shape[0]);
        for row in out.chunks_exact_mut(w) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
            norms.push(n);
        }
        let rq = self.rq(x);
        self.push(shape, out, Op::RowNormalize { x, norms }, rq)
    }

    /// Scalar sum of squared differences.
    pub fn sum_sq_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape);
        let s: f64 = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rq = self.rq(a) || self.rq(b);
        self.push(vec![1], vec![s], Op::SumSqDiff { a, b }, rq)
    }

    /// Scalar sum of absolute differences.
    pub fn sum_abs_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a.0].shape, self.nodes[b.0].shape);
        let s: f64 = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let rq = self.rq(a) || self.rq(b);
        self.push(vec![1], vec![s], Op::SumAbsDiff { a, b }, rq)
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.nodes[a.0].values.len() as f64;
        let s = self.sum_sq_diff(a, b);
        self.scale(s, 1.0 / n)
    }

    /// Mean absolute error.
    pub fn mae_loss(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let n = self.nodes[a.0].values.len() as f64;
        let s = self.sum_abs_diff(a, b);
        self.scale(s, 1.0 / n)
    }

    /// Insert a node whose forward value was computed by the caller and whose
    /// backward is delegated to `op`.
    pub fn custom(
        &mut self,
        inputs: Vec<NodeId>,
        shape: &[usize],
        values: Vec<f64>,
        op: Box<dyn CustomOp>,
    ) -> NodeId {
        let rq = inputs.iter().any(|&i| self.rq(i));
        for w in inputs.windows(2) {
            assert_ne!(w[0], w[1], "custom op inputs must be distinct");
        }
        self.push(shape.to_vec(), values, Op::Custom { inputs, op }, rq)
    }

    fn ensure_grad(&mut self, id: NodeId) {
        let n = self.nodes[id.0].values.len();
        if self.nodes[id.0].grad.is_empty() {
            self.nodes[id.0].grad = vec![0.0; n];
        }
    }

    fn add_grad(&mut self, id: NodeId, contribution: impl Iterator<Item = f64>) {
        if !self.rq(id) {
            return;
        }
        self.ensure_grad(id);
        for (g, c) in self.nodes[id.0].grad.iter_mut().zip(contribution) {
            *g += c;
        }
    }

    /// Reverse pass from a scalar node. Gradients accumulate on every node
    /// with `requires_grad`; leaf grads survive for parameter extraction.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.nodes[out.0].values.len() != 1 {
            return Err(Error::InvalidParameter("backward needs a scalar output".into()));
        }
        if !self.nodes[out.0].values[0].is_finite() {
            return Err(Error::TrainingDiverged(format!(
                "loss is not finite: {}",
                self.nodes[out.0].values[0]
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad.clear();
        }
        self.ensure_grad(out);
        self.nodes[out.0].grad[0] = 1.0;

        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_empty() {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            let gout = std::mem::take(&mut self.nodes[idx].grad);
            // The op is swapped out so input values can be read while input
            // grads are written.
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backward_op(idx, &op, &gout);
            self.nodes[idx].op = op;
        }
        Ok(())
    }

    fn backward_op(&mut self, idx: usize, op: &Op, gout: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::Relu(x) => {
                let contrib: Vec<f64> = self.nodes[x.0]
                    .values
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.add_grad(*x, contrib.into_iter());
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let contrib: Vec<f64> = self.nodes[x.0]
                    .values
                    .iter()
                    .zip(gout)
                    .map(|(&v, &g)| if v >= 0.0 { g } else { s * g })
                    .collect();
                self.add_grad(*x, contrib.into_iter());
            }
            Op::Sigmoid(x) => {
                let contrib: Vec<f64> = self.nodes[idx]
                    .values
                    .iter()
                    .zip(gout)
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect();
                self.add_grad(*x, contrib.into_iter());
            }
            Op::Scale(x, c) => {
                let c = *c;
                let contrib: Vec<f64> = gout.iter().map(|&g| c * g).collect();
                self.add_grad(*x, contrib.into_iter());
            }
            Op::Add(a, b) => {
                self.add_grad(*a, gout.iter().copied());
                self.add_grad(*b, gout.iter().copied());
            }
            Op::Sub(a, b) => {
                self.add_grad(*a, gout.iter().copied());
                self.add_grad(*b, gout.iter().map(|&g| -g));
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> =
                    self.nodes[b.0].values.iter().zip(gout).map(|(&v, &g)| v * g).collect();
                let gb: Vec<f64> =
                    self.nodes[a.0].values.iter().zip(gout).map(|(&v, &g)| v * g).collect();
                self.add_grad(*a, ga.into_iter());
                self.add_grad(*b, gb.into_iter());
            }
            Op::Linear { x, w, b, batch, d_in, d_out } => {
                let (batch, d_in, d_out) = (*batch, *d_in, *d_out);
                if self.rq(*x) {
                    let mut gx = vec![0.0; batch * d_in];
                    kern::matmul_ab(gout, &self.nodes[w.0].values, &mut gx, batch, d_in, d_out);
                    self.add_grad(*x, gx.into_iter());
                }
                if self.rq(*w) {
                    let mut gw = vec![0.0; d_out * d_in];
                    kern::matmul_atb(gout, &self.nodes[x.0].values, &mut gw, batch, d_in, d_out);
                    self.add_grad(*w, gw.into_iter());
                }
                if self.rq(*b) {
                    let mut gb = vec![0.0; d_out];
                    for row in gout.chunks_exact(d_out) {
                        kern::axpy(1.0, row, &mut gb);
                    }
                    self.add_grad(*b, gb.into_iter());
                }
            }
            Op::Conv2d { x, w, b, spec, h, w_in } => {
                let (h, w_in) = (*h, *w_in);
                if self.rq(*x) {
                    let gx = conv2d_backward_input(
                        gout,
                        &self.nodes[w.0].values,
                        *spec,
                        h,
                        w_in,
                    );
                    self.add_grad(*x, gx.into_iter());
                }
                if self.rq(*w) {
                    let gw = conv2d_backward_weight(
                        gout,
                        &self.nodes[x.0].values,
                        *spec,
                        h,
                        w_in,
                    );
                    self.add_grad(*w, gw.into_iter());
                }
                if self.rq(*b) {
                    let (oh, ow) = conv_out_dims(*spec, h, w_in);
                    let gb: Vec<f64> = (0..spec.c_out)
                        .map(|oc| gout[oc * oh * ow..(oc + 1) * oh * ow].iter().sum())
                        .collect();
                    self.add_grad(*b, gb.into_iter());
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let (c, h, w) = shape3(&self.nodes[x.0].shape);
                let n_out = gout.len() / c;
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for o in 0..n_out {
                        gx[ch * h * w + argmax[ch * n_out + o] as usize] += gout[ch * n_out + o];
                    }
                }
                self.add_grad(*x, gx.into_iter());
            }
            Op::Upsample2 { x } => {
                let (c, h, w) = shape3(&self.nodes[x.0].shape);
                let (oh, ow) = (2 * h, 2 * w);
                let mut gx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            gx[ch * h * w + (oy / 2) * w + ox / 2] +=
                                gout[ch * oh * ow + oy * ow + ox];
                        }
                    }
                }
                self.add_grad(*x, gx.into_iter());
            }
            Op::InstanceNorm { x, gamma, beta, stats } => {
                let (c, h, w) = shape3(&self.nodes[x.0].shape);
                let n = h * w;
                let xv = &self.nodes[x.0].values;
                let gv = &self.nodes[gamma.0].values;
                let mut gx = vec![0.0; c * n];
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                for ch in 0..c {
                    let (mean, inv) = stats[ch];
                    let xp = &xv[ch * n..(ch + 1) * n];
                    let gp = &gout[ch * n..(ch + 1) * n];
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    for i in 0..n {
                        let xhat = (xp[i] - mean) * inv;
                        sum_g += gp[i];
                        sum_gx += gp[i] * xhat;
                        ggamma[ch] += gp[i] * xhat;
                        gbeta[ch] += gp[i];
                    }
                    let gxp = &mut gx[ch * n..(ch + 1) * n];
                    let scale = gv[ch] * inv / n as f64;
                    for i in 0..n {
                        let xhat = (xp[i] - mean) * inv;
                        gxp[i] = scale * (n as f64 * gp[i] - sum_g - xhat * sum_gx);
                    }
                }
                self.add_grad(*x, gx.into_iter());
                self.add_grad(*gamma, ggamma.into_iter());
                self.add_grad(*beta, gbeta.into_iter());
            }
            Op::ConcatCh { a, b, c_a, c_b: _ } => {
                let (_, h, w) = shape3(&self.nodes[a.0].shape);
                let split = c_a * h * w;
                self.add_grad(*a, gout[..split].iter().copied());
                self.add_grad(*b, gout[split..].iter().copied());
            }
            Op::Pad2 { x, top, left, in_h, in_w } => {
                let c = self.nodes[x.0].shape[0];
                let out_h = self.nodes[idx].shape[1];
                let out_w = self.nodes[idx].shape[2];
                let mut gx = vec![0.0; c * in_h * in_w];
                for ch in 0..c {
                    for r in 0..*in_h {
                        let off = ch * out_h * out_w + (top + r) * out_w + left;
                        gx[ch * in_h * in_w + r * in_w..ch * in_h * in_w + (r + 1) * in_w]
                            .copy_from_slice(&gout[off..off + in_w]);
                    }
                }
                self.add_grad(*x, gx.into_iter());
            }
            Op::Crop2 { x, top, left, in_h, in_w } => {
                let c = self.nodes[x.0].shape[0];
                let out_h = self.nodes[idx].shape[1];
                let out_w = self.nodes[idx].shape[2];
                let mut gx = vec![0.0; c * in_h * in_w];
                for ch in 0..c {
                    for r in 0..out_h {
                        let off = ch * in_h * in_w + (top + r) * in_w + left;
                        gx[off..off + out_w].copy_from_slice(
                            &gout[ch * out_h * out_w + r * out_w..ch * out_h * out_w + (r + 1) * out_w],
                        );
                    }
                }
                self.add_grad(*x, gx.into_iter());
            }
            Op::ChwToNc { x } => {
                let (c, h, w) = shape3(&self.nodes[x.0].shape);
                let n = h * w;
                let mut gx = vec![0.0; c * n];
                for ch in 0..c {
                    for p in 0..n {
                        gx[ch * n + p] = gout[p * c + ch];
                    }
                }
                self.add_grad(*x, gx.into_iter());
            }
            Op::RowNormalize { x, norms } => {
                let w = self.nodes[idx].shape[1];
                let yv = &self.nodes[idx].values;
                let mut gx = vec![0.0; yv.len()];
                for (row, &nrm) in norms.iter().enumerate() {
                    if nrm == 0.0 {
                        continue;
                    }
                    let y = &yv[row * w..(row + 1) * w];
                    let g = &gout[row * w..(row + 1) * w];
                    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for i in 0..w {
                        gx[row * w + i] = (g[i] - y[i] * dot) / nrm;
                    }
                }
                self.add_grad(*x, gx.into_iter());
            }
            Op::SumSqDiff { a, b } => {
                let g = gout[0];
                let diffs: Vec<f64> = self.nodes[a.0]
                    .values
                    .iter()
                    .zip(&self.nodes[b.0].values)
                    .map(|(&x, &y)| 2.0 * g * (x - y))
                    .collect();
                self.add_grad(*a, diffs.iter().copied());
                self.add_grad(*b, diffs.iter().map(|&d| -d));
            }
            Op::SumAbsDiff { a, b } => {
                let g = gout[0];
                let signs: Vec<f64> = self.nodes[a.0]
                    .values
                    .iter()
                    .zip(&self.nodes[b.0].values)
                    .map(|(&x, &y)| g * (x - y).signum())
                    .collect();
                self.add_grad(*a, signs.iter().copied());
                self.add_grad(*b, signs.iter().map(|&d| -d));
            }
            Op::Custom { inputs, op } => {
                for &i in inputs {
                    if self.rq(i) {
                        self.ensure_grad(i);
                    }
                }
                // Temporarily move grads out to hand the op disjoint slices.
                let mut taken: Vec<(usize, Vec<f64>)> = Vec::with_capacity(inputs.len());
                for &i in inputs {
                    let g = std::mem::take(&mut self.nodes[i.0].grad);
                    taken.push((i.0, g));
                }
                {
                    let mut slices: Vec<&mut [f64]> =
                        taken.iter_mut().map(|(_, g)| g.as_mut_slice()).collect();
                    op.backward(gout, &mut slices);
                }
                for (i, g) in taken {
                    self.nodes[i].grad = g;
                }
            }
        }
    }

    /// Accumulate leaf gradients of `group` into their bound parameters.
    pub fn write_param_grads_in(&self, group: usize, set: &mut ParamSet) {
        for node in &self.nodes {
            if let Some((g, pid)) = node.param {
                if g == group && !node.grad.is_empty() {
                    kern::axpy(1.0, &node.grad, &mut set.params[pid].grad);
                }
            }
        }
    }

    /// [`Tape::write_param_grads_in`] for the default group 0.
    pub fn write_param_grads(&self, set: &mut ParamSet) {
        self.write_param_grads_in(0, set);
    }
}

fn shape3(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [c, h, w], got {shape:?}");
    (shape[0], shape[1], shape[2])
}

pub(crate) fn conv_out_dims(spec: Conv2dSpec, h: usize, w: usize) -> (usize, usize) {
    let oh = (h + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    let ow = (w + 2 * spec.padding - spec.kernel) / spec.stride + 1;
    (oh, ow)
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: &[f64],
    spec: Conv2dSpec,
    h: usize,
    w_in: usize,
) -> Vec<f64> {
    let (oh, ow) = conv_out_dims(spec, h, w_in);
    let mut out = vec![0.0; spec.c_out * oh * ow];
    let kk = spec.kernel;
    let p = spec.padding as isize;
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(oc, plane)| {
        plane.fill(bias[oc]);
        for ic in 0..spec.c_in {
            let xplane = &x[ic * h * w_in..(ic + 1) * h * w_in];
            let wbase = ((oc * spec.c_in + ic) * kk) * kk;
            for ky in 0..kk {
                for kx in 0..kk {
                    let wgt = w[wbase + ky * kk + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    if spec.stride == 1 {
                        let dy = ky as isize - p;
                        let dx = kx as isize - p;
                        let oy_lo = (-dy).max(0) as usize;
                        let oy_hi = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                        let ox_lo = (-dx).max(0) as usize;
                        let ox_hi = ((w_in as isize - dx).min(ow as isize)).max(0) as usize;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as isize + dy) as usize;
                            let src = &xplane[iy * w_in + (ox_lo as isize + dx) as usize
                                ..iy * w_in + (ox_hi as isize + dx) as usize];
                            kern::axpy(wgt, src, &mut plane[oy * ow + ox_lo..oy * ow + ox_hi]);
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = oy as isize * spec.stride as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = ox as isize * spec.stride as isize + kx as isize - p;
                                if ix < 0 || ix >= w_in as isize {
                                    continue;
                                }
                                plane[oy * ow + ox] +=
                                    wgt * xplane[iy as usize * w_in + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn conv2d_backward_input(
    gout: &[f64],
    w: &[f64],
    spec: Conv2dSpec,
    h: usize,
    w_in: usize,
) -> Vec<f64> {
    let (oh, ow) = conv_out_dims(spec, h, w_in);
    let kk = spec.kernel;
    let p = spec.padding as isize;
    let mut gx = vec![0.0; spec.c_in * h * w_in];
    gx.par_chunks_mut(h * w_in).enumerate().for_each(|(ic, gplane)| {
        for oc in 0..spec.c_out {
            let goplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
            let wbase = ((oc * spec.c_in + ic) * kk) * kk;
            for ky in 0..kk {
                for kx in 0..kk {
                    let wgt = w[wbase + ky * kk + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    if spec.stride == 1 {
                        let dy = ky as isize - p;
                        let dx = kx as isize - p;
                        let oy_lo = (-dy).max(0) as usize;
                        let oy_hi = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                        let ox_lo = (-dx).max(0) as usize;
                        let ox_hi = ((w_in as isize - dx).min(ow as isize)).max(0) as usize;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as isize + dy) as usize;
                            let dst = &mut gplane[iy * w_in + (ox_lo as isize + dx) as usize
                                ..iy * w_in + (ox_hi as isize + dx) as usize];
                            kern::axpy(wgt, &goplane[oy * ow + ox_lo..oy * ow + ox_hi], dst);
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = oy as isize * spec.stride as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = ox as isize * spec.stride as isize + kx as isize - p;
                                if ix < 0 || ix >= w_in as isize {
                                    continue;
                                }
                                gplane[iy as usize * w_in + ix as usize] +=
                                    wgt * goplane[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn conv2d_backward_weight(
    gout: &[f64],
    x: &[f64],
    spec: Conv2dSpec,
    h: usize,
    w_in: usize,
) -> Vec<f64> {
    let (oh, ow) = conv_out_dims(spec, h, w_in);
    let kk = spec.kernel;
    let p = spec.padding as isize;
    let mut gw = vec![0.0; spec.c_out * spec.c_in * kk * kk];
    gw.par_chunks_mut(spec.c_in * kk * kk).enumerate().for_each(|(oc, gslab)| {
        let goplane = &gout[oc * oh * ow..(oc + 1) * oh * ow];
        for ic in 0..spec.c_in {
            let xplane = &x[ic * h * w_in..(ic + 1) * h * w_in];
            for ky in 0..kk {
                for kx in 0..kk {
                    let mut acc = 0.0;
                    if spec.stride == 1 {
                        let dy = ky as isize - p;
                        let dx = kx as isize - p;
                        let oy_lo = (-dy).max(0) as usize;
                        let oy_hi = ((h as isize - dy).min(oh as isize)).max(0) as usize;
                        let ox_lo = (-dx).max(0) as usize;
                        let ox_hi = ((w_in as isize - dx).min(ow as isize)).max(0) as usize;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy as isize + dy) as usize;
                            acc += kern::dot(
                                &goplane[oy * ow + ox_lo..oy * ow + ox_hi],
                                &xplane[iy * w_in + (ox_lo as isize + dx) as usize
                                    ..iy * w_in + (ox_hi as isize + dx) as usize],
                                ox_hi - ox_lo,
                            );
                        }
                    } else {
                        for oy in 0..oh {
                            let iy = oy as isize * spec.stride as isize + ky as isize - p;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for ox in 0..ow {
                                let ix = ox as isize * spec.stride as isize + kx as isize - p;
                                if ix < 0 || ix >= w_in as isize {
                                    continue;
                                }
                                acc += goplane[oy * ow + ox] * xplane[iy as usize * w_in + ix as usize];
                            }
                         }
                    }
                    gslab[(ic * kk + ky) * kk + kx] = acc;
                }
            }
        }
    });
    gw
}


#[cfg(test)]
mod tests_extra_ops {
    use super::*;
    use rand::Rng;

    #[test]
    fn gradcheck_transpose_and_row_normalize() {
        let mut rng = crate::rng::rng_from_seed(40);
        let x0: Vec<f64> = (0..2 * 3 * 2)
            .map(|_| rng.random::<f64>() + 0.3)
            .collect();
        let target: Vec<f64> = (0..6 * 2).map(|_| rng.random::<f64>() - 0.5).collect();
        let tc = target.clone();

        let build = |tape: &mut Tape, leaf: NodeId| -> NodeId {
            let t = tape.chw_to_nc(leaf);
            let n = tape.row_normalize(t);
            let tt = tape.leaf(&[6, 2], tc.clone(), false);
            tape.sum_sq_diff(n, tt)
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf(&[2, 3, 2], x0.clone(), true);
        let loss = build(&mut tape, leaf);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(leaf).to_vec();
        let h = 1e-5;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp[i] += h;
            let mut tp = Tape::new();
            let lp = tp.leaf(&[2, 3, 2], xp.clone(), false);
            let op = build(&mut tp, lp);
            let fp = tp.values(op)[0];
            xp[i] = x0[i] - h;
            let mut tm = Tape::new();
            let lm = tm.leaf(&[2, 3, 2], xp, false);
            let om = build(&mut tm, lm);
            let fm = tm.values(om)[0];
            let fd = (fp - fm) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!((analytic[i] - fd).abs() / denom < 1e-4, "coord {i}");
        }
    }
}
