//! The computation tape and its reverse sweep.
//!
//! Every differentiable operation appends one record holding its output value
//! and enough saved state to run its local backward rule. Records are only ever
//! appended, so inputs always precede outputs and the reverse sweep visits each
//! record once, in index order from the loss down to the leaves.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid(Var),
    SoftmaxChannel(Var),
    LogSoftmaxChannel(Var),
    /// `log(1 - softmax(x)[class])` per pixel; saves the clamped class probability.
    Log1mSoftmaxChannel {
        x: Var,
        class: usize,
        probs: Vec<f64>,
    },
    /// Per-pixel pick of one channel given by `index` (length `n*h*w`).
    GatherChannel {
        x: Var,
        index: Vec<usize>,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Upsample(Var),
    GlobalAvgPool(Var),
    ConcatChannels(Var, Var),
    /// `w / sigma` with the singular vectors held constant.
    SpectralDiv {
        w: Var,
        u: Vec<f64>,
        v: Vec<f64>,
        sigma: f64,
        clamped: bool,
    },
    Berhu {
        pred: Var,
        gt: Var,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub needs_grad: bool,
}

/// Ordered record of executed operations.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require a gradient or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: &[f64]) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, x)| *b += x),
        None => *slot = Some(g.to_vec()),
    }
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

    pub(crate) fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. It participates in differentiation iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let needs = t.requires_grad();
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut value = t.with_requires_grad(false);
        value.clear_grad();
        self.push(value, Op::Leaf, false)
    }

    /// Copies `v`'s value into a fresh constant leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.node(v)?.value.clone();
        Ok(self.constant(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn try_value(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.get(v.0).is_some_and(|n| n.needs_grad)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let node = self.node(loss)?;
        if node.value.numel() != 1 {
            return Err(TensorError::NonScalar { shape: node.value.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !node.needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        add_into(&mut grads[v.0], g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.wants(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    add_into(&mut grads[b.0], &neg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::Scale(x, c) => {
                let gx: Vec<f64> = g.iter().map(|v| v * c).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = g.iter().zip(xv).map(|(gi, xi)| 2.0 * xi * gi).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                add_into(&mut grads[x.0], &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                add_into(&mut grads[x.0], &vec![g[0] / n as f64; n]);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let gx: Vec<f64> = g.iter().zip(xv).map(|(gi, xi)| if *xi > 0.0 { *gi } else { gi * slope }).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::Sigmoid(x) => {
                let gx: Vec<f64> = g.iter().zip(out.data()).map(|(gi, s)| gi * s * (1.0 - s)).collect();
                add_into(&mut grads[x.0], &gx);
            }
            Op::SoftmaxChannel(x) => {
                let (n, c, h, w) = out.dims4().expect("rank checked in forward");
                let hw = h * w;
                let p = out.data();
                let mut gx = vec![0.0; p.len()];
                for b in 0..n {
                    for s in 0..hw {
                        let base = b * c * hw + s;
                        let dot: f64 = (0..c).map(|k| g[base + k * hw] * p[base + k * hw]).sum();
                        for k in 0..c {
                            let i = base + k * hw;
                            gx[i] = p[i] * (g[i] - dot);
                        }
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::LogSoftmaxChannel(x) => {
                let (n, c, h, w) = out.dims4().expect("rank checked in forward");
                let hw = h * w;
                let lp = out.data();
                let mut gx = vec![0.0; lp.len()];
                for b in 0..n {
                    for s in 0..hw {
                        let base = b * c * hw + s;
                        let total: f64 = (0..c).map(|k| g[base + k * hw]).sum();
                        for k in 0..c {
                            let i = base + k * hw;
                            gx[i] = g[i] - lp[i].exp() * total;
                        }
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::Log1mSoftmaxChannel { x, class, probs } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4().expect("rank checked in forward");
                let hw = h * w;
                let xv = xt.data();
                let mut gx = vec![0.0; xv.len()];
                for b in 0..n {
                    for s in 0..hw {
                        let base = b * c * hw + s;
                        let pc = probs[b * hw + s];
                        let gi = g[b * hw + s];
                        let max = (0..c).map(|k| xv[base + k * hw]).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = (0..c).map(|k| (xv[base + k * hw] - max).exp()).sum();
                        for k in 0..c {
                            let i = base + k * hw;
                            gx[i] = if k == *class {
                                -pc * gi
                            } else {
                                let pk = (xv[i] - max).exp() / z;
                                gi * pc * pk / (1.0 - pc)
                            };
                        }
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::GatherChannel { x, index } => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4().expect("rank checked in forward");
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for b in 0..n {
                    for s in 0..hw {
                        let k = index[b * hw + s];
                        gx[b * c * hw + k * hw + s] = g[b * hw + s];
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::Conv2d { input, weight, bias, geom, cols } => {
                self.conv_backward(out, g, *input, *weight, *bias, geom, cols, grads);
            }
            Op::Upsample(x) => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4().expect("rank checked in forward");
                let (_, _, oh, ow) = out.dims4().expect("rank checked in forward");
                let ty = kernels::linear_taps(h, oh);
                let tx = kernels::linear_taps(w, ow);
                let mut gx = vec![0.0; n * c * h * w];
                for p in 0..n * c {
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            dst[y0 * w + x1] += gv * (1.0 - fy) * fx;
                            dst[y1 * w + x0] += gv * fy * (1.0 - fx);
                            dst[y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::GlobalAvgPool(x) => {
                let xt = self.value(*x);
                let (n, c, h, w) = xt.dims4().expect("rank checked in forward");
                let hw = h * w;
                let mut gx = vec![0.0; n * c * hw];
                for p in 0..n * c {
                    let v = g[p] / hw as f64;
                    gx[p * hw..(p + 1) * hw].iter_mut().for_each(|e| *e = v);
                }
                add_into(&mut grads[x.0], &gx);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("rank checked in forward");
                let cb = self.value(*b).dims4().expect("rank checked in forward").1;
                let hw = h * w;
                let c = ca + cb;
                if self.wants(*a) {
                    let mut ga = Vec::with_capacity(n * ca * hw);
                    for bi in 0..n {
                        ga.extend_from_slice(&g[bi * c * hw..(bi * c + ca) * hw]);
                    }
                    add_into(&mut grads[a.0], &ga);
                }
                if self.wants(*b) {
                    let mut gb = Vec::with_capacity(n * cb * hw);
                    for bi in 0..n {
                        gb.extend_from_slice(&g[(bi * c + ca) * hw..(bi + 1) * c * hw]);
                    }
                    add_into(&mut grads[b.0], &gb);
                }
            }
            Op::SpectralDiv { w, u, v, sigma, clamped } => {
                let cols = v.len();
                let normalized = out.data();
                let gw: Vec<f64> = if *clamped {
                    g.iter().map(|x| x / sigma).collect()
                } else {
                    let inner: f64 = g.iter().zip(normalized).map(|(a, b)| a * b).sum();
                    g.iter().enumerate().map(|(idx, gi)| (gi - inner * u[idx / cols] * v[idx % cols]) / sigma).collect()
                };
                add_into(&mut grads[w.0], &gw);
            }
            Op::Berhu { pred, gt } => {
                let gp = berhu_grad(self.value(*pred).data(), self.value(*gt).data(), g[0]);
                if self.wants(*pred) {
                    add_into(&mut grads[pred.0], &gp);
                }
                if self.wants(*gt) {
                    let neg: Vec<f64> = gp.iter().map(|x| -x).collect();
                    add_into(&mut grads[gt.0], &neg);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        out: &Tensor,
        g: &[f64],
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        cols: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (n, cout, _, _) = out.dims4().expect("rank checked in forward");
        let krows = geom.col_rows();
        let ncol = geom.col_cols();
        let wv = self.value(weight).data();

        if let Some(b) = bias.filter(|b| self.wants(*b)) {
            let mut gb = vec![0.0; cout];
            for bi in 0..n {
                for (co, acc) in gb.iter_mut().enumerate() {
                    let off = (bi * cout + co) * ncol;
                    *acc += g[off..off + ncol].iter().sum::<f64>();
                }
            }
            add_into(&mut grads[b.0], &gb);
        }
        if self.wants(weight) {
            let mut gw = vec![0.0; cout * krows];
            for bi in 0..n {
                let gy = &g[bi * cout * ncol..(bi + 1) * cout * ncol];
                let c = &cols[bi * krows * ncol..(bi + 1) * krows * ncol];
                kernels::gemm(cout, ncol, krows, gy, false, c, true, 1.0, &mut gw);
            }
            add_into(&mut grads[weight.0], &gw);
        }
        if self.wants(input) {
            let img = geom.cin * geom.h * geom.w;
            let mut gx = vec![0.0; n * img];
            let mut dcols = vec![0.0; krows * ncol];
            for bi in 0..n {
                let gy = &g[bi * cout * ncol..(bi + 1) * cout * ncol];
                kernels::gemm(krows, cout, ncol, wv, true, gy, false, 0.0, &mut dcols);
                kernels::col2im(&dcols, geom, &mut gx[bi * img..(bi + 1) * img]);
            }
            add_into(&mut grads[input.0], &gx);
        }
    }
}

/// Threshold and per-element values of the reverse Huber penalty.
pub(crate) fn berhu_threshold(pred: &[f64], gt: &[f64]) -> (f64, usize) {
    let mut max = 0.0;
    let mut arg = 0;
    for (i, (p, t)) in pred.iter().zip(gt).enumerate() {
        let e = (p - t).abs();
        if e > max {
            max = e;
            arg = i;
        }
    }
    (0.2 * max, arg)
}

pub(crate) fn berhu_value(pred: &[f64], gt: &[f64]) -> f64 {
    let (c, _) = berhu_threshold(pred, gt);
    if c == 0.0 {
        return 0.0;
    }
    let total: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, t)| {
            let e = (p - t).abs();
            if e <= c {
                e
            } else {
                (e * e + c * c) / (2.0 * c)
            }
        })
        .sum();
    total / pred.len() as f64
}

/// Exact derivative of the mean reverse Huber penalty, including the
/// dependence of the threshold on the largest residual.
fn berhu_grad(pred: &[f64], gt: &[f64], upstream: f64) -> Vec<f64> {
    let m = pred.len() as f64;
    let (c, arg) = berhu_threshold(pred, gt);
    let mut grad = vec![0.0; pred.len()];
    if c == 0.0 {
        return grad;
    }
    let mut dl_dc = 0.0;
    for (i, (p, t)) in pred.iter().zip(gt).enumerate() {
        let e = p - t;
        if e == 0.0 {
            continue;
        } else if e.abs() <= c {
            grad[i] = e.signum();
        } else {
            grad[i] = e / c;
            dl_dc += 0.5 - e * e / (2.0 * c * c);
        }
    }
    let e_arg = pred[arg] - gt[arg];
    grad[arg] += dl_dc * 0.2 * e_arg.signum();
    grad.iter_mut().for_each(|v| *v *= upstream / m);
    grad
}
