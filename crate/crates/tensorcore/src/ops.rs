//! Forward definitions of the differentiable operations.

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::tape::{berhu_value, Op, Tape, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped to this bound before `log(1 - p)`.
pub const LOG1M_CLAMP: f64 = 1.0 - 1e-12;

fn mismatch(op: &'static str, detail: String) -> TensorError {
    TensorError::ShapeMismatch { op, detail }
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.try_value(a)?.shape(), self.try_value(b)?.shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let xt = self.try_value(x)?;
        let data = xt.data().iter().map(|&v| f(v)).collect();
        let out = Tensor::from_parts(xt.shape().to_vec(), data);
        let needs = self.needs_grad(x);
        Ok(self.push(out, op, needs))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(op_name, a, b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(at.shape().to_vec(), data);
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, op, needs))
    }

    fn rank4(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize)> {
        self.try_value(x)?
            .dims4()
            .map_err(|_| mismatch(op, format!("expected N x C x H x W, got {:?}", self.value(x).shape())))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.try_value(x)?.sum();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.try_value(x)?;
        let m = t.sum() / t.numel() as f64;
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), needs))
    }

    /// Sums scalar terms left to right. Errors on an empty list.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) =
            terms.split_first().ok_or_else(|| TensorError::invalid("add_all of an empty term list"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    /// `max(x, slope * x)`; the derivative at 0 is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Op::Sigmoid(x),
        )
    }

    fn channel_map(&mut self, op_name: &'static str, x: Var, log: bool) -> Result<Tensor> {
        let (n, c, h, w) = self.rank4(op_name, x)?;
        if c < 2 {
            return Err(TensorError::invalid(format!("{op_name} needs at least 2 channels, got {c}")));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for b in 0..n {
            for s in 0..hw {
                let base = b * c * hw + s;
                let max = (0..c).map(|k| xv[base + k * hw]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|k| (xv[base + k * hw] - max).exp()).sum();
                let log_z = z.ln();
                for k in 0..c {
                    let i = base + k * hw;
                    out[i] = if log { xv[i] - max - log_z } else { (xv[i] - max).exp() / z };
                }
            }
        }
        Ok(Tensor::from_parts(vec![n, c, h, w], out))
    }

    /// Per-pixel softmax across the channel axis of an `N x C x H x W` tensor.
    pub fn softmax_channel(&mut self, x: Var) -> Result<Var> {
        let out = self.channel_map("softmax_channel", x, false)?;
        let needs = self.needs_grad(x);
        Ok(self.push(out, Op::SoftmaxChannel(x), needs))
    }

    pub fn log_softmax_channel(&mut self, x: Var) -> Result<Var> {
        let out = self.channel_map("log_softmax_channel", x, true)?;
        let needs = self.needs_grad(x);
        Ok(self.push(out, Op::LogSoftmaxChannel(x), needs))
    }

    /// Per-pixel `log(1 - softmax(x)[class])`, shape `N x 1 x H x W`.
    /// The class probability is clamped to [`LOG1M_CLAMP`] so the log stays finite.
    pub fn log1m_softmax_channel(&mut self, x: Var, class: usize) -> Result<Var> {
        let (n, c, h, w) = self.rank4("log1m_softmax_channel", x)?;
        if class >= c {
            return Err(TensorError::invalid(format!("class {class} out of range for {c} channels")));
        }
        let hw = h * w;
        let xv = self.value(x).data();
        let mut probs = vec![0.0; n * hw];
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for s in 0..hw {
                let base = b * c * hw + s;
                let max = (0..c).map(|k| xv[base + k * hw]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|k| (xv[base + k * hw] - max).exp()).sum();
                let rest: f64 = (0..c).filter(|&k| k != class).map(|k| (xv[base + k * hw] - max).exp()).sum();
                let p = ((xv[base + class * hw] - max).exp() / z).min(LOG1M_CLAMP);
                probs[b * hw + s] = p;
                // log(rest / z) is exact when the clamp is inactive and avoids 1 - p cancellation
                out[b * hw + s] = if rest / z >= 1.0 - LOG1M_CLAMP { (rest / z).ln() } else { (1.0 - p).ln() };
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(vec![n, 1, h, w], out), Op::Log1mSoftmaxChannel { x, class, probs }, needs))
    }

    /// Picks channel `index[n, h, w]` at every pixel, giving `N x 1 x H x W`.
    pub fn gather_channel(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, c, h, w) = self.rank4("gather_channel", x)?;
        let hw = h * w;
        if index.len() != n * hw {
            return Err(mismatch("gather_channel", format!("{} indices for {n}x{h}x{w} pixels", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&k| k >= c) {
            return Err(TensorError::invalid(format!("channel index {bad} out of range for {c} channels")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * hw];
        for b in 0..n {
            for s in 0..hw {
                out[b * hw + s] = xv[b * c * hw + index[b * hw + s] * hw + s];
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(vec![n, 1, h, w], out), Op::GatherChannel { x, index: index.to_vec() }, needs))
    }

    /// Same channel at every pixel.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let (n, _, h, w) = self.rank4("select_channel", x)?;
        self.gather_channel(x, &vec![channel; n * h * w])
    }

    /// 2-D cross-correlation with zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, cin, h, w) = self.rank4("conv2d", input)?;
        let (cout, wcin, kh, kw) = self.try_value(weight)?.dims4().map_err(|_| {
            mismatch("conv2d", format!("weight must be Cout x Cin x kH x kW, got {:?}", self.value(weight).shape()))
        })?;
        if stride == 0 {
            return Err(TensorError::invalid("conv2d stride must be positive"));
        }
        if wcin != cin {
            return Err(mismatch("conv2d", format!("input has {cin} channels but weight expects {wcin}")));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(mismatch(
                "conv2d",
                format!("{h}x{w} input with padding {padding} is smaller than the {kh}x{kw} kernel"),
            ));
        }
        if let Some(b) = bias {
            let bs = self.try_value(b)?.shape();
            if bs != [cout] {
                return Err(mismatch("conv2d", format!("bias shape {bs:?}, expected [{cout}]")));
            }
        }
        let geom = ConvGeom {
            cin,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let krows = geom.col_rows();
        let ncol = geom.col_cols();
        let img = cin * h * w;
        let mut cols = vec![0.0; n * krows * ncol];
        let mut out = vec![0.0; n * cout * ncol];
        {
            let xv = self.value(input).data();
            let wv = self.value(weight).data();
            let bv = bias.map(|b| self.value(b).data());
            for b in 0..n {
                let c = &mut cols[b * krows * ncol..(b + 1) * krows * ncol];
                kernels::im2col(&xv[b * img..(b + 1) * img], &geom, c);
                let y = &mut out[b * cout * ncol..(b + 1) * cout * ncol];
                if let Some(bv) = bv {
                    for (co, row) in y.chunks_mut(ncol).enumerate() {
                        row.iter_mut().for_each(|v| *v = bv[co]);
                    }
                }
                kernels::gemm(cout, krows, ncol, wv, false, c, false, 1.0, y);
            }
        }
        let needs = self.needs_grad(input) || self.needs_grad(weight) || bias.is_some_and(|b| self.needs_grad(b));
        // the unfolded input is only needed for the weight gradient
        if !self.needs_grad(weight) {
            cols = Vec::new();
        }
        Ok(self.push(
            Tensor::from_parts(vec![n, cout, geom.oh, geom.ow], out),
            Op::Conv2d { input, weight, bias, geom, cols },
            needs,
        ))
    }

    /// Corner-aligned bilinear resize to a size at least as large as the input.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.rank4("upsample_bilinear", x)?;
        if out_h < h || out_w < w {
            return Err(TensorError::invalid(format!("upsample_bilinear cannot shrink {h}x{w} to {out_h}x{out_w}")));
        }
        let ty = kernels::linear_taps(h, out_h);
        let tx = kernels::linear_taps(w, out_w);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * c * out_h * out_w];
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                    dst[oy * out_w + ox] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(vec![n, c, out_h, out_w], out), Op::Upsample(x), needs))
    }

    /// Spatial mean per channel, giving `N x C x 1 x 1`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.rank4("global_avg_pool", x)?;
        let hw = h * w;
        let out = self.value(x).data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let needs = self.needs_grad(x);
        Ok(self.push(Tensor::from_parts(vec![n, c, 1, 1], out), Op::GlobalAvgPool(x), needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.rank4("concat_channels", a)?;
        let (nb, cb, hb, wb) = self.rank4("concat_channels", b)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(mismatch("concat_channels", format!("{n}x?x{h}x{w} vs {nb}x?x{hb}x{wb}")));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::from_parts(vec![n, ca + cb, h, w], out), Op::ConcatChannels(a, b), needs))
    }

    /// Divides a weight by a singular-value estimate; `u` and `v` are treated as
    /// constants by the backward rule. The weight is viewed as `shape[0] x rest`.
    pub(crate) fn spectral_div(&mut self, w: Var, u: Vec<f64>, v: Vec<f64>, sigma: f64, clamped: bool) -> Result<Var> {
        let wt = self.try_value(w)?;
        let data = wt.data().iter().map(|x| x / sigma).collect();
        let out = Tensor::from_parts(wt.shape().to_vec(), data);
        let needs = self.needs_grad(w);
        Ok(self.push(out, Op::SpectralDiv { w, u, v, sigma, clamped }, needs))
    }

    /// Mean reverse Huber penalty with threshold `0.2 * max |pred - gt|`.
    pub fn berhu(&mut self, pred: Var, gt: Var) -> Result<Var> {
        self.same_shape("berhu", pred, gt)?;
        let value = berhu_value(self.value(pred).data(), self.value(gt).data());
        let needs = self.needs_grad(pred) || self.needs_grad(gt);
        Ok(self.push(Tensor::scalar(value), Op::Berhu { pred, gt }, needs))
    }
}
