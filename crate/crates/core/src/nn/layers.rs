use rand_chacha::ChaCha8Rng;

use super::{gemm, join, Ctx, Init, Module, Param, Tensor};
use crate::imaging::reflect_index;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Output columns `ox` whose input column `ox*s + kj - p` lies inside `0..w`.
#[inline]
fn valid_cols(ow: usize, w: usize, s: usize, kj: usize, p: usize) -> (usize, usize) {
    // smallest ox with ox*s + kj >= p
    let lo = if kj >= p { 0 } else { (p - kj).div_ceil(s) };
    // largest ox with ox*s + kj - p <= w - 1
    let hi = if w + p < kj + 1 {
        0
    } else {
        ((w + p - kj - 1) / s + 1).min(ow)
    };
    (lo.min(hi), hi)
}

/// Unfolds `x` (`c×h×w`) into `(c·k·k) × (oh·ow)` patch columns.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    mode: PadMode,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(ow, w, s, kj, p);
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    let sy = match mode {
                        PadMode::Zero if iy < 0 || iy >= h as isize => {
                            out_row.fill(0.0);
                            continue;
                        }
                        PadMode::Zero => iy as usize,
                        PadMode::Reflect => reflect_index(iy, h),
                    };
                    let src_row = &src[sy * w..(sy + 1) * w];
                    if hi > lo {
                        let start = lo * s + kj - p;
                        if s == 1 {
                            out_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        } else {
                            for (o, j) in out_row[lo..hi].iter_mut().zip((start..).step_by(s)) {
                                *o = src_row[j];
                            }
                        }
                    }
                    for ox in (0..lo).chain(hi.max(lo)..ow) {
                        let ix = (ox * s + kj) as isize - p as isize;
                        out_row[ox] = match mode {
                            PadMode::Zero => 0.0,
                            PadMode::Reflect => src_row[reflect_index(ix, w)],
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    mode: PadMode,
    oh: usize,
    ow: usize,
    x: &mut [f32],
) {
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(ow, w, s, kj, p);
                for oy in 0..oh {
                    let iy = (oy * s + ki) as isize - p as isize;
                    let sy = match mode {
                        PadMode::Zero if iy < 0 || iy >= h as isize => continue,
                        PadMode::Zero => iy as usize,
                        PadMode::Reflect => reflect_index(iy, h),
                    };
                    let in_row = &src[oy * ow..(oy + 1) * ow];
                    let dst_row = &mut dst[sy * w..(sy + 1) * w];
                    if hi > lo {
                        let start = lo * s + kj - p;
                        if s == 1 {
                            for (d, &v) in dst_row[start..start + (hi - lo)].iter_mut().zip(&in_row[lo..hi]) {
                                *d += v;
                            }
                        } else {
                            for (&v, j) in in_row[lo..hi].iter().zip((start..).step_by(s)) {
                                dst_row[j] += v;
                            }
                        }
                    }
                    if mode == PadMode::Reflect {
                        for ox in (0..lo).chain(hi.max(lo)..ow) {
                            let ix = (ox * s + kj) as isize - p as isize;
                            dst_row[reflect_index(ix, w)] += in_row[ox];
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub weight: Param,
    pub bias: Option<Param>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        mode: PadMode,
        bias: bool,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        let weight = Param::new(vec![out_c, in_c, k, k], init.sample(out_c * fan_in, fan_in, rng));
        let bias = bias.then(|| match init {
            Init::Normal(_) => Param::new(vec![out_c], vec![0.0; out_c]),
            Init::FanIn => Param::new(vec![out_c], Init::FanIn.sample(out_c, fan_in, rng)),
        });
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            mode,
            weight,
            bias,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn run(&self, x: &Tensor, keep_cols: bool) -> (Tensor, Vec<Vec<f32>>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (oh, ow) = self.output_hw(x.h, x.w);
        let kk = self.in_c * self.k * self.k;
        let plane = oh * ow;
        let mut y = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut kept = Vec::new();
        let mut cols = vec![0.0; kk * plane];
        for i in 0..x.n {
            im2col(
                x.item(i),
                x.c,
                x.h,
                x.w,
                self.k,
                self.stride,
                self.pad,
                self.mode,
                oh,
                ow,
                &mut cols,
            );
            let yi = y.item_mut(i);
            if let Some(b) = &self.bias {
                for (o, &bv) in b.value.iter().enumerate() {
                    yi[o * plane..(o + 1) * plane].fill(bv);
                }
            }
            gemm(
                self.out_c,
                kk,
                plane,
                &self.weight.value,
                false,
                &cols,
                false,
                yi,
                if self.bias.is_some() { 1.0 } else { 0.0 },
            );
            if keep_cols {
                kept.push(std::mem::replace(&mut cols, vec![0.0; kk * plane]));
            }
        }
        (y, kept)
    }

    fn backward(&mut self, cols: &[Vec<f32>], in_shape: [usize; 4], dy: &Tensor) -> Tensor {
        let [n, c, h, w] = in_shape;
        let (oh, ow) = (dy.h, dy.w);
        let plane = oh * ow;
        let kk = self.in_c * self.k * self.k;
        let mut dx = Tensor::zeros(n, c, h, w);
        let mut dcols = vec![0.0; kk * plane];
        for i in 0..n {
            let dyi = dy.item(i);
            gemm(
                self.out_c,
                plane,
                kk,
                dyi,
                false,
                &cols[i],
                true,
                &mut self.weight.grad,
                1.0,
            );
            if let Some(b) = &mut self.bias {
                for o in 0..self.out_c {
                    b.grad[o] += dyi[o * plane..(o + 1) * plane].iter().sum::<f32>();
                }
            }
            gemm(
                kk,
                self.out_c,
                plane,
                &self.weight.value,
                true,
                dyi,
                false,
                &mut dcols,
                0.0,
            );
            col2im(
                &dcols,
                c,
                h,
                w,
                self.k,
                self.stride,
                self.pad,
                self.mode,
                oh,
                ow,
                dx.item_mut(i),
            );
        }
        dx
    }
}

/// Transposed convolution with zero padding; weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub output_pad: usize,
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        output_pad: usize,
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(output_pad < stride, "output_pad must be smaller than stride");
        let fan_in = out_c * k * k;
        let weight = Param::new(vec![in_c, out_c, k, k], init.sample(in_c * fan_in, fan_in, rng));
        let bias = match init {
            Init::Normal(_) => Param::new(vec![out_c], vec![0.0; out_c]),
            Init::FanIn => Param::new(vec![out_c], Init::FanIn.sample(out_c, fan_in, rng)),
        };
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            output_pad,
            weight,
            bias,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| (n - 1) * self.stride + self.k + self.output_pad - 2 * self.pad;
        (f(h), f(w))
    }

    fn run(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv-transpose input channels");
        let (oh, ow) = self.output_hw(x.h, x.w);
        let kk = self.out_c * self.k * self.k;
        let plane_in = x.plane();
        let mut y = Tensor::zeros(x.n, self.out_c, oh, ow);
        let mut cols = vec![0.0; kk * plane_in];
        for i in 0..x.n {
            gemm(
                kk,
                self.in_c,
                plane_in,
                &self.weight.value,
                true,
                x.item(i),
                false,
                &mut cols,
                0.0,
            );
            let yi = y.item_mut(i);
            col2im(
                &cols,
                self.out_c,
                oh,
                ow,
                self.k,
                self.stride,
                self.pad,
                PadMode::Zero,
                x.h,
                x.w,
                yi,
            );
            for (o, &bv) in self.bias.value.iter().enumerate() {
                for v in &mut yi[o * oh * ow..(o + 1) * oh * ow] {
                    *v += bv;
                }
            }
        }
        y
    }

    fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let kk = self.out_c * self.k * self.k;
        let plane_in = x.plane();
        let mut dx = x.zeros_like();
        let mut dcols = vec![0.0; kk * plane_in];
        for i in 0..x.n {
            let dyi = dy.item(i);
            im2col(
                dyi,
                self.out_c,
                dy.h,
                dy.w,
                self.k,
                self.stride,
                self.pad,
                PadMode::Zero,
                x.h,
                x.w,
                &mut dcols,
            );
            gemm(
                self.in_c,
                kk,
                plane_in,
                &self.weight.value,
                false,
                &dcols,
                false,
                dx.item_mut(i),
                0.0,
            );
            gemm(
                self.in_c,
                plane_in,
                kk,
                x.item(i),
                false,
                &dcols,
                true,
                &mut self.weight.grad,
                1.0,
            );
            let plane = dy.plane();
            for o in 0..self.out_c {
                self.bias.grad[o] += dyi[o * plane..(o + 1) * plane].iter().sum::<f32>();
            }
        }
        dx
    }
}

const NORM_EPS: f32 = 1e-5;

/// Per-sample, per-channel normalization without affine parameters.
#[derive(Debug, Clone, Default)]
pub struct InstanceNorm2d;

impl InstanceNorm2d {
    fn run(&self, x: &Tensor) -> (Tensor, Vec<f32>) {
        let plane = x.plane();
        let mut y = x.clone();
        let mut inv_stds = Vec::with_capacity(x.n * x.c);
        for chunk in y.data.chunks_mut(plane) {
            let mean = chunk.iter().map(|&v| v as f64).sum::<f64>() / plane as f64;
            let var = chunk.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / plane as f64;
            let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
            for v in chunk.iter_mut() {
                *v = ((*v as f64 - mean) * inv) as f32;
            }
            inv_stds.push(inv as f32);
        }
        (y, inv_stds)
    }

    fn backward(xhat: &Tensor, inv_stds: &[f32], dy: &Tensor) -> Tensor {
        let plane = xhat.plane();
        let mut dx = dy.clone();
        for (j, (d, xh)) in dx.data.chunks_mut(plane).zip(xhat.data.chunks(plane)).enumerate() {
            let m = plane as f64;
            let mean_dy = d.iter().map(|&v| v as f64).sum::<f64>() / m;
            let mean_dyx = d.iter().zip(xh).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>() / m;
            let inv = inv_stds[j] as f64;
            for (dv, &xv) in d.iter_mut().zip(xh) {
                *dv = (inv * (*dv as f64 - mean_dy - xv as f64 * mean_dyx)) as f32;
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub momentum: f32,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            momentum: 0.1,
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
        }
    }

    fn forward_train(&mut self, x: &Tensor) -> (Tensor, Tensor, Vec<f32>) {
        let plane = x.plane();
        let m = (x.n * plane) as f64;
        let mut xhat = x.clone();
        let mut y = x.clone();
        let mut inv_stds = vec![0.0f32; x.c];
        for ch in 0..x.c {
            let mut sum = 0.0f64;
            for i in 0..x.n {
                sum += x.item(i)[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0f64;
            for i in 0..x.n {
                sq += x.item(i)[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>();
            }
            let var = sq / m;
            let inv = 1.0 / (var + NORM_EPS as f64).sqrt();
            inv_stds[ch] = inv as f32;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..x.n {
                let range = ch * plane..(ch + 1) * plane;
                let xi = &mut xhat.item_mut(i)[range.clone()];
                for v in xi.iter_mut() {
                    *v = ((*v as f64 - mean) * inv) as f32;
                }
                let src: Vec<f32> = xi.to_vec();
                for (o, xv) in y.item_mut(i)[range].iter_mut().zip(src) {
                    *o = g * xv + b;
                }
            }
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            let mo = self.momentum;
            self.running_mean.value[ch] = (1.0 - mo) * self.running_mean.value[ch] + mo * mean as f32;
            self.running_var.value[ch] = (1.0 - mo) * self.running_var.value[ch] + mo * unbiased as f32;
        }
        (y, xhat, inv_stds)
    }

    fn infer(&self, x: &Tensor) -> Tensor {
        let plane = x.plane();
        let mut y = x.clone();
        for i in 0..x.n {
            let yi = y.item_mut(i);
            for ch in 0..self.channels {
                let inv = 1.0 / (self.running_var.value[ch] + NORM_EPS).sqrt();
                let (g, b, mu) = (self.gamma.value[ch], self.beta.value[ch], self.running_mean.value[ch]);
                for v in &mut yi[ch * plane..(ch + 1) * plane] {
                    *v = g * (*v - mu) * inv + b;
                }
            }
        }
        y
    }

    fn backward(&mut self, xhat: &Tensor, inv_stds: &[f32], dy: &Tensor) -> Tensor {
        let plane = dy.plane();
        let m = (dy.n * plane) as f64;
        let mut dx = dy.zeros_like();
        for ch in 0..self.channels {
            let range = ch * plane..(ch + 1) * plane;
            let (mut sdy, mut sdyx) = (0.0f64, 0.0f64);
            for i in 0..dy.n {
                for (&d, &xh) in dy.item(i)[range.clone()].iter().zip(&xhat.item(i)[range.clone()]) {
                    sdy += d as f64;
                    sdyx += d as f64 * xh as f64;
                }
            }
            self.gamma.grad[ch] += sdyx as f32;
            self.beta.grad[ch] += sdy as f32;
            let g = self.gamma.value[ch] as f64;
            let inv = inv_stds[ch] as f64;
            // dL/dxhat = g * dy, folded into the standard batch-norm adjoint.
            let (mean_d, mean_dx) = (g * sdy / m, g * sdyx / m);
            for i in 0..dy.n {
                let src_dy = dy.item(i)[range.clone()].to_vec();
                let src_xh = xhat.item(i)[range.clone()].to_vec();
                for ((o, d), xh) in dx.item_mut(i)[range.clone()].iter_mut().zip(src_dy).zip(src_xh) {
                    *o = (inv * (g * d as f64 - mean_d - xh as f64 * mean_dx)) as f32;
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f32,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPool2d;

impl MaxPool2d {
    fn run(x: &Tensor) -> (Tensor, Vec<usize>) {
        let (oh, ow) = (x.h / 2, x.w / 2);
        let mut y = Tensor::zeros(x.n, x.c, oh, ow);
        let mut arg = Vec::with_capacity(y.data.len());
        let mut o = 0;
        for nc in 0..x.n * x.c {
            let base = nc * x.h * x.w;
            for r in 0..oh {
                for c in 0..ow {
                    let mut best = base + 2 * r * x.w + 2 * c;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let j = base + (2 * r + dr) * x.w + 2 * c + dc;
                        if x.data[j] > x.data[best] {
                            best = j;
                        }
                    }
                    y.data[o] = x.data[best];
                    arg.push(best);
                    o += 1;
                }
            }
        }
        (y, arg)
    }
}

/// A network layer. Composite layers (`Residual`) nest a [`Sequential`].
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    ConvTranspose(ConvTranspose2d),
    InstanceNorm(InstanceNorm2d),
    BatchNorm(BatchNorm2d),
    Relu,
    LeakyRelu(f32),
    /// `scale * tanh(x)`.
    Tanh(f32),
    Sigmoid,
    Dropout(Dropout),
    MaxPool(MaxPool2d),
    /// `x + body(x)`.
    Residual(Sequential),
}

#[derive(Debug, Clone)]
pub enum LayerCache {
    Conv { cols: Vec<Vec<f32>>, in_shape: [usize; 4] },
    Input(Tensor),
    Output(Tensor),
    Norm { xhat: Tensor, inv_stds: Vec<f32> },
    Mask(Vec<f32>),
    Pool { argmax: Vec<usize>, in_shape: [usize; 4] },
    Residual(SequentialCache),
    Identity,
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor, ctx: &mut Ctx) -> (Tensor, LayerCache) {
        match self {
            Layer::Conv(conv) => {
                let (y, cols) = conv.run(x, true);
                (
                    y,
                    LayerCache::Conv {
                        cols,
                        in_shape: x.shape(),
                    },
                )
            }
            Layer::ConvTranspose(conv) => (conv.run(x), LayerCache::Input(x.clone())),
            Layer::InstanceNorm(norm) => {
                let (y, inv_stds) = norm.run(x);
                (y.clone(), LayerCache::Norm { xhat: y, inv_stds })
            }
            Layer::BatchNorm(bn) => {
                if ctx.train {
                    let (y, xhat, inv_stds) = bn.forward_train(x);
                    (y, LayerCache::Norm { xhat, inv_stds })
                } else {
                    (bn.infer(x), LayerCache::Identity)
                }
            }
            Layer::Relu => {
                let y = map(x, |v| v.max(0.0));
                (y.clone(), LayerCache::Output(y))
            }
            Layer::LeakyRelu(slope) => {
                let s = *slope;
                (
                    map(x, |v| if v > 0.0 { v } else { s * v }),
                    LayerCache::Input(x.clone()),
                )
            }
            Layer::Tanh(scale) => {
                let t = map(x, f32::tanh);
                let mut y = t.clone();
                y.scale(*scale);
                (y, LayerCache::Output(t))
            }
            Layer::Sigmoid => {
                let y = map(x, sigmoid);
                (y.clone(), LayerCache::Output(y))
            }
            Layer::Dropout(d) => {
                if !ctx.train || d.p <= 0.0 {
                    return (x.clone(), LayerCache::Identity);
                }
                let keep = 1.0 - d.p;
                let mask: Vec<f32> = (0..x.data.len())
                    .map(|_| if ctx.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                    .collect();
                let mut y = x.clone();
                for (v, m) in y.data.iter_mut().zip(&mask) {
                    *v *= m;
                }
                (y, LayerCache::Mask(mask))
            }
            Layer::MaxPool(_) => {
                let (y, argmax) = MaxPool2d::run(x);
                (
                    y,
                    LayerCache::Pool {
                        argmax,
                        in_shape: x.shape(),
                    },
                )
            }
            Layer::Residual(body) => {
                let (mut y, cache) = body.forward(x, ctx);
                y.add_assign(x);
                (y, LayerCache::Residual(cache))
            }
        }
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        match self {
            Layer::Conv(conv) => conv.run(x, false).0,
            Layer::ConvTranspose(conv) => conv.run(x),
            Layer::InstanceNorm(norm) => norm.run(x).0,
            Layer::BatchNorm(bn) => bn.infer(x),
            Layer::Relu => map(x, |v| v.max(0.0)),
            Layer::LeakyRelu(s) => {
                let s = *s;
                map(x, |v| if v > 0.0 { v } else { s * v })
            }
            Layer::Tanh(scale) => {
                let s = *scale;
                map(x, |v| s * v.tanh())
            }
            Layer::Sigmoid => map(x, sigmoid),
            Layer::Dropout(_) => x.clone(),
            Layer::MaxPool(_) => MaxPool2d::run(x).0,
            Layer::Residual(body) => {
                let mut y = body.infer(x);
                y.add_assign(x);
                y
            }
        }
    }

    pub fn backward(&mut self, cache: &LayerCache, dy: &Tensor) -> Tensor {
        match (self, cache) {
            (Layer::Conv(conv), LayerCache::Conv { cols, in_shape }) => conv.backward(cols, *in_shape, dy),
            (Layer::ConvTranspose(conv), LayerCache::Input(x)) => conv.backward(x, dy),
            (Layer::InstanceNorm(_), LayerCache::Norm { xhat, inv_stds }) => {
                InstanceNorm2d::backward(xhat, inv_stds, dy)
            }
            (Layer::BatchNorm(bn), LayerCache::Norm { xhat, inv_stds }) => bn.backward(xhat, inv_stds, dy),
            (Layer::Relu, LayerCache::Output(y)) => zip_map(dy, y, |d, o| if o > 0.0 { d } else { 0.0 }),
            (Layer::LeakyRelu(s), LayerCache::Input(x)) => {
                let s = *s;
                zip_map(dy, x, |d, v| if v > 0.0 { d } else { s * d })
            }
            (Layer::Tanh(scale), LayerCache::Output(t)) => {
                let s = *scale;
                zip_map(dy, t, |d, tv| d * s * (1.0 - tv * tv))
            }
            (Layer::Sigmoid, LayerCache::Output(y)) => zip_map(dy, y, |d, o| d * o * (1.0 - o)),
            (Layer::Dropout(_), LayerCache::Mask(mask)) => {
                let mut dx = dy.clone();
                for (v, m) in dx.data.iter_mut().zip(mask) {
                    *v *= m;
                }
                dx
            }
            (Layer::Dropout(_) | Layer::BatchNorm(_), LayerCache::Identity) => dy.clone(),
            (Layer::MaxPool(_), LayerCache::Pool { argmax, in_shape }) => {
                let [n, c, h, w] = *in_shape;
                let mut dx = Tensor::zeros(n, c, h, w);
                for (&j, &d) in argmax.iter().zip(&dy.data) {
                    dx.data[j] += d;
                }
                dx
            }
            (Layer::Residual(body), LayerCache::Residual(c)) => {
                let mut dx = body.backward(c, dy);
                dx.add_assign(dy);
                dx
            }
            (layer, cache) => panic!("cache {cache:?} does not belong to layer {layer:?}"),
        }
    }
}

impl Module for Layer {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        match self {
            Layer::Conv(c) => {
                out.push((join(prefix, "weight"), &mut c.weight));
                if let Some(b) = &mut c.bias {
                    out.push((join(prefix, "bias"), b));
                }
            }
            Layer::ConvTranspose(c) => {
                out.push((join(prefix, "weight"), &mut c.weight));
                out.push((join(prefix, "bias"), &mut c.bias));
            }
            Layer::BatchNorm(bn) => {
                out.push((join(prefix, "weight"), &mut bn.gamma));
                out.push((join(prefix, "bias"), &mut bn.beta));
                out.push((join(prefix, "running_mean"), &mut bn.running_mean));
                out.push((join(prefix, "running_var"), &mut bn.running_var));
            }
            Layer::Residual(body) => body.visit_params(prefix, out),
            _ => {}
        }
    }
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn map(x: &Tensor, f: impl Fn(f32) -> f32) -> Tensor {
    Tensor {
        data: x.data.iter().map(|&v| f(v)).collect(),
        ..*x
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    Tensor {
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        ..*a
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Default)]
pub struct SequentialCache(pub Vec<LayerCache>);

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut Ctx) -> (Tensor, SequentialCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &mut self.layers {
            let (y, c) = layer.forward(&cur, ctx);
            caches.push(c);
            cur = y;
        }
        (cur, SequentialCache(caches))
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.infer(&cur);
        }
        cur
    }

    pub fn backward(&mut self, cache: &SequentialCache, dy: &Tensor) -> Tensor {
        let mut grad = dy.clone();
        for (layer, c) in self.layers.iter_mut().zip(&cache.0).rev() {
            grad = layer.backward(c, &grad);
        }
        grad
    }
}

impl Module for Sequential {
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_params(&join(prefix, &i.to_string()), out);
        }
    }
}
