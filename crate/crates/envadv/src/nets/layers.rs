//! Trainable layer primitives with explicit forward/backward passes.
//!
//! Layers own their parameters, gradients, and forward caches. `forward`
//! stores whatever the matching `backward` needs; `infer` is a pure read-only
//! pass usable concurrently. Gradients accumulate until `zero_grad`, so one
//! step may sum several loss terms.
//!
//! Convolutions lower to im2col plus one matrix multiply per batch, which
//! keeps the arithmetic inside the BLAS kernel. Batch statistics accumulate
//! in f64 regardless of the working precision.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, Array4, ArrayViewMut2, Axis};
use rand::Rng;

use crate::num::Real;
use crate::rng::named_rng;

/// Mutable view of one named tensor: trainable parameters carry a gradient,
/// running statistics do not.
pub struct TensorMut<'a, R> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: &'a mut [R],
    pub grad: Option<&'a mut [R]>,
}

/// He-uniform initialization: U(−√(6/fan_in), +√(6/fan_in)).
///
/// Every parameter draws from its own named stream, so adding or reordering
/// layers does not disturb the initialization of the others.
pub fn he_uniform<R: Real>(seed: u64, name: &str, fan_in: usize, out: &mut [R]) {
    let mut rng = named_rng(seed, &format!("init/{name}"));
    let limit = (6.0 / fan_in as f64).sqrt();
    for v in out {
        *v = R::real(rng.random_range(-limit..limit));
    }
}

/// How a normalization layer treats batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize by batch statistics and update the running estimates; the
    /// layer is being trained.
    Batch,
    /// Normalize by the running estimates without updating them; used when
    /// another phase owns this layer. Backward treats the statistics as
    /// constants.
    Running,
}

fn conv_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad).saturating_sub(kernel) / stride + 1
}

/// Output extent of a (kernel, stride, pad) chain along one axis; None when
/// some step's window no longer fits in the padded input.
pub(crate) fn chain_extent(steps: &[(usize, usize, usize)], input: usize) -> Option<usize> {
    let mut v = input;
    for &(k, s, p) in steps {
        let padded = v + 2 * p;
        if padded < k {
            return None;
        }
        v = (padded - k) / s + 1;
    }
    Some(v)
}

/// 2-D convolution, NCHW layout, (height, width) = (frequency, time).
pub struct Conv2d<R> {
    pub w: Array4<R>,
    pub b: Array1<R>,
    pub gw: Array4<R>,
    pub gb: Array1<R>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    cache: Option<ConvCache<R>>,
}

struct ConvCache<R> {
    col: Array2<R>,
    x_dim: (usize, usize, usize, usize),
}

impl<R: Real> Conv2d<R> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        let mut w = Array4::zeros((c_out, c_in, kernel.0, kernel.1));
        he_uniform(seed, name, c_in * kernel.0 * kernel.1, w.as_slice_mut().expect("layout"));
        Conv2d {
            gw: Array4::zeros(w.dim()),
            w,
            b: Array1::zeros(c_out),
            gb: Array1::zeros(c_out),
            stride,
            pad,
            cache: None,
        }
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.w.dim().2, self.w.dim().3)
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            conv_extent(h, k.0, self.stride.0, self.pad.0),
            conv_extent(w, k.1, self.stride.1, self.pad.1),
        )
    }

    fn run(&self, x: &Array4<R>) -> (Array2<R>, Array4<R>) {
        let (n, _, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let (c_out, c_in, kh, kw) = self.w.dim();
        let col = im2col(x, (kh, kw), self.stride, self.pad, (oh, ow));

        let w2 = self
            .w
            .view()
            .into_shape_with_order((c_out, c_in * kh * kw))
            .expect("contiguous weights");
        let mut y2 = Array2::zeros((c_out, n * oh * ow));
        general_mat_mul(R::one(), &w2, &col, R::zero(), &mut y2);
        for (mut row, &bias) in y2.rows_mut().into_iter().zip(&self.b) {
            row.mapv_inplace(|v| v + bias);
        }

        let y = y2
            .into_shape_with_order((c_out, n, oh, ow))
            .expect("shape")
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .to_owned();
        (col, y)
    }

    pub fn forward(&mut self, x: &Array4<R>) -> Array4<R> {
        let (col, y) = self.run(x);
        self.cache = Some(ConvCache { col, x_dim: x.dim() });
        y
    }

    pub fn infer(&self, x: &Array4<R>) -> Array4<R> {
        self.run(x).1
    }

    pub fn backward(&mut self, dy: &Array4<R>) -> Array4<R> {
        let cache = self.cache.take().expect("forward before backward");
        let (n, c_out, oh, ow) = dy.dim();
        let (_, c_in, kh, kw) = self.w.dim();
        let k = c_in * kh * kw;

        let dy2 = dy
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_shape_with_order((c_out, n * oh * ow))
            .expect("shape")
            .to_owned();

        let mut gw2 = ArrayViewMut2::from_shape(
            (c_out, k),
            self.gw.as_slice_mut().expect("layout"),
        )
        .expect("shape");
        general_mat_mul(R::one(), &dy2, &cache.col.t(), R::one(), &mut gw2);
        self.gb += &dy2.sum_axis(Axis(1));

        let w2 = self
            .w
            .view()
            .into_shape_with_order((c_out, k))
            .expect("contiguous weights");
        let mut dcol = Array2::zeros((k, n * oh * ow));
        general_mat_mul(R::one(), &w2.t(), &dy2, R::zero(), &mut dcol);
        col2im(&dcol, cache.x_dim, (kh, kw), self.stride, self.pad, (oh, ow))
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        out.push(TensorMut {
            name: format!("{prefix}/w"),
            shape: self.w.shape().to_vec(),
            value: self.w.as_slice_mut().expect("layout"),
            grad: Some(self.gw.as_slice_mut().expect("layout")),
        });
        out.push(TensorMut {
            name: format!("{prefix}/b"),
            shape: self.b.shape().to_vec(),
            value: self.b.as_slice_mut().expect("layout"),
            grad: Some(self.gb.as_slice_mut().expect("layout")),
        });
    }
}

fn im2col<R: Real>(
    x: &Array4<R>,
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array2<R> {
    let (n, c, h, w) = x.dim();
    let (kh, kw) = kernel;
    let (oh, ow) = out;
    let cols = n * oh * ow;
    let mut col = Array2::zeros((c * kh * kw, cols));
    let xs = x.as_slice().expect("layout");
    let cs = col.as_slice_mut().expect("layout");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * cols;
                for ni in 0..n {
                    let x_chan = (ni * c + ci) * h * w;
                    for oi in 0..oh {
                        let ih = (oi * stride.0 + ki) as isize - pad.0 as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_chan + ih as usize * w;
                        let col_row = row_base + (ni * oh + oi) * ow;
                        for oj in 0..ow {
                            let iw = (oj * stride.1 + kj) as isize - pad.1 as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            cs[col_row + oj] = xs[x_row + iw as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<R: Real>(
    dcol: &Array2<R>,
    x_dim: (usize, usize, usize, usize),
    kernel: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) -> Array4<R> {
    let (n, c, h, w) = x_dim;
    let (kh, kw) = kernel;
    let (oh, ow) = out;
    let cols = n * oh * ow;
    let mut dx = Array4::zeros(x_dim);
    let ds = dcol.as_slice().expect("layout");
    let xs = dx.as_slice_mut().expect("layout");
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row_base = ((ci * kh + ki) * kw + kj) * cols;
                for ni in 0..n {
                    let x_chan = (ni * c + ci) * h * w;
                    for oi in 0..oh {
                        let ih = (oi * stride.0 + ki) as isize - pad.0 as isize;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let x_row = x_chan + ih as usize * w;
                        let col_row = row_base + (ni * oh + oi) * ow;
                        for oj in 0..ow {
                            let iw = (oj * stride.1 + kj) as isize - pad.1 as isize;
                            if iw < 0 || iw >= w as isize {
                                continue;
                            }
                            xs[x_row + iw as usize] += ds[col_row + oj];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Winning input index per output site, plus the input dimensions.
type ArgmaxMemo = (Vec<usize>, (usize, usize, usize, usize));

/// Max pooling with argmax memos for the backward scatter. Padded positions
/// never win the max (they are simply outside the scanned range).
pub struct MaxPool2d {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    argmax: Option<ArgmaxMemo>,
}

impl MaxPool2d {
    pub fn new(kernel: (usize, usize), stride: (usize, usize), pad: (usize, usize)) -> Self {
        MaxPool2d { kernel, stride, pad, argmax: None }
    }

    pub fn out_spatial(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_extent(h, self.kernel.0, self.stride.0, self.pad.0),
            conv_extent(w, self.kernel.1, self.stride.1, self.pad.1),
        )
    }

    fn run<R: Real>(&self, x: &Array4<R>) -> (Array4<R>, Vec<usize>) {
        let (n, c, h, w) = x.dim();
        let (oh, ow) = self.out_spatial(h, w);
        let mut y = Array4::zeros((n, c, oh, ow));
        let mut argmax = vec![0usize; n * c * oh * ow];
        let xs = x.as_slice().expect("layout");
        let ys = y.as_slice_mut().expect("layout");
        let mut oidx = 0;
        for ni in 0..n {
            for ci in 0..c {
                let chan = (ni * c + ci) * h * w;
                for oi in 0..oh {
                    let h0 = (oi * self.stride.0) as isize - self.pad.0 as isize;
                    let h_lo = h0.max(0) as usize;
                    let h_hi = ((h0 + self.kernel.0 as isize).min(h as isize)) as usize;
                    for oj in 0..ow {
                        let w0 = (oj * self.stride.1) as isize - self.pad.1 as isize;
                        let w_lo = w0.max(0) as usize;
                        let w_hi = ((w0 + self.kernel.1 as isize).min(w as isize)) as usize;
                        let mut best = chan + h_lo * w + w_lo;
                        let mut best_v = xs[best];
                        for ih in h_lo..h_hi {
                            let row = chan + ih * w;
                            for iw in w_lo..w_hi {
                                let v = xs[row + iw];
                                if v > best_v {
                                    best_v = v;
                                    best = row + iw;
                                }
                            }
                        }
                        ys[oidx] = best_v;
                        argmax[oidx] = best;
                        oidx += 1;
                    }
                }
            }
        }
        (y, argmax)
    }

    pub fn forward<R: Real>(&mut self, x: &Array4<R>) -> Array4<R> {
        let (y, argmax) = self.run(x);
        self.argmax = Some((argmax, x.dim()));
        y
    }

    pub fn infer<R: Real>(&self, x: &Array4<R>) -> Array4<R> {
        self.run(x).0
    }

    pub fn backward<R: Real>(&mut self, dy: &Array4<R>) -> Array4<R> {
        let (argmax, x_dim) = self.argmax.take().expect("forward before backward");
        let mut dx = Array4::zeros(x_dim);
        let dxs = dx.as_slice_mut().expect("layout");
        for (&src, &g) in argmax.iter().zip(dy.as_slice().expect("layout")) {
            dxs[src] += g;
        }
        dx
    }
}

/// Shared batch-normalization arithmetic over a [rows 1 features] view where
/// statistics pool over `rows`.
pub(crate) struct BnCore<R> {
    pub(crate) gamma: Array1<R>,
    pub(crate) beta: Array1<R>,
    pub(crate) g_gamma: Array1<R>,
    pub(crate) g_beta: Array1<R>,
    pub(crate) running_mean: Array1<R>,
    pub(crate) running_var: Array1<R>,
    eps: f64,
    momentum: f64,
    cache: Option<BnCache<R>>,
}

struct BnCache<R> {
    x_hat: Array2<R>,
    inv_std: Vec<f64>,
    mode: BnMode,
}

impl<R: Real> BnCore<R> {
    fn new(features: usize) -> Self {
        BnCore {
            gamma: Array1::ones(features),
            beta: Array1::zeros(features),
            g_gamma: Array1::zeros(features),
            g_beta: Array1::zeros(features),
            running_mean: Array1::zeros(features),
            running_var: Array1::ones(features),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    /// `x` is [rows, features]; returns y and stores the cache when `train`.
    fn forward2(&mut self, x: &Array2<R>, mode: BnMode, train: bool) -> Array2<R> {
        let (rows, features) = x.dim();
        let mut mean = vec![0.0f64; features];
        let mut var = vec![0.0f64; features];
        match mode {
            BnMode::Batch => {
                for row in x.rows() {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v.to_f64();
                    }
                }
                for m in &mut mean {
                    *m /= rows as f64;
                }
                for row in x.rows() {
                    for ((va, &m), &v) in var.iter_mut().zip(&mean).zip(row) {
                        let d = v.to_f64() - m;
                        *va += d * d;
                    }
                }
                for v in &mut var {
                    *v /= rows as f64;
                }
                // Running variance records the unbiased estimate; the
                // normalization itself uses the biased one.
                let unbias = if rows > 1 { rows as f64 / (rows - 1) as f64 } else { 1.0 };
                for f in 0..features {
                    let rm = self.running_mean[f].to_f64() * (1.0 - self.momentum)
                        + mean[f] * self.momentum;
                    let rv = self.running_var[f].to_f64() * (1.0 - self.momentum)
                        + var[f] * unbias * self.momentum;
                    self.running_mean[f] = R::real(rm);
                    self.running_var[f] = R::real(rv);
                }
            }
            BnMode::Running => {
                for f in 0..features {
                    mean[f] = self.running_mean[f].to_f64();
                    var[f] = self.running_var[f].to_f64();
                }
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut x_hat = Array2::zeros((rows, features));
        let mut y = Array2::zeros((rows, features));
        for r in 0..rows {
            for f in 0..features {
                let xh = (x[(r, f)].to_f64() - mean[f]) * inv_std[f];
                x_hat[(r, f)] = R::real(xh);
                y[(r, f)] = R::real(xh * self.gamma[f].to_f64() + self.beta[f].to_f64());
            }
        }
        if train {
            self.cache = Some(BnCache { x_hat, inv_std, mode });
        }
        y
    }

    fn infer2(&self, x: &Array2<R>) -> Array2<R> {
        let (rows, features) = x.dim();
        let mut y = Array2::zeros((rows, features));
        for f in 0..features {
            let m = self.running_mean[f].to_f64();
            let inv = 1.0 / (self.running_var[f].to_f64() + self.eps).sqrt();
            let g = self.gamma[f].to_f64();
            let b = self.beta[f].to_f64();
            for r in 0..rows {
                y[(r, f)] = R::real((x[(r, f)].to_f64() - m) * inv * g + b);
            }
        }
        y
    }

    fn backward2(&mut self, dy: &Array2<R>) -> Array2<R> {
        let cache = self.cache.take().expect("forward before backward");
        let (rows, features) = dy.dim();
        let mut dx = Array2::zeros((rows, features));
        match cache.mode {
            BnMode::Batch => {
                for f in 0..features {
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xh = 0.0f64;
                    for r in 0..rows {
                        let d = dy[(r, f)].to_f64();
                        sum_dy += d;
                        sum_dy_xh += d * cache.x_hat[(r, f)].to_f64();
                    }
                    self.g_gamma[f] += R::real(sum_dy_xh);
                    self.g_beta[f] += R::real(sum_dy);
                    let g = self.gamma[f].to_f64();
                    let scale = g * cache.inv_std[f] / rows as f64;
                    for r in 0..rows {
                        let d = dy[(r, f)].to_f64();
                        let xh = cache.x_hat[(r, f)].to_f64();
                        dx[(r, f)] = R::real(
                            scale * (rows as f64 * d - sum_dy - xh * sum_dy_xh),
                        );
                    }
                }
            }
            BnMode::Running => {
                // Statistics were constants in the forward pass.
                for f in 0..features {
                    let mut sum_dy = 0.0f64;
                    let mut sum_dy_xh = 0.0f64;
                    let scale = self.gamma[f].to_f64() * cache.inv_std[f];
                    for r in 0..rows {
                        let d = dy[(r, f)].to_f64();
                        sum_dy += d;
                        sum_dy_xh += d * cache.x_hat[(r, f)].to_f64();
                        dx[(r, f)] = R::real(d * scale);
                    }
                    self.g_gamma[f] += R::real(sum_dy_xh);
                    self.g_beta[f] += R::real(sum_dy);
                }
            }
        }
        dx
    }

    fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        out.push(TensorMut {
            name: format!("{prefix}/gamma"),
            shape: self.gamma.shape().to_vec(),
            value: self.gamma.as_slice_mut().expect("layout"),
            grad: Some(self.g_gamma.as_slice_mut().expect("layout")),
        });
        out.push(TensorMut {
            name: format!("{prefix}/beta"),
            shape: self.beta.shape().to_vec(),
            value: self.beta.as_slice_mut().expect("layout"),
            grad: Some(self.g_beta.as_slice_mut().expect("layout")),
        });
        out.push(TensorMut {
            name: format!("{prefix}/running_mean"),
            shape: self.running_mean.shape().to_vec(),
            value: self.running_mean.as_slice_mut().expect("layout"),
            grad: None,
        });
        out.push(TensorMut {
            name: format!("{prefix}/running_var"),
            shape: self.running_var.shape().to_vec(),
            value: self.running_var.as_slice_mut().expect("layout"),
            grad: None,
        });
    }
}

/// Batch normalization over (batch, height, width) per channel.
pub struct BatchNorm2d<R> {
    pub(crate) core: BnCore<R>,
    x_dim: Option<(usize, usize, usize, usize)>,
}

/// Rearranges NCHW to [(N·H·W), C] so channel statistics pool over rows.
fn nchw_to_rows<R: Real>(x: &Array4<R>) -> Array2<R> {
    let (n, c, h, w) = x.dim();
    x.view()
        .permuted_axes([0, 2, 3, 1])
        .as_standard_layout()
        .into_shape_with_order((n * h * w, c))
        .expect("shape")
        .to_owned()
}

fn rows_to_nchw<R: Real>(y: Array2<R>, dim: (usize, usize, usize, usize)) -> Array4<R> {
    let (n, c, h, w) = dim;
    y.into_shape_with_order((n, h, w, c))
        .expect("shape")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned()
}

impl<R: Real> BatchNorm2d<R> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d { core: BnCore::new(channels), x_dim: None }
    }

    pub fn forward(&mut self, x: &Array4<R>, mode: BnMode) -> Array4<R> {
        self.x_dim = Some(x.dim());
        let y = self.core.forward2(&nchw_to_rows(x), mode, true);
        rows_to_nchw(y, x.dim())
    }

    pub fn infer(&self, x: &Array4<R>) -> Array4<R> {
        rows_to_nchw(self.core.infer2(&nchw_to_rows(x)), x.dim())
    }

    pub fn backward(&mut self, dy: &Array4<R>) -> Array4<R> {
        let dim = self.x_dim.take().expect("forward before backward");
        let dx = self.core.backward2(&nchw_to_rows(dy));
        rows_to_nchw(dx, dim)
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        self.core.tensors(prefix, out);
    }
}

/// Batch normalization over the batch axis of [N, features].
pub struct BatchNorm1d<R> {
    pub(crate) core: BnCore<R>,
}

impl<R: Real> BatchNorm1d<R> {
    pub fn new(features: usize) -> Self {
        BatchNorm1d { core: BnCore::new(features) }
    }

    pub fn forward(&mut self, x: &Array2<R>, mode: BnMode) -> Array2<R> {
        self.core.forward2(x, mode, true)
    }

    pub fn infer(&self, x: &Array2<R>) -> Array2<R> {
        self.core.infer2(x)
    }

    pub fn backward(&mut self, dy: &Array2<R>) -> Array2<R> {
        self.core.backward2(dy)
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        self.core.tensors(prefix, out);
    }
}

/// Elementwise max(0, x) over any array; the mask is kept for backward.
#[derive(Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}


impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }

    pub fn forward4<R: Real>(&mut self, x: &Array4<R>) -> Array4<R> {
        let mut y = x.clone();
        let mask = relu_in_place(y.as_slice_mut().expect("layout"));
        self.mask = Some(mask);
        y
    }

    pub fn forward2<R: Real>(&mut self, x: &Array2<R>) -> Array2<R> {
        let mut y = x.clone();
        let mask = relu_in_place(y.as_slice_mut().expect("layout"));
        self.mask = Some(mask);
        y
    }

    pub fn infer4<R: Real>(x: &Array4<R>) -> Array4<R> {
        let mut y = x.clone();
        relu_in_place(y.as_slice_mut().expect("layout"));
        y
    }

    pub fn infer2<R: Real>(x: &Array2<R>) -> Array2<R> {
        let mut y = x.clone();
        relu_in_place(y.as_slice_mut().expect("layout"));
        y
    }

    pub fn backward4<R: Real>(&mut self, dy: &Array4<R>) -> Array4<R> {
        let mask = self.mask.take().expect("forward before backward");
        let mut dx = dy.clone();
        for (v, &keep) in dx.as_slice_mut().expect("layout").iter_mut().zip(&mask) {
            if !keep {
                *v = R::zero();
            }
        }
        dx
    }

    pub fn backward2<R: Real>(&mut self, dy: &Array2<R>) -> Array2<R> {
        let mask = self.mask.take().expect("forward before backward");
        let mut dx = dy.clone();
        for (v, &keep) in dx.as_slice_mut().expect("layout").iter_mut().zip(&mask) {
            if !keep {
                *v = R::zero();
            }
        }
        dx
    }
}

fn relu_in_place<R: Real>(xs: &mut [R]) -> Vec<bool> {
    let mut mask = vec![false; xs.len()];
    for (v, m) in xs.iter_mut().zip(&mut mask) {
        if *v > R::zero() {
            *m = true;
        } else {
            *v = R::zero();
        }
    }
    mask
}

/// The conv → batchnorm → ReLU unit every trunk layer is built from.
pub struct ConvUnit<R> {
    pub conv: Conv2d<R>,
    pub bn: BatchNorm2d<R>,
    relu: Relu,
}

impl<R: Real> ConvUnit<R> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        seed: u64,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Self {
        ConvUnit {
            conv: Conv2d::new(seed, &format!("{name}/w"), c_in, c_out, kernel, stride, pad),
            bn: BatchNorm2d::new(c_out),
            relu: Relu::new(),
        }
    }

    pub fn forward(&mut self, x: &Array4<R>, mode: BnMode) -> Array4<R> {
        let y = self.conv.forward(x);
        let y = self.bn.forward(&y, mode);
        self.relu.forward4(&y)
    }

    pub fn infer(&self, x: &Array4<R>) -> Array4<R> {
        Relu::infer4(&self.bn.infer(&self.conv.infer(x)))
    }

    pub fn backward(&mut self, dy: &Array4<R>) -> Array4<R> {
        let d = self.relu.backward4(dy);
        let d = self.bn.backward(&d);
        self.conv.backward(&d)
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        self.conv.tensors(prefix, out);
        self.bn.tensors(&format!("{prefix}/bn"), out);
    }
}

/// Affine map y = xWᵀ + b over a batch of row vectors.
pub struct Linear<R> {
    pub w: Array2<R>,
    pub b: Array1<R>,
    pub gw: Array2<R>,
    pub gb: Array1<R>,
    cache: Option<Array2<R>>,
}

impl<R: Real> Linear<R> {
    pub fn new(seed: u64, name: &str, in_features: usize, out_features: usize) -> Self {
        let mut w = Array2::zeros((out_features, in_features));
        he_uniform(seed, name, in_features, w.as_slice_mut().expect("layout"));
        Linear {
            gw: Array2::zeros(w.dim()),
            w,
            b: Array1::zeros(out_features),
            gb: Array1::zeros(out_features),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Array2<R>) -> Array2<R> {
        let y = self.infer(x);
        self.cache = Some(x.clone());
        y
    }

    pub fn infer(&self, x: &Array2<R>) -> Array2<R> {
        let mut y = Array2::zeros((x.nrows(), self.w.nrows()));
        general_mat_mul(R::one(), x, &self.w.t(), R::zero(), &mut y);
        y + &self.b
    }

    pub fn backward(&mut self, dy: &Array2<R>) -> Array2<R> {
        let x = self.cache.take().expect("forward before backward");
        general_mat_mul(R::one(), &dy.t().to_owned(), &x, R::one(), &mut self.gw);
        self.gb += &dy.sum_axis(Axis(0));
        let mut dx = Array2::zeros(x.dim());
        general_mat_mul(R::one(), dy, &self.w, R::zero(), &mut dx);
        dx
    }

    pub fn tensors<'a>(&'a mut self, prefix: &str, out: &mut Vec<TensorMut<'a, R>>) {
        out.push(TensorMut {
            name: format!("{prefix}/w"),
            shape: self.w.shape().to_vec(),
            value: self.w.as_slice_mut().expect("layout"),
            grad: Some(self.gw.as_slice_mut().expect("layout")),
        });
        out.push(TensorMut {
            name: format!("{prefix}/b"),
            shape: self.b.shape().to_vec(),
            value: self.b.as_slice_mut().expect("layout"),
            grad: Some(self.gb.as_slice_mut().expect("layout")),
        });
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-difference gradient checking in f64.

    /// Relative error between analytic and numeric values with a mixed
    /// absolute/relative scale.
    pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / (1.0 + analytic.abs().max(numeric.abs()))
    }

    /// Checks d loss / d x[i] for every i by central differences, where
    /// `eval` maps a perturbed copy of the flattened input to the loss.
    pub fn check_grads(
        x: &[f64],
        analytic: &[f64],
        eval: impl FnMut(&[f64]) -> f64,
        tol: f64,
        what: &str,
    ) {
        let all: Vec<usize> = (0..x.len()).collect();
        check_grads_at(x, analytic, eval, tol, what, &all);
    }

    /// Same check restricted to the given coordinates; used where one
    /// evaluation is expensive (whole-trunk forwards).
    pub fn check_grads_at(
        x: &[f64],
        analytic: &[f64],
        mut eval: impl FnMut(&[f64]) -> f64,
        tol: f64,
        what: &str,
        indices: &[usize],
    ) {
        let h = 1e-5;
        let mut buf = x.to_vec();
        for &i in indices {
            buf[i] = x[i] + h;
            let up = eval(&buf);
            buf[i] = x[i] - h;
            let down = eval(&buf);
            buf[i] = x[i];
            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(analytic[i], numeric);
            assert!(
                err < tol,
                "{what}[{i}]: analytic {} vs numeric {numeric} (rel err {err})",
                analytic[i]
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::check_grads;
    use super::*;
    use ndarray::{Array1, Array2, Array4};
    use rand::Rng;

    use crate::rng::named_rng;

    fn filled4(dim: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = named_rng(seed, "test/filled4");
        Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
    }

    fn filled2(dim: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = named_rng(seed, "test/filled2");
        Array2::from_shape_simple_fn(dim, || rng.random_range(-1.0..1.0))
    }

    /// Weighted sum of outputs makes a scalar loss with a dense, fixed
    /// downstream gradient.
    fn loss_weights(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = named_rng(seed, "test/lossw");
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn conv_matches_direct_computation() {
        let conv = Conv2d::<f64>::new(3, "c", 2, 3, (3, 2), (2, 1), (1, 0));
        let x = filled4((2, 2, 5, 4), 10);
        let y = conv.infer(&x);
        assert_eq!(y.dim(), (2, 3, 3, 3));
        // Direct dot product at one output site: n=1, co=2, oh=1, ow=2.
        let (n, co, oh, ow) = (1usize, 2usize, 1usize, 2usize);
        let mut want = conv.b[co];
        for ci in 0..2 {
            for ki in 0..3 {
                for kj in 0..2 {
                    let ih = (oh * 2 + ki) as isize - 1;
                    let iw = (ow + kj) as isize;
                    if (0..5).contains(&ih) && iw < 4 {
                        want += conv.w[(co, ci, ki, kj)] * x[(n, ci, ih as usize, iw as usize)];
                    }
                }
            }
        }
        assert!((y[(n, co, oh, ow)] - want).abs() < 1e-12);
    }

    #[test]
    fn conv_gradcheck() {
        let x = filled4((2, 2, 6, 5), 1);
        let lw = loss_weights(2 * 3 * 3 * 5, 2);
        let loss_of = |conv: &Conv2d<f64>, x: &Array4<f64>| -> f64 {
            conv.infer(x)
                .as_slice()
                .unwrap()
                .iter()
                .zip(&lw)
                .map(|(&y, &w)| y * w)
                .sum()
        };

        let mut conv = Conv2d::<f64>::new(4, "c", 2, 3, (3, 3), (2, 1), (1, 1));
        let y = conv.forward(&x);
        let dy = Array4::from_shape_vec(y.dim(), lw.clone()).unwrap();
        let dx = conv.backward(&dy);

        check_grads(
            x.as_slice().unwrap(),
            dx.as_slice().unwrap(),
            |xs| loss_of(&conv, &Array4::from_shape_vec(x.dim(), xs.to_vec()).unwrap()),
            1e-6,
            "conv dx",
        );
        let w0 = conv.w.clone();
        let gw = conv.gw.clone();
        check_grads(
            w0.as_slice().unwrap(),
            gw.as_slice().unwrap(),
            |ws| {
                let mut c2 = Conv2d::<f64>::new(4, "c", 2, 3, (3, 3), (2, 1), (1, 1));
                c2.w = Array4::from_shape_vec(w0.dim(), ws.to_vec()).unwrap();
                c2.b = conv.b.clone();
                loss_of(&c2, &x)
            },
            1e-6,
            "conv dw",
        );
        let b0 = conv.b.clone();
        let gb = conv.gb.clone();
        check_grads(
            b0.as_slice().unwrap(),
            gb.as_slice().unwrap(),
            |bs| {
                let mut c2 = Conv2d::<f64>::new(4, "c", 2, 3, (3, 3), (2, 1), (1, 1));
                c2.w = conv.w.clone();
                c2.b = Array1::from_vec(bs.to_vec());
                loss_of(&c2, &x)
            },
            1e-6,
            "conv db",
        );
    }

    #[test]
    fn maxpool_forward_and_gradcheck() {
        let x = filled4((2, 2, 5, 6), 3);
        let mut pool = MaxPool2d::new((3, 3), (2, 2), (1, 0));
        let y = pool.forward(&x);
        assert_eq!(y.dim(), (2, 2, 3, 2));

        let lw = loss_weights(y.len(), 4);
        let dy = Array4::from_shape_vec(y.dim(), lw.clone()).unwrap();
        let dx = pool.backward(&dy);
        let pool2 = MaxPool2d::new((3, 3), (2, 2), (1, 0));
        check_grads(
            x.as_slice().unwrap(),
            dx.as_slice().unwrap(),
            |xs| {
                pool2
                    .infer(&Array4::from_shape_vec(x.dim(), xs.to_vec()).unwrap())
                    .as_slice()
                    .unwrap()
                    .iter()
                    .zip(&lw)
                    .map(|(&y, &w)| y * w)
                    .sum()
            },
            1e-6,
            "maxpool dx",
        );
    }

    #[test]
    fn batchnorm_train_mode_normalizes_and_matches_gradcheck() {
        let x = filled2((7, 3), 5);
        let mut bn = BatchNorm1d::<f64>::new(3);
        bn.core.gamma = Array1::from_vec(vec![1.3, 0.7, 2.0]);
        bn.core.beta = Array1::from_vec(vec![0.1, -0.2, 0.4]);
        let y = bn.forward(&x, BnMode::Batch);

        // Per-feature output mean β, std γ (biased, ε-adjusted).
        for f in 0..3 {
            let col: Vec<f64> = y.column(f).to_vec();
            let mean: f64 = col.iter().sum::<f64>() / col.len() as f64;
            assert!((mean - bn.core.beta[f]).abs() < 1e-9);
        }

        let lw = loss_weights(y.len(), 6);
        let dy = Array2::from_shape_vec(y.dim(), lw.clone()).unwrap();
        let dx = bn.backward(&dy);
        let loss_of = |x: &Array2<f64>| -> f64 {
            let mut b2 = BatchNorm1d::<f64>::new(3);
            b2.core.gamma = Array1::from_vec(vec![1.3, 0.7, 2.0]);
            b2.core.beta = Array1::from_vec(vec![0.1, -0.2, 0.4]);
            b2.forward(x, BnMode::Batch)
                .as_slice()
                .unwrap()
                .iter()
                .zip(&lw)
                .map(|(&y, &w)| y * w)
                .sum()
        };
        check_grads(
            x.as_slice().unwrap(),
            dx.as_slice().unwrap(),
            |xs| loss_of(&Array2::from_shape_vec(x.dim(), xs.to_vec()).unwrap()),
            1e-6,
            "bn dx",
        );
    }

    #[test]
    fn batchnorm_running_mode_is_frozen_affine() {
        let x = filled2((4, 2), 7);
        let mut bn = BatchNorm1d::<f64>::new(2);
        // Seed distinctive running stats, then check Running mode uses them
        // without updating.
        bn.core.running_mean = Array1::from_vec(vec![0.5, -1.0]);
        bn.core.running_var = Array1::from_vec(vec![4.0, 0.25]);
        let before_m = bn.core.running_mean.clone();
        let before_v = bn.core.running_var.clone();

        let y = bn.forward(&x, BnMode::Running);
        assert_eq!(bn.core.running_mean, before_m);
        assert_eq!(bn.core.running_var, before_v);
        for r in 0..4 {
            let want = (x[(r, 0)] - 0.5) / (4.0f64 + 1e-5).sqrt();
            assert!((y[(r, 0)] - want).abs() < 1e-12);
        }
        assert_eq!(y, bn.infer(&x));

        // Backward: gradient is the same frozen scale.
        let dy = Array2::ones((4, 2));
        let dx = bn.backward(&dy);
        assert!((dx[(0, 0)] - 1.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn batchnorm2d_stats_pool_over_batch_and_space() {
        let x = filled4((2, 3, 2, 2), 8);
        let mut bn = BatchNorm2d::<f64>::new(3);
        let y = bn.forward(&x, BnMode::Batch);
        for c in 0..3 {
            let vals: Vec<f64> = y.slice(ndarray::s![.., c, .., ..]).iter().copied().collect();
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }

        let lw = loss_weights(y.len(), 9);
        let dy = Array4::from_shape_vec(y.dim(), lw.clone()).unwrap();
        let dx = bn.backward(&dy);
        check_grads(
            x.as_slice().unwrap(),
            dx.as_slice().unwrap(),
            |xs| {
                let mut b2 = BatchNorm2d::<f64>::new(3);
                b2.forward(&Array4::from_shape_vec(x.dim(), xs.to_vec()).unwrap(), BnMode::Batch)
                    .as_slice()
                    .unwrap()
                    .iter()
                    .zip(&lw)
                    .map(|(&y, &w)| y * w)
                    .sum()
            },
            1e-6,
            "bn2d dx",
        );
    }

    #[test]
    fn linear_matches_affine_recomputation_and_gradcheck() {
        let x = filled2((3, 4), 11);
        let mut lin = Linear::<f64>::new(12, "l", 4, 2);
        let y = lin.forward(&x);
        for r in 0..3 {
            for o in 0..2 {
                let want: f64 =
                    (0..4).map(|i| x[(r, i)] * lin.w[(o, i)]).sum::<f64>() + lin.b[o];
                assert!((y[(r, o)] - want).abs() < 1e-12);
            }
        }

        let lw = loss_weights(y.len(), 13);
        let dy = Array2::from_shape_vec(y.dim(), lw.clone()).unwrap();
        let dx = lin.backward(&dy);
        let w0 = lin.w.clone();
        let b0 = lin.b.clone();
        let loss_of = |w: &Array2<f64>, b: &Array1<f64>, x: &Array2<f64>| -> f64 {
            let mut l2 = Linear::<f64>::new(12, "l", 4, 2);
            l2.w = w.clone();
            l2.b = b.clone();
            l2.infer(x).as_slice().unwrap().iter().zip(&lw).map(|(&y, &w)| y * w).sum()
        };
        check_grads(
            x.as_slice().unwrap(),
            dx.as_slice().unwrap(),
            |xs| loss_of(&w0, &b0, &Array2::from_shape_vec(x.dim(), xs.to_vec()).unwrap()),
            1e-6,
            "linear dx",
        );
        check_grads(
            w0.as_slice().unwrap(),
            lin.gw.as_slice().unwrap(),
            |ws| loss_of(&Array2::from_shape_vec(w0.dim(), ws.to_vec()).unwrap(), &b0, &x),
            1e-6,
            "linear dw",
        );
        check_grads(
            b0.as_slice().unwrap(),
            lin.gb.as_slice().unwrap(),
            |bs| loss_of(&w0, &Array1::from_vec(bs.to_vec()), &x),
            1e-6,
            "linear db",
        );
    }

    #[test]
    fn relu_zeroes_negative_paths() {
        let x = Array2::from_shape_vec((1, 4), vec![-1.0, 0.0, 0.5, 2.0]).unwrap();
        let mut relu = Relu::new();
        let y = relu.forward2(&x);
        assert_eq!(y.as_slice().unwrap(), &[0.0, 0.0, 0.5, 2.0]);
        let dx = relu.backward2(&Array2::<f64>::ones((1, 4)));
        assert_eq!(dx.as_slice().unwrap(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn he_uniform_is_per_name_deterministic() {
        let mut a = vec![0.0f32; 16];
        let mut b = vec![0.0f32; 16];
        he_uniform(1, "x", 8, &mut a);
        he_uniform(1, "x", 8, &mut b);
        assert_eq!(a, b);
        he_uniform(1, "y", 8, &mut b);
        assert_ne!(a, b);
        let limit = (6.0f32 / 8.0).sqrt();
        assert!(a.iter().all(|v| v.abs() <= limit));
    }
}
