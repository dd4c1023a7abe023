//! Convolution, transposed convolution, batch normalization and residual
//! blocks with hand-written backward passes.
//!
//! Every layer has an eval-mode `forward` that keeps nothing, and a
//! `forward_tape` / `backward` pair used for training and input gradients.
//! Parameter gradients accumulate into [`Param::grad`].

use rand::Rng;

use super::direct;
use super::gemm::{sgemm, View};
use super::tensor::Tensor;

/// Upper bound on im2col scratch (floats) before splitting by output rows.
const COLS_BUDGET: usize = 1 << 23;

/// Stride-1 convolutions producing at most this many channels use the
/// direct kernels; wider ones go through im2col and GEMM.
const DIRECT_MAX_CHANNELS: usize = 32;

const BN_EPS: f32 = 1e-5;
const BN_MOMENTUM: f32 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Param { shape, value, grad }
    }

    pub fn filled(shape: Vec<usize>, v: f32) -> Self {
        let n = shape.iter().product();
        Param::new(shape, vec![v; n])
    }

    fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, bound: f32, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Param::new(shape, (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Visitor over named parameters; the flag marks trainable tensors
/// (batch-norm running statistics are not).
pub type ParamVisitor<'a> = dyn FnMut(&str, &mut Param, bool) + 'a;

/// Sliding-window geometry between a large raster (`c x h x w`) and the
/// grid of window positions (`oh x ow`).
#[derive(Clone, Copy, Debug)]
struct Window {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Window {
    fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Self {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Window { c, h, w, k, stride, pad, oh, ow }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn chunk_rows(&self) -> usize {
        (COLS_BUDGET / (self.rows() * self.ow).max(1)).clamp(1, self.oh)
    }

    /// Gathers window rows `r0..r1` into `cols` (`c·k·k` x `(r1-r0)·ow`).
    fn im2col(&self, src: &[f32], r0: usize, r1: usize, cols: &mut [f32]) {
        let n = (r1 - r0) * self.ow;
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        for ci in 0..self.c {
            let plane = &src[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in r0..r1 {
                        let iy = (oy * s + ky) as isize - p;
                        let d = &mut dst[(oy - r0) * self.ow..(oy - r0 + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            d.fill(0.0);
                            continue;
                        }
                        let srow = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let off = kx as isize - p;
                        if s == 1 {
                            // Valid ox range: 0 <= ox + off < w.
                            let lo = (-off).clamp(0, self.ow as isize) as usize;
                            let hi = (self.w as isize - off).clamp(0, self.ow as isize) as usize;
                            d[..lo].fill(0.0);
                            d[hi..].fill(0.0);
                            if hi > lo {
                                let start = (lo as isize + off) as usize;
                                d[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                            }
                        } else {
                            for (ox, v) in d.iter_mut().enumerate() {
                                let ix = (ox * s) as isize + off;
                                *v = if ix >= 0 && ix < self.w as isize { srow[ix as usize] } else { 0.0 };
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `cols` back into `dst`; adjoint of [`Window::im2col`].
    fn col2im(&self, cols: &[f32], r0: usize, r1: usize, dst: &mut [f32]) {
        let n = (r1 - r0) * self.ow;
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        for ci in 0..self.c {
            let plane = &mut dst[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in r0..r1 {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[(oy - r0) * self.ow..(oy - r0 + 1) * self.ow];
                        let off = kx as isize - p;
                        if s == 1 {
                            let lo = (-off).clamp(0, self.ow as isize) as usize;
                            let hi = (self.w as isize - off).clamp(0, self.ow as isize) as usize;
                            if hi > lo {
                                let start = (lo as isize + off) as usize;
                                for (d, v) in drow[start..start + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                                    *d += v;
                                }
                            }
                        } else {
                            for (ox, v) in srow.iter().enumerate() {
                                let ix = (ox * s) as isize + off;
                                if ix >= 0 && ix < self.w as isize {
                                    drow[ix as usize] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with "same"-style padding `k / 2` and bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Param,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((cin * kernel * kernel) as f32).sqrt();
        Conv2d {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            weight: Param::uniform(vec![cout, cin, kernel, kernel], bound, rng),
            bias: Param::uniform(vec![cout], bound, rng),
        }
    }

    fn window(&self, x: &Tensor) -> Window {
        Window::new(self.in_channels, x.h(), x.w(), self.kernel, self.stride, self.kernel / 2)
    }

    fn direct_ok(&self) -> bool {
        self.stride == 1 && self.kernel % 2 == 1 && self.kernel <= 7 && direct::available()
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.in_channels, "conv input channels");
        if self.direct_ok() && self.out_channels <= DIRECT_MAX_CHANNELS {
            let (h, w) = (x.h(), x.w());
            let mut out = Tensor::zeros([x.n(), self.out_channels, h, w]);
            for i in 0..x.n() {
                direct::conv_same(
                    x.sample(i),
                    self.in_channels,
                    h,
                    w,
                    self.kernel,
                    &self.weight.value,
                    self.out_channels,
                    Some(&self.bias.value),
                    false,
                    out.sample_mut(i),
                );
            }
            return out;
        }
        self.forward_gemm(x)
    }

    fn forward_gemm(&self, x: &Tensor) -> Tensor {
        let win = self.window(x);
        let (kk, ohw) = (win.rows(), win.oh * win.ow);
        let mut out = Tensor::zeros([x.n(), self.out_channels, win.oh, win.ow]);
        let chunk = win.chunk_rows();
        let mut cols = vec![0.0f32; kk * chunk * win.ow];
        for i in 0..x.n() {
            let src = x.sample(i);
            let dst = out.sample_mut(i);
            let mut r0 = 0;
            while r0 < win.oh {
                let r1 = (r0 + chunk).min(win.oh);
                let n = (r1 - r0) * win.ow;
                win.im2col(src, r0, r1, &mut cols[..kk * n]);
                sgemm(
                    1.0,
                    &self.weight.value,
                    View::row_major(self.out_channels, kk),
                    &cols[..kk * n],
                    View::row_major(kk, n),
                    0.0,
                    &mut dst[r0 * win.ow..],
                    View { rows: self.out_channels, cols: n, rs: ohw as isize, cs: 1 },
                );
                r0 = r1;
            }
            for co in 0..self.out_channels {
                let b = self.bias.value[co];
                dst[co * ohw..(co + 1) * ohw].iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    /// Returns the input gradient when `input_grad` is set (else an empty tensor).
    pub fn backward(&mut self, x: &Tensor, g: &Tensor, input_grad: bool, param_grad: bool) -> Tensor {
        let direct_input = input_grad && self.direct_ok() && self.in_channels <= DIRECT_MAX_CHANNELS;
        let direct_param = param_grad && self.direct_ok() && self.out_channels <= DIRECT_MAX_CHANNELS;
        let (h, w) = (x.h(), x.w());
        if direct_param {
            for i in 0..x.n() {
                let gs = g.sample(i);
                for co in 0..self.out_channels {
                    self.bias.grad[co] += gs[co * h * w..(co + 1) * h * w].iter().sum::<f32>();
                }
                direct::conv_same_weight_grad(
                    x.sample(i),
                    self.in_channels,
                    h,
                    w,
                    self.kernel,
                    gs,
                    self.out_channels,
                    &mut self.weight.grad,
                );
            }
        }
        let mut gx = self.backward_gemm(x, g, input_grad && !direct_input, param_grad && !direct_param);
        if direct_input {
            gx = Tensor::zeros(x.shape);
            for i in 0..x.n() {
                direct::conv_same(
                    g.sample(i),
                    self.out_channels,
                    h,
                    w,
                    self.kernel,
                    &self.weight.value,
                    self.in_channels,
                    None,
                    true,
                    gx.sample_mut(i),
                );
            }
        }
        gx
    }

    fn backward_gemm(&mut self, x: &Tensor, g: &Tensor, input_grad: bool, param_grad: bool) -> Tensor {
        if !input_grad && !param_grad {
            return Tensor::zeros([0, 0, 0, 0]);
        }
        let win = self.window(x);
        let (kk, ohw) = (win.rows(), win.oh * win.ow);
        let chunk = win.chunk_rows();
        let mut cols = vec![0.0f32; kk * chunk * win.ow];
        let mut gx = if input_grad { Tensor::zeros(x.shape) } else { Tensor::zeros([0, 0, 0, 0]) };
        for i in 0..x.n() {
            let gs = g.sample(i);
            if param_grad {
                for co in 0..self.out_channels {
                    self.bias.grad[co] += gs[co * ohw..(co + 1) * ohw].iter().sum::<f32>();
                }
            }
            let mut r0 = 0;
            while r0 < win.oh {
                let r1 = (r0 + chunk).min(win.oh);
                let n = (r1 - r0) * win.ow;
                let gview = View { rows: self.out_channels, cols: n, rs: ohw as isize, cs: 1 };
                if param_grad {
                    win.im2col(x.sample(i), r0, r1, &mut cols[..kk * n]);
                    sgemm(
                        1.0,
                        &gs[r0 * win.ow..],
                        gview,
                        &cols[..kk * n],
                        View::transposed(kk, n),
                        1.0,
                        &mut self.weight.grad,
                        View::row_major(self.out_channels, kk),
                    );
                }
                if input_grad {
                    sgemm(
                        1.0,
                        &self.weight.value,
                        View::transposed(self.out_channels, kk),
                        &gs[r0 * win.ow..],
                        gview,
                        0.0,
                        &mut cols[..kk * n],
                        View::row_major(kk, n),
                    );
                    win.col2im(&cols[..kk * n], r0, r1, gx.sample_mut(i));
                }
                r0 = r1;
            }
        }
        gx
    }
}

/// Transposed convolution (padding `k / 2`, output padding `stride - 1`),
/// so a stride-2 layer exactly doubles the resolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[in, out, k, k]`
    pub weight: Param,
    pub bias: Param,
}

impl ConvTranspose2d {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((cout * kernel * kernel) as f32).sqrt();
        ConvTranspose2d {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            weight: Param::uniform(vec![cin, cout, kernel, kernel], bound, rng),
            bias: Param::uniform(vec![cout], bound, rng),
        }
    }

    fn window(&self, x: &Tensor) -> Window {
        let pad = self.kernel / 2;
        let oh = (x.h() - 1) * self.stride + self.kernel - 2 * pad + (self.stride - 1);
        let ow = (x.w() - 1) * self.stride + self.kernel - 2 * pad + (self.stride - 1);
        let win = Window::new(self.out_channels, oh, ow, self.kernel, self.stride, pad);
        debug_assert_eq!((win.oh, win.ow), (x.h(), x.w()));
        win
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c(), self.in_channels, "transposed conv input channels");
        let win = self.window(x);
        let (kk, hw) = (win.rows(), x.plane());
        let mut out = Tensor::zeros([x.n(), self.out_channels, win.h, win.w]);
        let chunk = win.chunk_rows();
        let mut cols = vec![0.0f32; kk * chunk * win.ow];
        for i in 0..x.n() {
            let src = x.sample(i);
            let dst = out.sample_mut(i);
            let mut r0 = 0;
            while r0 < win.oh {
                let r1 = (r0 + chunk).min(win.oh);
                let n = (r1 - r0) * win.ow;
                sgemm(
                    1.0,
                    &self.weight.value,
                    View::transposed(self.in_channels, kk),
                    &src[r0 * win.ow..],
                    View { rows: self.in_channels, cols: n, rs: hw as isize, cs: 1 },
                    0.0,
                    &mut cols[..kk * n],
                    View::row_major(kk, n),
                );
                win.col2im(&cols[..kk * n], r0, r1, dst);
                r0 = r1;
            }
            let ohw = win.h * win.w;
            for co in 0..self.out_channels {
                let b = self.bias.value[co];
                dst[co * ohw..(co + 1) * ohw].iter_mut().for_each(|v| *v += b);
            }
        }
        out
    }

    pub fn backward(&mut self, x: &Tensor, g: &Tensor, input_grad: bool, param_grad: bool) -> Tensor {
        let win = self.window(x);
        let (kk, hw) = (win.rows(), x.plane());
        let chunk = win.chunk_rows();
        let mut cols = vec![0.0f32; kk * chunk * win.ow];
        let mut gx = if input_grad { Tensor::zeros(x.shape) } else { Tensor::zeros([0, 0, 0, 0]) };
        let ohw = win.h * win.w;
        for i in 0..x.n() {
            let gs = g.sample(i);
            if param_grad {
                for co in 0..self.out_channels {
                    self.bias.grad[co] += gs[co * ohw..(co + 1) * ohw].iter().sum::<f32>();
                }
            }
            let mut r0 = 0;
            while r0 < win.oh {
                let r1 = (r0 + chunk).min(win.oh);
                let n = (r1 - r0) * win.ow;
                win.im2col(gs, r0, r1, &mut cols[..kk * n]);
                let xview = View { rows: self.in_channels, cols: n, rs: hw as isize, cs: 1 };
                if param_grad {
                    sgemm(
                        1.0,
                        &x.sample(i)[r0 * win.ow..],
                        xview,
                        &cols[..kk * n],
                        View::transposed(kk, n),
                        1.0,
                        &mut self.weight.grad,
                        View::row_major(self.in_channels, kk),
                    );
                }
                if input_grad {
                    sgemm(
                        1.0,
                        &self.weight.value,
                        View::row_major(self.in_channels, kk),
                        &cols[..kk * n],
                        View::row_major(kk, n),
                        0.0,
                        &mut gx.sample_mut(i)[r0 * win.ow..],
                        xview,
                    );
                }
                r0 = r1;
            }
        }
        gx
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
}

#[derive(Debug)]
pub struct NormTape {
    xhat: Tensor,
    inv_std: Vec<f32>,
    batch_stats: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            channels,
            gamma: Param::filled(vec![channels], 1.0),
            beta: Param::filled(vec![channels], 0.0),
            running_mean: Param::filled(vec![channels], 0.0),
            running_var: Param::filled(vec![channels], 1.0),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let plane = x.plane();
        for i in 0..x.n() {
            let s = out.sample_mut(i);
            for c in 0..self.channels {
                let inv = 1.0 / (self.running_var.value[c] + BN_EPS).sqrt();
                let (m, g, b) = (self.running_mean.value[c], self.gamma.value[c], self.beta.value[c]);
                s[c * plane..(c + 1) * plane].iter_mut().for_each(|v| *v = (*v - m) * inv * g + b);
            }
        }
        out
    }

    /// Training mode normalizes with batch statistics and updates the
    /// running averages; eval mode uses the running averages.
    pub fn forward_tape(&mut self, x: &Tensor, train: bool) -> (Tensor, NormTape) {
        let plane = x.plane();
        let count = (x.n() * plane) as f64;
        let mut mean = vec![0f32; self.channels];
        let mut inv_std = vec![0f32; self.channels];
        for c in 0..self.channels {
            if train {
                let (mut s, mut s2) = (0f64, 0f64);
                for i in 0..x.n() {
                    for chunk in x.sample(i)[c * plane..(c + 1) * plane].chunks(1024) {
                        let (a, b) = lane_sums(chunk, chunk);
                        s += a;
                        s2 += b;
                    }
                }
                let m = s / count;
                let var = (s2 / count - m * m).max(0.0);
                mean[c] = m as f32;
                inv_std[c] = (1.0 / (var + BN_EPS as f64).sqrt()) as f32;
                let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                let rm = &mut self.running_mean.value[c];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m as f32;
                let rv = &mut self.running_var.value[c];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased as f32;
            } else {
                mean[c] = self.running_mean.value[c];
                inv_std[c] = 1.0 / (self.running_var.value[c] + BN_EPS).sqrt();
            }
        }
        let mut xhat = Tensor::zeros(x.shape);
        let mut out = Tensor::zeros(x.shape);
        for i in 0..x.n() {
            let (xs, hs, os) = (x.sample(i), xhat.sample_mut(i), out.sample_mut(i));
            for c in 0..self.channels {
                let r = c * plane..(c + 1) * plane;
                let (m, is, g, b) = (mean[c], inv_std[c], self.gamma.value[c], self.beta.value[c]);
                for ((h, o), &v) in hs[r.clone()].iter_mut().zip(&mut os[r.clone()]).zip(&xs[r]) {
                    *h = (v - m) * is;
                    *o = *h * g + b;
                }
            }
        }
        (out, NormTape { xhat, inv_std, batch_stats: train })
    }

    pub fn backward(&mut self, tape: &NormTape, g: &Tensor, param_grad: bool) -> Tensor {
        let plane = g.plane();
        let count = (g.n() * plane) as f32;
        let mut gx = g.clone();
        for c in 0..self.channels {
            let (mut sg, mut sgx) = (0f64, 0f64);
            for i in 0..g.n() {
                let gs = &g.sample(i)[c * plane..(c + 1) * plane];
                let xs = &tape.xhat.sample(i)[c * plane..(c + 1) * plane];
                for (ga, xa) in gs.chunks(1024).zip(xs.chunks(1024)) {
                    let (a, b) = lane_sums(ga, xa);
                    sg += a;
                    sgx += b;
                }
            }
            if param_grad {
                self.beta.grad[c] += sg as f32;
                self.gamma.grad[c] += sgx as f32;
            }
            let scale = self.gamma.value[c] * tape.inv_std[c];
            let (mg, mgx) = ((sg / count as f64) as f32, (sgx / count as f64) as f32);
            for i in 0..g.n() {
                let xs = &tape.xhat.sample(i)[c * plane..(c + 1) * plane];
                let out = &mut gx.sample_mut(i)[c * plane..(c + 1) * plane];
                if tape.batch_stats {
                    for (o, &h) in out.iter_mut().zip(xs) {
                        *o = scale * (*o - mg - h * mgx);
                    }
                } else {
                    out.iter_mut().for_each(|o| *o *= scale);
                }
            }
        }
        gx
    }
}

/// `(sum(a), sum(a * b))` over equal-length slices with eight-lane partial
/// sums (vectorizable, f64 only at the end).
fn lane_sums(a: &[f32], b: &[f32]) -> (f64, f64) {
    let mut s = [0f32; 8];
    let mut p = [0f32; 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            s[l] += x[l];
            p[l] += x[l] * y[l];
        }
    }
    let mut ts: f64 = s.iter().map(|&v| v as f64).sum();
    let mut tp: f64 = p.iter().map(|&v| v as f64).sum();
    for (x, y) in ar.iter().zip(br) {
        ts += *x as f64;
        tp += (*x as f64) * (*y as f64);
    }
    (ts, tp)
}

fn relu_inplace(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
    Norm(BatchNorm2d),
    Relu,
    Residual(ResidualBlock),
}

#[derive(Debug)]
pub enum Tape {
    Conv(Tensor),
    ConvT(Tensor),
    Norm(NormTape),
    Relu(Tensor),
    Residual(Vec<Tape>),
}

/// `conv3 - BN - ReLU - conv3 - BN`, added to the block input.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub branch: Sequential,
}

impl ResidualBlock {
    pub fn new<R: Rng + ?Sized>(width: usize, rng: &mut R) -> Self {
        ResidualBlock {
            branch: Sequential::new(vec![
                Layer::Conv(Conv2d::new(width, width, 3, 1, rng)),
                Layer::Norm(BatchNorm2d::new(width)),
                Layer::Relu,
                Layer::Conv(Conv2d::new(width, width, 3, 1, rng)),
                Layer::Norm(BatchNorm2d::new(width)),
            ]),
        }
    }

    pub fn width(&self) -> usize {
        match &self.branch.layers[0] {
            Layer::Conv(c) => c.in_channels,
            _ => unreachable!("residual branch starts with a convolution"),
        }
    }
}

impl Layer {
    pub fn out_channels(&self, cin: usize) -> usize {
        match self {
            Layer::Conv(c) => c.out_channels,
            Layer::ConvT(c) => c.out_channels,
            _ => cin,
        }
    }

    /// Trainable element count.
    pub fn num_parameters(&self) -> usize {
        match self {
            Layer::Conv(c) => c.weight.len() + c.bias.len(),
            Layer::ConvT(c) => c.weight.len() + c.bias.len(),
            Layer::Norm(n) => n.gamma.len() + n.beta.len(),
            Layer::Relu => 0,
            Layer::Residual(r) => r.branch.num_parameters(),
        }
    }

    fn forward(&self, x: Tensor) -> Tensor {
        match self {
            Layer::Conv(c) => c.forward(&x),
            Layer::ConvT(c) => c.forward(&x),
            Layer::Norm(n) => n.forward(&x),
            Layer::Relu => {
                let mut x = x;
                relu_inplace(&mut x);
                x
            }
            Layer::Residual(r) => {
                let mut y = r.branch.forward(&x);
                y.add_assign(&x);
                y
            }
        }
    }

    fn forward_tape(&mut self, x: Tensor, train: bool) -> (Tensor, Tape) {
        match self {
            Layer::Conv(c) => (c.forward(&x), Tape::Conv(x)),
            Layer::ConvT(c) => (c.forward(&x), Tape::ConvT(x)),
            Layer::Norm(n) => {
                let (y, t) = n.forward_tape(&x, train);
                (y, Tape::Norm(t))
            }
            Layer::Relu => {
                let mut x = x;
                relu_inplace(&mut x);
                (x.clone(), Tape::Relu(x))
            }
            Layer::Residual(r) => {
                let (mut y, tapes) = r.branch.forward_tape(x.clone(), train);
                y.add_assign(&x);
                (y, Tape::Residual(tapes))
            }
        }
    }

    fn backward(&mut self, tape: Tape, g: Tensor, input_grad: bool, param_grad: bool) -> Tensor {
        match (self, tape) {
            (Layer::Conv(c), Tape::Conv(x)) => c.backward(&x, &g, input_grad, param_grad),
            (Layer::ConvT(c), Tape::ConvT(x)) => c.backward(&x, &g, input_grad, param_grad),
            (Layer::Norm(n), Tape::Norm(t)) => n.backward(&t, &g, param_grad),
            (Layer::Relu, Tape::Relu(y)) => {
                let mut g = g;
                g.data.iter_mut().zip(&y.data).for_each(|(gv, &yv)| *gv = if yv > 0.0 { *gv } else { 0.0 });
                g
            }
            (Layer::Residual(r), Tape::Residual(tapes)) => {
                let mut gb = r.branch.backward_inner(tapes, g.clone(), true, param_grad);
                gb.add_assign(&g);
                gb
            }
            _ => panic!("tape does not match layer"),
        }
    }

    fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        match self {
            Layer::Conv(c) => {
                f(&format!("{prefix}.weight"), &mut c.weight, true);
                f(&format!("{prefix}.bias"), &mut c.bias, true);
            }
            Layer::ConvT(c) => {
                f(&format!("{prefix}.weight"), &mut c.weight, true);
                f(&format!("{prefix}.bias"), &mut c.bias, true);
            }
            Layer::Norm(n) => {
                f(&format!("{prefix}.gamma"), &mut n.gamma, true);
                f(&format!("{prefix}.beta"), &mut n.beta, true);
                f(&format!("{prefix}.running_mean"), &mut n.running_mean, false);
                f(&format!("{prefix}.running_var"), &mut n.running_var, false);
            }
            Layer::Relu => {}
            Layer::Residual(r) => r.branch.visit(prefix, f),
        }
    }
}

/// A chain of layers.
#[derive(Clone, Debug)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    /// Eval-mode forward pass that keeps no intermediates.
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.forward(h);
        }
        h
    }

    pub fn forward_tape(&mut self, x: Tensor, train: bool) -> (Tensor, Vec<Tape>) {
        let mut tapes = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for l in &mut self.layers {
            let (y, t) = l.forward_tape(h, train);
            tapes.push(t);
            h = y;
        }
        (h, tapes)
    }

    /// Backpropagates `g`; returns the input gradient (empty when not requested).
    pub fn backward(&mut self, tapes: Vec<Tape>, g: Tensor, input_grad: bool, param_grad: bool) -> Tensor {
        self.backward_inner(tapes, g, input_grad, param_grad)
    }

    fn backward_inner(&mut self, tapes: Vec<Tape>, g: Tensor, input_grad: bool, param_grad: bool) -> Tensor {
        let mut g = g;
        for (i, (l, t)) in self.layers.iter_mut().zip(tapes).enumerate().rev() {
            g = l.backward(t, g, input_grad || i > 0, param_grad);
        }
        g
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit("", &mut |_, p, _| p.zero_grad());
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(Layer::num_parameters).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution used as an independent oracle.
    fn naive_conv(x: &Tensor, c: &Conv2d) -> Tensor {
        let (k, s, p) = (c.kernel, c.stride, (c.kernel / 2) as isize);
        let oh = (x.h() + 2 * (k / 2) - k) / s + 1;
        let ow = (x.w() + 2 * (k / 2) - k) / s + 1;
        let mut out = Tensor::zeros([x.n(), c.out_channels, oh, ow]);
        for n in 0..x.n() {
            for co in 0..c.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = c.bias.value[co] as f64;
                        for ci in 0..c.in_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p;
                                    let ix = (ox * s + kx) as isize - p;
                                    if iy < 0 || ix < 0 || iy >= x.h() as isize || ix >= x.w() as isize {
                                        continue;
                                    }
                                    let wv = c.weight.value[((co * c.in_channels + ci) * k + ky) * k + kx];
                                    let xv = x.data[((n * x.c() + ci) * x.h() + iy as usize) * x.w() + ix as usize];
                                    acc += (wv * xv) as f64;
                                }
                            }
                        }
                        out.data[((n * c.out_channels + co) * oh + oy) * ow + ox] = acc as f32;
                    }
                }
            }
        }
        out
    }

    /// Direct scatter form of the transposed convolution.
    fn naive_convt(x: &Tensor, c: &ConvTranspose2d) -> Tensor {
        let (k, s, p) = (c.kernel, c.stride, (c.kernel / 2) as isize);
        let (oh, ow) = (x.h() * s, x.w() * s);
        let mut out = Tensor::zeros([x.n(), c.out_channels, oh, ow]);
        for n in 0..x.n() {
            for co in 0..c.out_channels {
                for v in &mut out.data[((n * c.out_channels + co) * oh * ow)..((n * c.out_channels + co + 1) * oh * ow)] {
                    *v = c.bias.value[co];
                }
            }
            for ci in 0..c.in_channels {
                for iy in 0..x.h() {
                    for ix in 0..x.w() {
                        let xv = x.data[((n * x.c() + ci) * x.h() + iy) * x.w() + ix];
                        for co in 0..c.out_channels {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let oy = (iy * s + ky) as isize - p;
                                    let ox = (ix * s + kx) as isize - p;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                        continue;
                                    }
                                    let wv = c.weight.value[((ci * c.out_channels + co) * k + ky) * k + kx];
                                    out.data[((n * c.out_channels + co) * oh + oy as usize) * ow + ox as usize] += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f32 {
        assert_eq!(a.shape, b.shape);
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(cin, cout, k, s, h, w) in &[(3, 4, 3, 1, 7, 5), (2, 3, 7, 1, 9, 8), (4, 2, 3, 2, 8, 6)] {
            let conv = Conv2d::new(cin, cout, k, s, &mut rng);
            let x = rand_tensor([2, cin, h, w], &mut rng);
            assert!(max_diff(&conv.forward(&x), &naive_conv(&x, &conv)) < 1e-4);
        }
    }

    #[test]
    fn direct_and_gemm_paths_agree() {
        if !direct::available() {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(cin, cout, k, h, w) in &[(25, 8, 7, 13, 21), (8, 3, 7, 9, 17), (5, 6, 3, 16, 16), (3, 1, 3, 5, 3)] {
            let conv = Conv2d::new(cin, cout, k, 1, &mut rng);
            let x = rand_tensor([2, cin, h, w], &mut rng);
            let y = conv.forward(&x);
            assert!(max_diff(&y, &conv.forward_gemm(&x)) < 1e-4);
            let g = rand_tensor(y.shape, &mut rng);
            let mut a = conv.clone();
            let mut b = conv.clone();
            let ga = a.backward(&x, &g, true, true);
            let gb = b.backward_gemm(&x, &g, true, true);
            assert!(max_diff(&ga, &gb) < 1e-4);
            let wd = a.weight.grad.iter().zip(&b.weight.grad).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
            let bd = a.bias.grad.iter().zip(&b.bias.grad).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
            assert!(wd < 1e-3 && bd < 1e-4, "{wd} {bd}");
        }
    }

    #[test]
    fn conv_transpose_matches_naive_and_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ct = ConvTranspose2d::new(3, 2, 3, 2, &mut rng);
        let x = rand_tensor([2, 3, 4, 5], &mut rng);
        let y = ct.forward(&x);
        assert_eq!(y.shape, [2, 2, 8, 10]);
        assert!(max_diff(&y, &naive_convt(&x, &ct)) < 1e-5);
    }

    /// Checks analytic input gradients of `sum(r * f(x))` against central differences.
    fn grad_check(name: &str, layer: &Layer, x: &Tensor, train: bool, rng: &mut ChaCha8Rng) {
        let mut l = layer.clone();
        let (y, tape) = l.forward_tape(x.clone(), train);
        let r = rand_tensor(y.shape, rng);
        let gx = l.backward(tape, r.clone(), true, true);
        let objective = |xp: &Tensor| -> f64 {
            let (y, _) = layer.clone().forward_tape(xp.clone(), train);
            y.data.iter().zip(&r.data).map(|(a, b)| (*a as f64) * (*b as f64)).sum()
        };
        let fd = |idx: usize, eps: f32| {
            let mut xp = x.clone();
            xp.data[idx] += eps;
            let mut xm = x.clone();
            xm.data[idx] -= eps;
            (objective(&xp) - objective(&xm)) / (2.0 * eps as f64)
        };
        let close = |a: f64, b: f64| (a - b).abs() <= 2e-2 * a.abs().max(b.abs()).max(0.1);
        let mut checked = 0;
        for idx in (0..x.data.len()).step_by((x.data.len() / 17).max(1)) {
            let (coarse, fine) = (fd(idx, 1e-2), fd(idx, 5e-3));
            if !close(coarse, fine) {
                // A ReLU kink lies inside the stencil.
                continue;
            }
            checked += 1;
            let an = gx.data[idx] as f64;
            assert!(close(fine, an), "{name} idx {idx}: fd {fine} vs {an}");
        }
        assert!(checked >= 12, "{name}: only {checked} smooth probes");
    }

    #[test]
    fn layer_input_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor([2, 3, 6, 6], &mut rng);
        grad_check("conv", &Layer::Conv(Conv2d::new(3, 4, 3, 2, &mut rng)), &x, true, &mut rng);
        grad_check("convt", &Layer::ConvT(ConvTranspose2d::new(3, 2, 3, 2, &mut rng)), &x, true, &mut rng);
        grad_check("bn-train", &Layer::Norm(BatchNorm2d::new(3)), &x, true, &mut rng);
        grad_check("bn-eval", &Layer::Norm(BatchNorm2d::new(3)), &x, false, &mut rng);
        grad_check("residual", &Layer::Residual(ResidualBlock::new(3, &mut rng)), &x, false, &mut rng);
    }

    #[test]
    fn zero_branch_residual_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut block = ResidualBlock::new(5, &mut rng);
        block.branch.visit("", &mut |_, p, trainable| {
            if trainable {
                p.value.iter_mut().for_each(|v| *v = 0.0)
            }
        });
        let x = rand_tensor([1, 5, 4, 4], &mut rng);
        let y = Layer::Residual(block).forward(x.clone());
        assert_eq!(y, x);
    }

    #[test]
    fn chunked_convolution_matches_single_pass() {
        // Large enough that the scratch budget forces several row chunks.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv2d::new(64, 2, 7, 1, &mut rng);
        let x = rand_tensor([1, 64, 200, 40], &mut rng);
        let win = conv.window(&x);
        assert!(win.chunk_rows() < win.oh);
        let y = conv.forward(&x);
        let probe = naive_conv(&x.slice_channels(0..64), &conv);
        assert!(max_diff(&y, &probe) < 1e-3);
    }
}

