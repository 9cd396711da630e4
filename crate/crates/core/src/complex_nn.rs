//! Complex-valued network layers.
//!
//! Layers run on *packed* real tensors: a complex tensor with `C` channels
//! is stored as `2C` real channels, real planes first and imaginary planes
//! after (the [`c2r`] layout). Every complex layer here implements
//! [`Module`] on that layout, so complex and real layers compose in one
//! network and share the optimizer.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{conv_backward, conv_forward};
use crate::nn::gemm::{matmul, matmul_nt, matmul_tn};
use crate::nn::gradcheck::{check_module, GradCheckReport};
use crate::nn::pool::upsample_plane;
pub use crate::nn::Upsample2x;
use crate::nn::{ConvGeometry, Module, Param, Tensor};

/// Multi-channel complex feature map `[n, c, h, w]` as two real planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexTensor {
    pub re: Tensor,
    pub im: Tensor,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape != im.shape {
            return Err(Error::shape(format!("{:?}", re.shape), format!("{:?}", im.shape)));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            re: Tensor::zeros(shape),
            im: Tensor::zeros(shape),
        }
    }

    /// Builds a tensor from values in `[n, c, h, w]` row-major order.
    pub fn from_complex(shape: [usize; 4], values: &[Complex64]) -> Result<Self> {
        let re = Tensor::from_vec(shape, values.iter().map(|z| z.re).collect())?;
        let im = Tensor::from_vec(shape, values.iter().map(|z| z.im).collect())?;
        Ok(Self { re, im })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.re.shape
    }

    pub fn len(&self) -> usize {
        self.re.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.data.is_empty()
    }

    pub fn at(&self, i: usize) -> Complex64 {
        Complex64::new(self.re.data[i], self.im.data[i])
    }

    pub fn values(&self) -> Vec<Complex64> {
        (0..self.len()).map(|i| self.at(i)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }
}

/// Complex to real: `C` complex channels become `2C` real channels.
pub fn c2r(z: &ComplexTensor) -> Tensor {
    Tensor::concat_channels(&z.re, &z.im)
}

/// Real to complex, the inverse of [`c2r`].
pub fn r2c(x: &Tensor) -> Result<ComplexTensor> {
    if x.c() % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "r2c needs an even channel count, got {}",
            x.c()
        )));
    }
    let (re, im) = x.split_channels(x.c() / 2);
    Ok(ComplexTensor { re, im })
}

/// Joins two packed complex tensors along the complex channel axis, giving
/// `[re_a, re_b, im_a, im_b]`.
pub fn cconcat(a: &Tensor, b: &Tensor) -> Tensor {
    let (ra, ia) = a.split_channels(a.c() / 2);
    let (rb, ib) = b.split_channels(b.c() / 2);
    Tensor::concat_channels(&Tensor::concat_channels(&ra, &rb), &Tensor::concat_channels(&ia, &ib))
}

/// Inverse of [`cconcat`]; `first` is the complex channel count of `a`.
pub fn csplit(x: &Tensor, first: usize) -> (Tensor, Tensor) {
    let total = x.c() / 2;
    let (re, im) = x.split_channels(total);
    let (ra, rb) = re.split_channels(first);
    let (ia, ib) = im.split_channels(first);
    (Tensor::concat_channels(&ra, &ia), Tensor::concat_channels(&rb, &ib))
}

fn rayleigh(rng: &mut impl Rng, scale: f64) -> f64 {
    let u: f64 = rng.random();
    scale * (-2.0 * (1.0 - u).ln()).sqrt()
}

/// Complex weights with Rayleigh(`1/√fan_in`) magnitudes and uniform phases,
/// returned as `(real parts, imaginary parts)`.
pub fn init_weights(rng: &mut impl Rng, count: usize, fan_in: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (fan_in as f64).sqrt();
    let mut a = Vec::with_capacity(count);
    let mut b = Vec::with_capacity(count);
    for _ in 0..count {
        let m = rayleigh(rng, scale);
        let theta = rng.random_range(-PI..PI);
        a.push(m * theta.cos());
        b.push(m * theta.sin());
    }
    (a, b)
}

/// Real block matrix `[[A, −B], [B, A]]` of shape `[2·rows, 2·cols, k]`.
fn block_weight(a: &[f64], b: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let mut w = vec![0.0; 4 * rows * cols * k];
    let row_len = 2 * cols * k;
    for o in 0..rows {
        for i in 0..cols {
            let src = (o * cols + i) * k;
            for t in 0..k {
                let (av, bv) = (a[src + t], b[src + t]);
                w[o * row_len + i * k + t] = av;
                w[o * row_len + (cols + i) * k + t] = -bv;
                w[(rows + o) * row_len + i * k + t] = bv;
                w[(rows + o) * row_len + (cols + i) * k + t] = av;
            }
        }
    }
    w
}

/// Folds a block-matrix gradient back onto `(dA, dB)`.
fn fold_block_grad(dw: &[f64], rows: usize, cols: usize, k: usize) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; rows * cols * k];
    let mut db = vec![0.0; rows * cols * k];
    let row_len = 2 * cols * k;
    for o in 0..rows {
        for i in 0..cols {
            let dst = (o * cols + i) * k;
            for t in 0..k {
                da[dst + t] = dw[o * row_len + i * k + t] + dw[(rows + o) * row_len + (cols + i) * k + t];
                db[dst + t] = dw[(rows + o) * row_len + i * k + t] - dw[o * row_len + (cols + i) * k + t];
            }
        }
    }
    (da, db)
}

/// Complex convolution with kernel `W = A + iB`:
/// `re = A∗x − B∗y + bias_re`, `im = B∗x + A∗y + bias_im`.
#[derive(Debug, Clone)]
pub struct CConv2d {
    /// Real kernel bank `[out, in, k, k]`.
    pub a: Param,
    /// Imaginary kernel bank, same layout as `a`.
    pub b: Param,
    /// Complex bias: `out` real parts then `out` imaginary parts.
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    input: Option<Tensor>,
}

impl CConv2d {
    pub fn new(in_channels: usize, out_channels: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let k2 = geometry.kernel * geometry.kernel;
        let (a, b) = init_weights(rng, out_channels * in_channels * k2, in_channels * k2);
        Self {
            a: Param::new(a),
            b: Param::new(b),
            bias: Param::zeros(2 * out_channels),
            in_channels,
            out_channels,
            geometry,
            input: None,
        }
    }

    fn real_weight(&self) -> Vec<f64> {
        let k2 = self.geometry.kernel * self.geometry.kernel;
        block_weight(&self.a.value, &self.b.value, self.out_channels, self.in_channels, k2)
    }

    /// Applies the convolution to an unpacked complex tensor.
    pub fn apply(&self, h: &ComplexTensor) -> Result<ComplexTensor> {
        if h.shape()[1] != self.in_channels {
            return Err(Error::shape(
                format!("{} input channels", self.in_channels),
                format!("{}", h.shape()[1]),
            ));
        }
        let y = conv_forward(
            &c2r(h),
            &self.real_weight(),
            &self.bias.value,
            2 * self.out_channels,
            self.geometry,
        );
        r2c(&y)
    }
}

impl Module for CConv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(x.c(), 2 * self.in_channels, "complex conv input channels");
        let y = conv_forward(
            x,
            &self.real_weight(),
            &self.bias.value,
            2 * self.out_channels,
            self.geometry,
        );
        if train {
            self.input = Some(x.clone());
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward(train) before backward");
        let w = self.real_weight();
        let (dx, dw, dbias) = conv_backward(x, &w, 2 * self.out_channels, self.geometry, gy);
        let k2 = self.geometry.kernel * self.geometry.kernel;
        let (da, db) = fold_block_grad(&dw, self.out_channels, self.in_channels, k2);
        self.a.accumulate(&da);
        self.b.accumulate(&db);
        self.bias.accumulate(&dbias);
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.a, &mut self.b, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.a, &self.b, &self.bias]
    }
}

/// Convenience wrapper around [`CConv2d::apply`].
pub fn cconv(w: &CConv2d, h: &ComplexTensor) -> Result<ComplexTensor> {
    w.apply(h)
}

/// modReLU: `(|z| + b)·z/|z|` where `|z| + b ≥ 0`, else 0; one `b` per channel.
#[derive(Debug, Clone)]
pub struct ModRelu {
    pub b: Param,
    input: Option<Tensor>,
}

impl ModRelu {
    pub fn new(channels: usize) -> Self {
        Self {
            b: Param::zeros(channels),
            input: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.b.len()
    }
}

fn modrelu_scalar(z: Complex64, b: f64) -> Complex64 {
    let r = z.norm();
    if r == 0.0 || r + b < 0.0 {
        Complex64::new(0.0, 0.0)
    } else {
        z * ((r + b) / r)
    }
}

/// modReLU on an unpacked tensor with per-channel offsets `b`.
pub fn modrelu(z: &ComplexTensor, b: &[f64]) -> Result<ComplexTensor> {
    let [n, c, h, w] = z.shape();
    if b.len() != c {
        return Err(Error::shape(format!("{c} offsets"), format!("{}", b.len())));
    }
    let p = h * w;
    let mut out = ComplexTensor::zeros(z.shape());
    for i in 0..n * c * p {
        let v = modrelu_scalar(z.at(i), b[(i / p) % c]);
        out.re.data[i] = v.re;
        out.im.data[i] = v.im;
    }
    Ok(out)
}

impl Module for ModRelu {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let [n, c2, h, w] = x.shape;
        let c = c2 / 2;
        assert_eq!(c, self.channels(), "modReLU channels");
        let p = h * w;
        let mut y = Tensor::zeros(x.shape);
        for i in 0..n {
            let (src, dst) = (x.item(i), y.item_mut(i));
            for ch in 0..c {
                let b = self.b.value[ch];
                for k in 0..p {
                    let (ri, ii) = (ch * p + k, (c + ch) * p + k);
                    let v = modrelu_scalar(Complex64::new(src[ri], src[ii]), b);
                    dst[ri] = v.re;
                    dst[ii] = v.im;
                }
            }
        }
        if train {
            self.input = Some(x.clone());
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward(train) before backward");
        let [n, c2, h, w] = x.shape;
        let c = c2 / 2;
        let p = h * w;
        let mut dx = Tensor::zeros(x.shape);
        for i in 0..n {
            let (src, g, d) = (x.item(i), gy.item(i), dx.item_mut(i));
            for ch in 0..c {
                let b = self.b.value[ch];
                let mut db = 0.0;
                for k in 0..p {
                    let (ri, ii) = (ch * p + k, (c + ch) * p + k);
                    let (xr, xi) = (src[ri], src[ii]);
                    let r = xr.hypot(xi);
                    // subgradient 0 at the kink and at the origin
                    if r == 0.0 || r + b <= 0.0 {
                        continue;
                    }
                    let s = (r + b) / r;
                    let r3 = r * r * r;
                    let (gr, gi) = (g[ri], g[ii]);
                    d[ri] = gr * (s - b * xr * xr / r3) - gi * b * xr * xi / r3;
                    d[ii] = gi * (s - b * xi * xi / r3) - gr * b * xr * xi / r3;
                    db += (gr * xr + gi * xi) / r;
                }
                self.b.grad[ch] += db;
            }
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.b]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.b]
    }
}

/// Modulus max pooling: each window yields its element of largest `|z|`,
/// first in row-major order on ties.
#[derive(Debug, Clone)]
pub struct CMaxPool {
    pub window: usize,
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl CMaxPool {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            argmax: Vec::new(),
            in_shape: [0; 4],
        }
    }

    /// Pools a packed tensor, returning output and the winning in-plane
    /// offsets (one per complex output element).
    fn pool(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let [n, c2, h, w] = x.shape;
        let c = c2 / 2;
        let k = self.window;
        let (oh, ow) = (h / k, w / k);
        let mut y = Tensor::zeros([n, c2, oh, ow]);
        let mut arg = Vec::with_capacity(n * c * oh * ow);
        for i in 0..n {
            let src = x.item(i);
            let dst = y.item_mut(i);
            for ch in 0..c {
                let (re, im) = (&src[ch * h * w..][..h * w], &src[(c + ch) * h * w..][..h * w]);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = (-1.0, 0);
                        for dy in 0..k {
                            for dx in 0..k {
                                let idx = (oy * k + dy) * w + ox * k + dx;
                                let m = re[idx] * re[idx] + im[idx] * im[idx];
                                if m > best.0 {
                                    best = (m, idx);
                                }
                            }
                        }
                        let o = oy * ow + ox;
                        dst[ch * oh * ow + o] = re[best.1];
                        dst[(c + ch) * oh * ow + o] = im[best.1];
                        arg.push(best.1);
                    }
                }
            }
        }
        (y, arg)
    }
}

pub fn cmaxpool(z: &ComplexTensor, window: usize) -> Result<ComplexTensor> {
    let [_, _, h, w] = z.shape();
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(Error::InvalidArgument(format!(
            "pool window {window} does not divide {h}×{w}"
        )));
    }
    r2c(&CMaxPool::new(window).pool(&c2r(z)).0)
}

impl Module for CMaxPool {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert!(
            x.h() % self.window == 0 && x.w() % self.window == 0,
            "pool window must divide input"
        );
        let (y, arg) = self.pool(x);
        if train {
            self.argmax = arg;
            self.in_shape = x.shape;
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let [n, c2, h, w] = self.in_shape;
        let c = c2 / 2;
        let (oh, ow) = (gy.h(), gy.w());
        let mut dx = Tensor::zeros(self.in_shape);
        let mut it = self.argmax.iter();
        for i in 0..n {
            let g = gy.item(i);
            let d = dx.item_mut(i);
            for ch in 0..c {
                for o in 0..oh * ow {
                    let a = *it.next().expect("argmax cache");
                    d[ch * h * w + a] += g[ch * oh * ow + o];
                    d[(c + ch) * h * w + a] += g[(c + ch) * oh * ow + o];
                }
            }
        }
        dx
    }
}

pub fn upsample2x(z: &ComplexTensor) -> ComplexTensor {
    ComplexTensor {
        re: upsample_plane(&z.re),
        im: upsample_plane(&z.im),
    }
}

/// Complex dense layer `z ↦ W·z + bias` on packed `[n, 2·in, 1, 1]` batches.
#[derive(Debug, Clone)]
pub struct CDense {
    /// Real part of `W`, `[out, in]`.
    pub a: Param,
    /// Imaginary part of `W`, `[out, in]`.
    pub b: Param,
    /// `out` real parts then `out` imaginary parts.
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Tensor>,
}

impl CDense {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let (a, b) = init_weights(rng, in_features * out_features, in_features);
        Self::from_parts(a, b, vec![0.0; 2 * out_features], in_features, out_features)
    }

    pub fn from_parts(a: Vec<f64>, b: Vec<f64>, bias: Vec<f64>, in_features: usize, out_features: usize) -> Self {
        assert_eq!(a.len(), in_features * out_features);
        assert_eq!(b.len(), a.len());
        assert_eq!(bias.len(), 2 * out_features);
        Self {
            a: Param::new(a),
            b: Param::new(b),
            bias: Param::new(bias),
            in_features,
            out_features,
            input: None,
        }
    }

    fn real_weight(&self) -> Vec<f64> {
        block_weight(&self.a.value, &self.b.value, self.out_features, self.in_features, 1)
    }

    /// Applies the layer to one complex vector.
    pub fn apply(&self, z: &[Complex64]) -> Result<Vec<Complex64>> {
        if z.len() != self.in_features {
            return Err(Error::shape(format!("{}", self.in_features), format!("{}", z.len())));
        }
        let mut packed: Vec<f64> = z.iter().map(|v| v.re).collect();
        packed.extend(z.iter().map(|v| v.im));
        let mut this = self.clone();
        let y = this.forward(&Tensor::from_vec([1, 2 * self.in_features, 1, 1], packed)?, false);
        let fo = self.out_features;
        Ok((0..fo).map(|o| Complex64::new(y.data[o], y.data[fo + o])).collect())
    }
}

pub fn cdense(w: &CDense, z: &[Complex64]) -> Result<Vec<Complex64>> {
    w.apply(z)
}

impl Module for CDense {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let n = x.n();
        let (fi, fo) = (2 * self.in_features, 2 * self.out_features);
        assert_eq!(x.item_len(), fi, "complex dense input features");
        let mut y = Tensor::zeros([n, fo, 1, 1]);
        for i in 0..n {
            y.item_mut(i).copy_from_slice(&self.bias.value);
        }
        matmul_nt(n, fi, fo, &x.data, &self.real_weight(), &mut y.data, true);
        if train {
            self.input = Some(x.clone());
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward(train) before backward");
        let n = x.n();
        let (fi, fo) = (2 * self.in_features, 2 * self.out_features);
        let mut dw = vec![0.0; fo * fi];
        matmul_tn(fo, n, fi, &gy.data, &x.data, &mut dw, false);
        let (da, db) = fold_block_grad(&dw, self.out_features, self.in_features, 1);
        self.a.accumulate(&da);
        self.b.accumulate(&db);
        for i in 0..n {
            self.bias.accumulate(gy.item(i));
        }
        let mut dx = Tensor::zeros(x.shape);
        matmul(n, fo, fi, &gy.data, &self.real_weight(), &mut dx.data, false);
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.a, &mut self.b, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.a, &self.b, &self.bias]
    }
}

/// Finite-difference check of a complex layer on a packed input, treating
/// real and imaginary parts as independent reals.
pub fn grad_check(layer: &mut dyn Module, input: &ComplexTensor, eps: f64) -> GradCheckReport {
    check_module(layer, &c2r(input), eps, 0x5eed)
}
