use rand::Rng;

use super::gemm::{matmul, matmul_nt, matmul_tn};
use super::{Module, Param, Tensor};
use crate::parallel;

/// Square kernel size, stride and zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent of a forward convolution over `n` input pixels.
    pub fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Output extent of the transposed convolution over `n` input pixels.
    pub fn transposed_len(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.padding
    }
}

/// Unfolds one `c×h×w` item into a `(c·k·k) × (oh·ow)` matrix.
pub(crate) fn im2col(x: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, col: &mut [f64]) {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
pub(crate) fn col2im(col: &[f64], c: usize, h: usize, w: usize, g: ConvGeometry, x: &mut [f64]) {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let k = g.kernel;
    let plane = oh * ow;
    for ci in 0..c {
        let dst = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * plane..][..plane];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in row[oy * ow..(oy + 1) * ow].iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn uniform_init(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Forward convolution of a batch with weight `[co, ci, k, k]`.
pub(crate) fn conv_forward(x: &Tensor, weight: &[f64], bias: &[f64], co: usize, g: ConvGeometry) -> Tensor {
    let [n, ci, h, w] = x.shape;
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let kk = ci * g.kernel * g.kernel;
    let items = parallel::map_range(n, |i| {
        let mut col = vec![0.0; kk * oh * ow];
        im2col(x.item(i), ci, h, w, g, &mut col);
        let mut y = vec![0.0; co * oh * ow];
        for (o, b) in bias.iter().enumerate() {
            y[o * oh * ow..(o + 1) * oh * ow].iter_mut().for_each(|v| *v = *b);
        }
        matmul(co, kk, oh * ow, weight, &col, &mut y, true);
        y
    });
    Tensor::stack(items, [co, oh, ow])
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv_backward(
    x: &Tensor,
    weight: &[f64],
    co: usize,
    g: ConvGeometry,
    gy: &Tensor,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let [n, ci, h, w] = x.shape;
    let (oh, ow) = (gy.h(), gy.w());
    let kk = ci * g.kernel * g.kernel;
    let parts = parallel::map_range(n, |i| {
        let mut col = vec![0.0; kk * oh * ow];
        im2col(x.item(i), ci, h, w, g, &mut col);
        let gyi = gy.item(i);
        let mut dw = vec![0.0; co * kk];
        matmul_nt(co, oh * ow, kk, gyi, &col, &mut dw, false);
        let db: Vec<f64> = (0..co)
            .map(|o| gyi[o * oh * ow..(o + 1) * oh * ow].iter().sum())
            .collect();
        matmul_tn(kk, co, oh * ow, weight, gyi, &mut col, false);
        let mut dx = vec![0.0; ci * h * w];
        col2im(&col, ci, h, w, g, &mut dx);
        (dx, dw, db)
    });
    let mut dw = vec![0.0; co * kk];
    let mut db = vec![0.0; co];
    let mut dxs = Vec::with_capacity(n);
    for (dx, w_, b_) in parts {
        dw.iter_mut().zip(&w_).for_each(|(a, b)| *a += b);
        db.iter_mut().zip(&b_).for_each(|(a, b)| *a += b);
        dxs.push(dx);
    }
    (Tensor::stack(dxs, [ci, h, w]), dw, db)
}

/// 2D convolution, weight layout `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    input: Option<Tensor>,
}

impl Conv2d {
    pub fn new(in_channels: usize, out_channels: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let fan_in = in_channels * geometry.kernel * geometry.kernel;
        Self {
            weight: Param::new(uniform_init(rng, out_channels * fan_in, fan_in)),
            bias: Param::new(uniform_init(rng, out_channels, fan_in)),
            in_channels,
            out_channels,
            geometry,
            input: None,
        }
    }
}

impl Module for Conv2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        assert_eq!(x.c(), self.in_channels, "conv input channels");
        let y = conv_forward(
            x,
            &self.weight.value,
            &self.bias.value,
            self.out_channels,
            self.geometry,
        );
        if train {
            self.input = Some(x.clone());
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward(train) before backward");
        let (dx, dw, db) = conv_backward(x, &self.weight.value, self.out_channels, self.geometry, gy);
        self.weight.accumulate(&dw);
        self.bias.accumulate(&db);
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

/// Transposed convolution, weight layout `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Param,
    pub bias: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub geometry: ConvGeometry,
    input: Option<Tensor>,
}

impl ConvTranspose2d {
    pub fn new(in_channels: usize, out_channels: usize, geometry: ConvGeometry, rng: &mut impl Rng) -> Self {
        let fan_in = out_channels * geometry.kernel * geometry.kernel;
        Self {
            weight: Param::new(uniform_init(rng, in_channels * fan_in, fan_in)),
            bias: Param::new(uniform_init(rng, out_channels, fan_in)),
            in_channels,
            out_channels,
            geometry,
            input: None,
        }
    }
}

impl Module for ConvTranspose2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let [n, ci, h, w] = x.shape;
        assert_eq!(ci, self.in_channels, "transposed conv input channels");
        let g = self.geometry;
        let co = self.out_channels;
        let (oh, ow) = (g.transposed_len(h), g.transposed_len(w));
        let kk = co * g.kernel * g.kernel;
        let (weight, bias) = (&self.weight.value, &self.bias.value);
        let items = parallel::map_range(n, |i| {
            let mut col = vec![0.0; kk * h * w];
            matmul_tn(kk, ci, h * w, weight, x.item(i), &mut col, false);
            let mut y = vec![0.0; co * oh * ow];
            col2im(&col, co, oh, ow, g, &mut y);
            for (o, b) in bias.iter().enumerate() {
                y[o * oh * ow..(o + 1) * oh * ow].iter_mut().for_each(|v| *v += b);
            }
            y
        });
        if train {
            self.input = Some(x.clone());
        }
        Tensor::stack(items, [co, oh, ow])
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward(train) before backward");
        let [n, ci, h, w] = x.shape;
        let g = self.geometry;
        let co = self.out_channels;
        let (oh, ow) = (gy.h(), gy.w());
        let kk = co * g.kernel * g.kernel;
        let weight = &self.weight.value;
        let parts = parallel::map_range(n, |i| {
            let mut gcol = vec![0.0; kk * h * w];
            im2col(gy.item(i), co, oh, ow, g, &mut gcol);
            let mut dx = vec![0.0; ci * h * w];
            matmul(ci, kk, h * w, weight, &gcol, &mut dx, false);
            let mut dw = vec![0.0; ci * kk];
            matmul_nt(ci, h * w, kk, x.item(i), &gcol, &mut dw, false);
            let gyi = gy.item(i);
            let db: Vec<f64> = (0..co)
                .map(|o| gyi[o * oh * ow..(o + 1) * oh * ow].iter().sum())
                .collect();
            (dx, dw, db)
        });
        let mut dxs = Vec::with_capacity(n);
        for (dx, dw, db) in parts {
            self.weight.accumulate(&dw);
            self.bias.accumulate(&db);
            dxs.push(dx);
        }
        Tensor::stack(dxs, [ci, h, w])
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_module;
    use rand::SeedableRng;

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(7)
    }

    fn random(shape: [usize; 4], r: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn naive_conv(x: &Tensor, w: &[f64], b: &[f64], co: usize, g: ConvGeometry) -> Tensor {
        let [n, ci, h, wd] = x.shape;
        let (oh, ow) = (g.out_len(h), g.out_len(wd));
        let k = g.kernel;
        let mut y = Tensor::zeros([n, co, oh, ow]);
        for i in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = b[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        s += w[((o * ci + c) * k + ky) * k + kx]
                                            * x.data[((i * ci + c) * h + iy as usize) * wd + ix as usize];
                                    }
                                }
                            }
                        }
                        y.data[((i * co + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_naive() {
        let mut r = rng();
        for g in [
            ConvGeometry::new(3, 1, 1),
            ConvGeometry::new(4, 2, 1),
            ConvGeometry::new(1, 1, 0),
        ] {
            let mut conv = Conv2d::new(3, 4, g, &mut r);
            let x = random([2, 3, 8, 8], &mut r);
            let y = conv.forward(&x, false);
            let want = naive_conv(&x, &conv.weight.value, &conv.bias.value, 4, g);
            assert_eq!(y.shape, want.shape);
            assert!(y.data.iter().zip(&want.data).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, convT(y)> with zero biases and shared weights
        let mut r = rng();
        let g = ConvGeometry::new(4, 2, 1);
        let mut conv = Conv2d::new(2, 3, g, &mut r);
        conv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let mut tconv = ConvTranspose2d::new(3, 2, g, &mut r);
        tconv.weight.value = conv.weight.value.clone();
        tconv.bias.value.iter_mut().for_each(|b| *b = 0.0);
        let x = random([1, 2, 8, 8], &mut r);
        let y = random([1, 3, 4, 4], &mut r);
        let cx = conv.forward(&x, false);
        let ty = tconv.forward(&y, false);
        assert_eq!(ty.shape, x.shape);
        let lhs: f64 = cx.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&ty.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng();
        let mut conv = Conv2d::new(2, 3, ConvGeometry::new(3, 1, 1), &mut r);
        let x = random([2, 2, 5, 5], &mut r);
        let rep = check_module(&mut conv, &x, 1e-5, 3);
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }

    #[test]
    fn strided_conv_gradients() {
        let mut r = rng();
        let mut conv = Conv2d::new(2, 2, ConvGeometry::new(4, 2, 1), &mut r);
        let x = random([2, 2, 8, 8], &mut r);
        let rep = check_module(&mut conv, &x, 1e-5, 3);
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }

    #[test]
    fn transposed_conv_gradients() {
        let mut r = rng();
        let mut t = ConvTranspose2d::new(3, 2, ConvGeometry::new(2, 2, 0), &mut r);
        let x = random([2, 3, 3, 3], &mut r);
        let rep = check_module(&mut t, &x, 1e-5, 3);
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
        assert_eq!(t.forward(&x, false).shape, [2, 2, 6, 6]);
    }
}
