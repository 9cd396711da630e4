use super::{Module, Tensor};

/// Non-overlapping max pooling with a square window.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub window: usize,
    argmax: Vec<usize>,
    in_shape: [usize; 4],
}

impl MaxPool2d {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            argmax: Vec::new(),
            in_shape: [0; 4],
        }
    }
}

impl Module for MaxPool2d {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let [n, c, h, w] = x.shape;
        let k = self.window;
        assert!(h % k == 0 && w % k == 0, "pool window must divide {h}×{w}");
        let (oh, ow) = (h / k, w / k);
        let mut y = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0; n * c * oh * ow];
        for nc in 0..n * c {
            let src = &x.data[nc * h * w..(nc + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (f64::NEG_INFINITY, 0);
                    for dy in 0..k {
                        for dx in 0..k {
                            let idx = (oy * k + dy) * w + ox * k + dx;
                            if src[idx] > best.0 {
                                best = (src[idx], idx);
                            }
                        }
                    }
                    let o = nc * oh * ow + oy * ow + ox;
                    y.data[o] = best.0;
                    arg[o] = nc * h * w + best.1;
                }
            }
        }
        if train {
            self.argmax = arg;
            self.in_shape = x.shape;
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(self.in_shape);
        for (g, &a) in gy.data.iter().zip(&self.argmax) {
            dx.data[a] += g;
        }
        dx
    }
}

/// Nearest-neighbour ×2 up-sampling of every channel.
#[derive(Debug, Clone, Default)]
pub struct Upsample2x {
    in_shape: [usize; 4],
}

impl Upsample2x {
    pub fn new() -> Self {
        Self::default()
    }
}

pub(crate) fn upsample_plane(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape;
    let mut y = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for nc in 0..n * c {
        let src = &x.data[nc * h * w..][..h * w];
        let dst = &mut y.data[nc * 4 * h * w..][..4 * h * w];
        for yy in 0..2 * h {
            for xx in 0..2 * w {
                dst[yy * 2 * w + xx] = src[(yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

impl Module for Upsample2x {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if train {
            self.in_shape = x.shape;
        }
        upsample_plane(x)
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let [n, c, h, w] = self.in_shape;
        let mut dx = Tensor::zeros(self.in_shape);
        for nc in 0..n * c {
            let src = &gy.data[nc * 4 * h * w..][..4 * h * w];
            let dst = &mut dx.data[nc * h * w..][..h * w];
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    dst[(yy / 2) * w + xx / 2] += src[yy * 2 * w + xx];
                }
            }
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_module;

    #[test]
    fn pool_picks_maximum() {
        let x = Tensor::from_vec([1, 1, 2, 4], vec![1.0, 5.0, -1.0, 0.0, 2.0, 3.0, -3.0, -0.5]).unwrap();
        let y = MaxPool2d::new(2).forward(&x, false);
        assert_eq!(y.data, vec![5.0, 0.0]);
    }

    #[test]
    fn pool_gradients() {
        let x = Tensor::from_vec(
            [2, 2, 4, 4],
            (0..64).map(|i| ((i * 13 % 29) as f64 * 0.71).sin()).collect(),
        )
        .unwrap();
        let rep = check_module(&mut MaxPool2d::new(2), &x, 1e-6, 2);
        assert!(rep.max_rel_error <= 1e-8, "{rep:?}");
    }
}
