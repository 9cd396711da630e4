use super::{Module, Param, Tensor};

/// Batch normalization over `(n, h, w)` per channel. Also serves as the 1D
/// variant on `[n, features, 1, 1]` batches.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<(Vec<f64>, Vec<f64>)>, // normalized input, 1/std per channel
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

impl Module for BatchNorm {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let [n, c, _, _] = x.shape;
        assert_eq!(c, self.channels(), "batchnorm channels");
        let p = x.plane();
        let count = (n * p) as f64;
        let mut y = Tensor::zeros(x.shape);
        let mut xhat = if train { vec![0.0; x.data.len()] } else { Vec::new() };
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let (mean, var) = if train {
                let mut s = 0.0;
                for i in 0..n {
                    s += x.item(i)[ch * p..(ch + 1) * p].iter().sum::<f64>();
                }
                let mean = s / count;
                let mut v = 0.0;
                for i in 0..n {
                    v += x.item(i)[ch * p..(ch + 1) * p]
                        .iter()
                        .map(|a| (a - mean) * (a - mean))
                        .sum::<f64>();
                }
                let var = v / count;
                let unbiased = if count > 1.0 { v / (count - 1.0) } else { var };
                self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
                (mean, var)
            } else {
                (self.running_mean[ch], self.running_var[ch])
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            let (g, b) = (self.gamma.value[ch], self.beta.value[ch]);
            for i in 0..n {
                let off = i * c * p + ch * p;
                for k in off..off + p {
                    let h = (x.data[k] - mean) * is;
                    if train {
                        xhat[k] = h;
                    }
                    y.data[k] = g * h + b;
                }
            }
        }
        if train {
            self.cache = Some((xhat, inv_std));
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.as_ref().expect("forward(train) before backward");
        let [n, c, _, _] = gy.shape;
        let p = gy.plane();
        let count = (n * p) as f64;
        let mut dx = Tensor::zeros(gy.shape);
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..n {
                let off = i * c * p + ch * p;
                for k in off..off + p {
                    sum_g += gy.data[k];
                    sum_gx += gy.data[k] * xhat[k];
                }
            }
            self.gamma.grad[ch] += sum_gx;
            self.beta.grad[ch] += sum_g;
            let scale = self.gamma.value[ch] * inv_std[ch] / count;
            for i in 0..n {
                let off = i * c * p + ch * p;
                for k in off..off + p {
                    dx.data[k] = scale * (count * gy.data[k] - sum_g - xhat[k] * sum_gx);
                }
            }
        }
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.gamma, &mut self.beta]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.gamma, &self.beta]
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        vec![&self.running_mean, &self.running_var]
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        vec![&mut self.running_mean, &mut self.running_var]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_module;

    fn input() -> Tensor {
        Tensor::from_vec(
            [3, 2, 2, 2],
            (0..24)
                .map(|i| ((i * 7 % 11) as f64 * 0.37).sin() * 2.0 + 0.5)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn normalizes_in_training() {
        let mut bn = BatchNorm::new(2);
        let y = bn.forward(&input(), true);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|i| y.item(i)[ch * 4..ch * 4 + 4].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / 12.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn eval_uses_running_statistics() {
        let mut bn = BatchNorm::new(2);
        let x = input();
        let y = bn.forward(&x, false);
        // fresh running stats: mean 0, var 1
        for (a, b) in y.data.iter().zip(&x.data) {
            assert!((a - b / (1.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_gradients() {
        let mut bn = BatchNorm::new(2);
        bn.gamma.value = vec![1.3, 0.7];
        bn.beta.value = vec![0.1, -0.2];
        let rep = check_module(&mut bn, &input(), 1e-5, 5);
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }
}
