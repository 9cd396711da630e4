use rand::Rng;

use super::gemm::{matmul, matmul_nt, matmul_tn};
use super::{Module, Param, Tensor};

/// Fully connected layer on `[n, in, 1, 1]` batches; weight `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    pub in_features: usize,
    pub out_features: usize,
    input: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        Self {
            weight: Param::new(
                (0..in_features * out_features)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect(),
            ),
            bias: Param::new((0..out_features).map(|_| rng.random_range(-bound..bound)).collect()),
            in_features,
            out_features,
            input: None,
        }
    }
}

impl Module for Linear {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let n = x.n();
        assert_eq!(x.item_len(), self.in_features, "linear input features");
        let mut y = Tensor::zeros([n, self.out_features, 1, 1]);
        for i in 0..n {
            y.item_mut(i).copy_from_slice(&self.bias.value);
        }
        matmul_nt(
            n,
            self.in_features,
            self.out_features,
            &x.data,
            &self.weight.value,
            &mut y.data,
            true,
        );
        if train {
            self.input = Some(x.clone());
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let x = self.input.as_ref().expect("forward(train) before backward");
        let n = x.n();
        let (fi, fo) = (self.in_features, self.out_features);
        matmul_tn(fo, n, fi, &gy.data, &x.data, &mut self.weight.grad, true);
        for i in 0..n {
            for (b, g) in self.bias.grad.iter_mut().zip(gy.item(i)) {
                *b += g;
            }
        }
        let mut dx = Tensor::zeros(x.shape);
        matmul(n, fo, fi, &gy.data, &self.weight.value, &mut dx.data, false);
        dx
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}
