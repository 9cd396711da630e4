use super::{Module, Tensor};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Vec<bool>,
}

impl Module for Relu {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if train {
            self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        }
        x.map(|v| v.max(0.0))
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mut g = gy.clone();
        for (v, &m) in g.data.iter_mut().zip(&self.mask) {
            if !m {
                *v = 0.0;
            }
        }
        g
    }
}

#[derive(Debug, Clone)]
pub struct LeakyRelu {
    pub slope: f64,
    mask: Vec<bool>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self {
            slope,
            mask: Vec::new(),
        }
    }
}

impl Module for LeakyRelu {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        if train {
            self.mask = x.data.iter().map(|&v| v > 0.0).collect();
        }
        let s = self.slope;
        x.map(|v| if v > 0.0 { v } else { s * v })
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mut g = gy.clone();
        for (v, &m) in g.data.iter_mut().zip(&self.mask) {
            if !m {
                *v *= self.slope;
            }
        }
        g
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Sigmoid {
    out: Vec<f64>,
}

impl Module for Sigmoid {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let y = x.map(sigmoid);
        if train {
            self.out = y.data.clone();
        }
        y
    }

    fn backward(&mut self, gy: &Tensor) -> Tensor {
        let mut g = gy.clone();
        for (v, &s) in g.data.iter_mut().zip(&self.out) {
            *v *= s * (1.0 - s);
        }
        g
    }
}
