//! Real-valued layers with explicit forward/backward passes.
//!
//! Activations are `f64` tensors in NCHW layout. Each layer caches what its
//! backward pass needs during `forward(.., train = true)`; `backward` takes
//! the gradient of the loss with respect to the layer output, accumulates
//! parameter gradients and returns the gradient with respect to the input.

mod act;
pub(crate) mod conv;
mod dense;
pub mod gemm;
pub mod gradcheck;
mod norm;
mod param;
pub(crate) mod pool;
mod tensor;

pub use act::{LeakyRelu, Relu, Sigmoid};
pub use conv::{Conv2d, ConvGeometry, ConvTranspose2d};
pub use dense::Linear;
pub use norm::BatchNorm;
pub use param::{Adam, AdamConfig, Param};
pub use pool::{MaxPool2d, Upsample2x};
pub use tensor::Tensor;

/// A differentiable layer.
pub trait Module: Send {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor;
    fn backward(&mut self, grad_out: &Tensor) -> Tensor;
    fn params_mut(&mut self) -> Vec<&mut Param> {
        Vec::new()
    }
    fn params(&self) -> Vec<&Param> {
        Vec::new()
    }
    /// Non-trainable state that must survive a checkpoint.
    fn buffers(&self) -> Vec<&Vec<f64>> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        Vec::new()
    }
}

/// Total number of trainable scalars.
pub fn param_count(params: &[&Param]) -> usize {
    params.iter().map(|p| p.len()).sum()
}

pub fn zero_grads(params: &mut [&mut Param]) {
    for p in params {
        p.zero_grad();
    }
}

/// Parameter values and buffers of a module, detached from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: Vec<Vec<f64>>,
    pub buffers: Vec<Vec<f64>>,
}

pub fn snapshot(m: &dyn Module) -> Snapshot {
    Snapshot {
        params: m.params().iter().map(|p| p.value.clone()).collect(),
        buffers: m.buffers().into_iter().cloned().collect(),
    }
}

/// Restores values captured by [`snapshot`] on a module of the same layout.
pub fn restore(m: &mut dyn Module, s: &Snapshot) {
    for (p, v) in m.params_mut().into_iter().zip(&s.params) {
        p.value.copy_from_slice(v);
    }
    for (b, v) in m.buffers_mut().into_iter().zip(&s.buffers) {
        b.copy_from_slice(v);
    }
}

/// Layers applied in order.
#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<Box<dyn Module>>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(mut self, layer: impl Module + 'static) -> Self {
        self.layers.push(Box::new(layer));
        self
    }
}

impl Module for Sequential {
    fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, train);
        }
        h
    }

    fn backward(&mut self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g);
        }
        g
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn buffers(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| l.buffers()).collect()
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.buffers_mut()).collect()
    }
}
