use crate::{Error, Result};

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensor {
    pub shape: [usize; 4],
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!("{shape:?} ({n} values)"), data.len()));
        }
        Ok(Self { shape, data })
    }

    /// `[n, features, 1, 1]` from row-major rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let f = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != f) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Ok(Self {
            shape: [rows.len(), f, 1, 1],
            data: rows.concat(),
        })
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }
    pub fn c(&self) -> usize {
        self.shape[1]
    }
    pub fn h(&self) -> usize {
        self.shape[2]
    }
    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f64] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.data.len(),
            "reshape {:?} -> {shape:?}",
            self.shape
        );
        self.shape = shape;
        self
    }

    /// Flattens each batch item to `[n, c·h·w, 1, 1]`.
    pub fn flatten(self) -> Self {
        let s = [self.n(), self.item_len(), 1, 1];
        self.reshape(s)
    }

    /// Builds a batch from per-item buffers of identical length.
    pub fn stack(items: Vec<Vec<f64>>, item_shape: [usize; 3]) -> Self {
        let n = items.len();
        let mut data = Vec::with_capacity(n * item_shape.iter().product::<usize>());
        for it in items {
            debug_assert_eq!(it.len(), item_shape.iter().product::<usize>());
            data.extend_from_slice(&it);
        }
        Self {
            shape: [n, item_shape[0], item_shape[1], item_shape[2]],
            data,
        }
    }

    /// Channel-wise concatenation of two batches with equal N, H, W.
    pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
        assert_eq!(a.n(), b.n());
        assert_eq!((a.h(), a.w()), (b.h(), b.w()));
        let mut out = Tensor::zeros([a.n(), a.c() + b.c(), a.h(), a.w()]);
        let (la, lb) = (a.item_len(), b.item_len());
        for i in 0..a.n() {
            let o = out.item_mut(i);
            o[..la].copy_from_slice(a.item(i));
            o[la..la + lb].copy_from_slice(b.item(i));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`].
    pub fn split_channels(&self, first: usize) -> (Tensor, Tensor) {
        let p = self.plane();
        let mut a = Tensor::zeros([self.n(), first, self.h(), self.w()]);
        let mut b = Tensor::zeros([self.n(), self.c() - first, self.h(), self.w()]);
        for i in 0..self.n() {
            let it = self.item(i);
            a.item_mut(i).copy_from_slice(&it[..first * p]);
            b.item_mut(i).copy_from_slice(&it[first * p..]);
        }
        (a, b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
