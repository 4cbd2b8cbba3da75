//! Dense NCHW tensors of `f64`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// `[batch, channels, height, width]`. Weights reuse the same layout as
/// `[out, in, kh, kw]`; per-channel vectors are `[1, c, 1, 1]`.
pub type Shape = [usize; 4];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(shape), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::full([1, 1, 1, 1], value)
    }

    /// Samples every element from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel(shape)).map(|_| normal.sample(rng)).collect();
        Tensor { shape, data }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_shape(other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn expect_same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    /// Returns sample `n` of the batch as a `[1, c, h, w]` tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        let [_, c, h, w] = self.shape;
        let len = c * h * w;
        Tensor {
            shape: [1, c, h, w],
            data: self.data[n * len..(n + 1) * len].to_vec(),
        }
    }

    /// Concatenates `[1, c, h, w]`-compatible tensors along the batch axis.
    pub fn stack(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(parts.iter().map(Tensor::numel).sum());
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != [c, h, w] {
                return Err(Error::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            shape: [n, c, h, w],
            data,
        })
    }
}
