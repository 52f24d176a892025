//! Dense row-major `f32` tensors.

use crate::error::{Error, Result};

/// Dense n-dimensional array with an optional gradient buffer.
///
/// `data.len()` always equals the product of `shape`, and `grad`, when present,
/// has the same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor from a buffer produced internally. Shape/length agreement is
    /// checked but finiteness is not; use [`Tensor::from_external`] for user input.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::dim(format!("shape {shape:?} has a zero extent")));
        }
        if numel(&shape) != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(&shape),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Like [`Tensor::new`] but rejects NaN and infinite values.
    pub fn from_external(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Self::new(shape, data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        Self::new(shape.to_vec(), vec![value; numel(shape)]).expect("valid shape")
    }

    pub fn scalar(value: f32) -> Self {
        Self::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.data.len());
        match self.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Replaces the values, keeping shape. Length must match.
    pub fn set_data(&mut self, data: Vec<f32>) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::dim(format!(
                "set_data: expected {} values, got {}",
                self.data.len(),
                data.len()
            )));
        }
        self.data = data;
        Ok(())
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    /// Row-major element access for 2-D tensors.
    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Splits a leading batch axis, returning rows `[start, end)`.
    pub fn batch_slice(&self, start: usize, end: usize) -> Result<Tensor> {
        let n = self.shape[0];
        if start >= end || end > n {
            return Err(Error::dim(format!("batch slice {start}..{end} of {n}")));
        }
        let per = self.data.len() / n;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * per..end * per].to_vec())
    }
}
