//! Dense n-dimensional tensor storage.

use super::elem::Elem;
use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense row-major tensor. Values are immutable by convention once a tensor
/// enters a graph; gradient buffers are allocated separately.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Elem> Tensor<E> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![E::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform samples in [lo, hi), deterministic from the supplied stream.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| E::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {} values into {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts element type, used when moving models between precisions.
    pub fn cast<F: Elem>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }
}
