//! Dense row-major tensors over a generic scalar.
//!
//! Feature maps use HWC layout: index (y, x, c) maps to `(y*w + x)*c_dim + c`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// First element; convenient for scalar-shaped tensors.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// In-place `self += other` (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += *b;
        }
    }

    pub fn scale_in_place(&mut self, s: T) {
        for v in self.data.iter_mut() {
            *v *= s;
        }
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.as_f32()).collect()
    }

    pub fn from_f32_slice(shape: &[usize], data: &[f32]) -> Result<Self> {
        Tensor::from_vec(shape, data.iter().map(|&v| T::of(v as f64)).collect())
    }
}

/// A D-dimensional vector in the joint image-text embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> Embedding<T> {
    pub fn new(values: Vec<T>) -> Self {
        Embedding { values }
    }

    pub fn zeros(dim: usize) -> Self {
        Embedding {
            values: vec![T::zero(); dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Embedding<T>) -> T {
        self.values
            .iter()
            .zip(other.values.iter())
            .map(|(&a, &b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn add(&self, other: &Embedding<T>) -> Embedding<T> {
        Embedding {
            values: self
                .values
                .iter()
                .zip(other.values.iter())
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &Embedding<T>) -> Embedding<T> {
        Embedding {
            values: self
                .values
                .iter()
                .zip(other.values.iter())
                .map(|(&a, &b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&self, s: T) -> Embedding<T> {
        Embedding {
            values: self.values.iter().map(|&v| v * s).collect(),
        }
    }

    /// Cosine similarity; zero-norm operands are an invalid input.
    pub fn cosine_similarity(&self, other: &Embedding<T>) -> Result<T> {
        let (na, nb) = (self.norm(), other.norm());
        if na == T::zero() || nb == T::zero() {
            return Err(Error::invalid("cosine similarity of zero-norm vector"));
        }
        Ok(self.dot(other) / (na * nb))
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// An H x W x C activation tensor produced by the front half of the image
/// encoder; also the shape of one learned augmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        FeatureMap {
            h,
            w,
            c,
            data: vec![T::zero(); h * w * c],
        }
    }

    pub fn from_vec(h: usize, w: usize, c: usize, data: Vec<T>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::invalid("feature map dims must be positive"));
        }
        if data.len() != h * w * c {
            return Err(Error::invalid(format!(
                "feature map {}x{}x{} needs {} elements, got {}",
                h,
                w,
                c,
                h * w * c,
                data.len()
            )));
        }
        Ok(FeatureMap { h, w, c, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.w + x) * self.c + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.w + x) * self.c + c] = v;
    }

    pub fn to_tensor(&self) -> Tensor<T> {
        Tensor::from_vec(&[self.h, self.w, self.c], self.data.clone()).expect("consistent dims")
    }

    pub fn from_tensor(t: &Tensor<T>) -> Result<Self> {
        if t.shape().len() != 3 {
            return Err(Error::invalid("feature map tensor must be rank 3"));
        }
        FeatureMap::from_vec(t.shape()[0], t.shape()[1], t.shape()[2], t.data().to_vec())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_len() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn feature_map_indexing_is_hwc() {
        let mut fm = FeatureMap::<f64>::zeros(2, 3, 4);
        fm.set(1, 2, 3, 7.0);
        assert_eq!(fm.data()[(1 * 3 + 2) * 4 + 3], 7.0);
        assert_eq!(fm.at(1, 2, 3), 7.0);
    }

    #[test]
    fn embedding_ops() {
        let a = Embedding::new(vec![3.0f64, 4.0]);
        assert_eq!(a.norm(), 5.0);
        let b = Embedding::new(vec![1.0f64, 0.0]);
        assert_eq!(a.dot(&b), 3.0);
        assert!(Embedding::<f64>::zeros(2).cosine_similarity(&b).is_err());
    }
}
