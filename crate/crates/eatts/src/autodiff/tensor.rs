//! Dense row-major tensors of rank 1..=3.

use super::real::Real;
use crate::error::{EattsError, Result};
use crate::rng::Rng;

pub const MAX_RANK: usize = 3;

/// Tensor shape, rank 1..=3. Batching is expressed as the leading dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: &[usize]) -> Result<Shape> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(EattsError::Contract(format!(
                "tensor rank must be 1..={MAX_RANK}, got {}",
                dims.len()
            )));
        }
        Ok(Shape(dims.to_vec()))
    }

    pub fn vector(n: usize) -> Shape {
        Shape(vec![n])
    }

    pub fn matrix(rows: usize, cols: usize) -> Shape {
        Shape(vec![rows, cols])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// A scalar is represented as a length-1 vector.
    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn rows(&self) -> usize {
        self.0[0]
    }

    pub fn cols(&self) -> usize {
        *self.0.last().unwrap()
    }
}

/// Dense tensor value. Gradient recording happens when a tensor is staged
/// onto a [`super::graph::Graph`] as a leaf.
#[derive(Debug, Clone)]
pub struct Tensor<T: Real> {
    shape: Shape,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Tensor<T>> {
        if shape.numel() != data.len() {
            return Err(EattsError::Contract(format!(
                "shape {:?} implies {} elements, data has {}",
                shape.dims(),
                shape.numel(),
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Shape) -> Tensor<T> {
        let n = shape.numel();
        Tensor {
            shape,
            data: vec![T::ZERO; n],
            requires_grad: false,
        }
    }

    pub fn scalar(x: T) -> Tensor<T> {
        Tensor {
            shape: Shape::vector(1),
            data: vec![x],
            requires_grad: false,
        }
    }

    pub fn from_vec(data: Vec<T>) -> Tensor<T> {
        Tensor {
            shape: Shape::vector(data.len()),
            data,
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Tensor<T>> {
        Tensor::new(Shape::matrix(rows, cols), data)
    }

    /// Uniform init in [-bound, bound].
    pub fn uniform(shape: Shape, bound: f64, rng: &mut Rng) -> Tensor<T> {
        let n = shape.numel();
        let data = (0..n)
            .map(|_| T::from_f64(rng.range(-bound, bound)))
            .collect();
        Tensor {
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn requires_grad(mut self, yes: bool) -> Tensor<T> {
        self.requires_grad = yes;
        self
    }

    pub fn needs_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
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

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: self.requires_grad,
        }
    }

    /// Lossy precision cast (f32 <-> f64).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        self.map(|x| U::from_f64(x.to_f64()))
    }
}
