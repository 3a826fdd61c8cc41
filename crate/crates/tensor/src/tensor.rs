//! Dense row-major f64 tensor. Values are immutable once built; clones share storage.

use std::sync::Arc;

use crate::error::{Result, TensorError};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) {
            return Err(TensorError::shape(
                "from_vec",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        if data.len() != count {
            return Err(TensorError::shape(
                "from_vec",
                format!("shape {shape:?} wants {count} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let count: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; count]),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let count: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; count]),
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
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

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same storage, new shape. Element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        if count != self.len() {
            return Err(TensorError::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn dims1(&self) -> Result<usize> {
        match self.shape.as_slice() {
            [n] => Ok(*n),
            s => Err(TensorError::shape("dims1", format!("expected rank 1, got {s:?}"))),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [a, b] => Ok((*a, *b)),
            s => Err(TensorError::shape("dims2", format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c] => Ok((*a, *b, *c)),
            s => Err(TensorError::shape("dims3", format!("expected rank 3, got {s:?}"))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            [a, b, c, d] => Ok((*a, *b, *c, *d)),
            s => Err(TensorError::shape("dims4", format!("expected rank 4, got {s:?}"))),
        }
    }

    /// Value at (row, col, channel) of a rank-3 tensor.
    pub fn at3(&self, r: usize, c: usize, ch: usize) -> f64 {
        let (_, w, nc) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(r * w + c) * nc + ch]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }
}
