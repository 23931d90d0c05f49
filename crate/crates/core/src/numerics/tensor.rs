//! Dense row-major `f64` tensors.
//!
//! Every constructor rejects NaN and infinity, so a `Tensor` always holds
//! finite values. Shapes are plain `Vec<usize>`; scalars use an empty shape.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: shape,
                found: vec![data.len()],
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::non_finite("Tensor::new"));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(value: f64) -> Result<Self> {
        Tensor::new(vec![], vec![value])
    }

    /// 1-D tensor from a value vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    /// 2-D tensor in row-major order.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Scalar tensors expose their single value directly.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                context: "Tensor::scalar_value",
                expected: vec![],
                found: self.shape.clone(),
            })
        }
    }

    /// Row view of a 2-D tensor.
    pub fn row(&self, r: usize) -> Result<&[f64]> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "Tensor::row",
                expected: vec![0, 0],
                found: self.shape.clone(),
            });
        }
        let cols = self.shape[1];
        let start = r * cols;
        if start + cols > self.data.len() {
            return Err(Error::invalid("r", format!("row {r} out of bounds")));
        }
        Ok(&self.data[start..start + cols])
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Re-checks the finiteness invariant after in-place mutation.
    pub(crate) fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::non_finite(context.to_string()))
        }
    }
}
