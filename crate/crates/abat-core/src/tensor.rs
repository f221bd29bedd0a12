//! Dense row-major f64 tensors.

use crate::error::{Error, Result};

/// A dense tensor: shape plus row-major double-precision storage.
///
/// Non-finite values are rejected at construction, so anything inside a
/// computation graph started from valid leaves stays finite unless an op
/// itself produces NaN/Inf (which the attack layer checks for).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "zero-sized tensor dimension in {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                expected: format!("{numel} values for shape {shape:?}"),
                actual: format!("{} values", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("tensor construction".into()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            data: vec![0.0; numel],
            shape,
        }
    }

    /// 1-D tensor from a slice.
    pub fn vector(values: &[f64]) -> Result<Self> {
        Tensor::new(vec![values.len()], values.to_vec())
    }

    /// 2-D tensor from rows.
    pub fn matrix(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch {
                op: "Tensor::matrix",
                expected: format!("rows of length {c}"),
                actual: "ragged rows".into(),
            });
        }
        Tensor::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch {
                op: "Tensor::scalar",
                expected: "1 element".into(),
                actual: format!("{:?}", self.shape),
            })
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }
}
