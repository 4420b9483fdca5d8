//! Dense row-major tensors over `f64`.

use crate::error::{Error, Result};

/// A dense real-valued tensor with row-major, contiguous storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that the element count matches the shape and
    /// that every value is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "tensor contains non-finite value {bad}"
            )));
        }
        Ok(Self { shape, data })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterprets the storage under a new shape with the same element count.
    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    /// Largest absolute value, 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Applies `f` to every element in place.
    pub fn map_inplace(&mut self, f: impl Fn(f64) -> f64) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// Row-major stride of the given axis (product of the extents after it).
    pub fn stride(&self, axis: usize) -> usize {
        self.shape[axis + 1..].iter().product()
    }

    /// Channel index along `axis` for a flat element index.
    pub fn channel_of(&self, flat: usize, axis: usize) -> usize {
        (flat / self.stride(axis)) % self.shape[axis]
    }

    /// Largest absolute value within channel `ch` along `axis`.
    pub fn max_abs_channel(&self, axis: usize, ch: usize) -> f64 {
        let stride = self.stride(axis);
        let extent = self.shape[axis];
        self.data
            .iter()
            .enumerate()
            .filter(|(i, _)| (i / stride) % extent == ch)
            .fold(0.0, |m, (_, v)| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_shape_mismatch() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn channel_indexing_row_major() {
        // shape [2, 3]: axis 0 channels are rows, axis 1 channels are columns
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.channel_of(4, 0), 1);
        assert_eq!(t.channel_of(4, 1), 1);
        assert_eq!(t.max_abs_channel(0, 0), 2.0);
        assert_eq!(t.max_abs_channel(1, 2), 5.0);
    }

    #[test]
    fn max_abs_of_empty_is_zero() {
        assert_eq!(Tensor::zeros(vec![0]).max_abs(), 0.0);
    }
}
