//! Dense row-major tensors with an optional gradient buffer.

use crate::error::{Error, Result};

/// An N-dimensional array of `f32` values in contiguous row-major order.
///
/// Invariants enforced at construction:
/// - every dimension size is positive (no empty tensors),
/// - `values.len() == product(shape)`,
/// - `grad`, when present, has the same element count as `values`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} implies {numel} elements but {} were given",
                values.len()
            )));
        }
        Ok(Tensor {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    /// A rank-1 tensor of a single element.
    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            grad: None,
        }
    }

    pub fn from_slice(shape: &[usize], values: &[f32]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        false // positive dims are enforced at construction
    }

    pub fn is_scalar(&self) -> bool {
        self.values.len() == 1
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// The gradient buffer, or all zeros if no gradient has been recorded.
    pub fn grad_or_zeros(&self) -> Vec<f32> {
        match &self.grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.values.len()],
        }
    }

    /// Adds `delta` into the gradient buffer, allocating zeros on first use.
    /// Accumulation across repeated backward passes is deliberate; the
    /// trainer zeroes gradients explicitly at each step.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: vec![delta.len()],
                context: "accumulate_grad",
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_zero_dimension() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 2], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::from_slice(&[2], &[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[0.5, 0.5]).unwrap();
        t.accumulate_grad(&[1.0, -0.5]).unwrap();
        assert_eq!(t.grad(), Some(&[1.5, 0.0][..]));
        t.zero_grad();
        assert_eq!(t.grad(), None);
    }
}
