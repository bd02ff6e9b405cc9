//! The dense array value type carried by tape nodes.

use super::NdError;

/// A dense row-major array of `f32` with an explicit shape.
///
/// Shapes must have every extent at least 1; scalars are represented by the
/// empty shape `[]` with exactly one element. The `requires_grad` flag only
/// has an effect when the array becomes a tape leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl Array {
    /// Builds an array, validating that `data` matches `shape` and is finite.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, NdError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(NdError::InvalidShape {
                op: "Array::new",
                shape,
                reason: "every extent must be >= 1".into(),
            });
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(NdError::InvalidShape {
                op: "Array::new",
                shape,
                reason: format!("shape wants {expect} elements, data has {}", data.len()),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(NdError::NonFinite { op: "Array::new" });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    /// All-zeros array of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    /// Array of the given shape filled with `value`.
    pub fn full(shape: &[usize], value: f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
        }
    }

    /// Scalar array (empty shape, one element).
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Marks the array as a trainable leaf and returns it.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// Whether this array asks for gradients when used as a leaf.
    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// The shape (empty slice for scalars).
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Flat row-major data.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable flat data (shape is fixed after construction).
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Total number of elements.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True for the empty shape.
    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// The single value of a scalar array.
    pub fn scalar_value(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1, "scalar_value on non-scalar array");
        self.data[0]
    }

    /// Extent along dimension `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data,
            requires_grad: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        let err = Array::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, NdError::InvalidShape { .. }));
        assert!(Array::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_zero_extent_and_non_finite() {
        assert!(Array::new(vec![2, 0], vec![]).is_err());
        assert!(Array::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(Array::new(vec![2], vec![1.0, f32::INFINITY]).is_err());
    }

    #[test]
    fn scalar_is_empty_shape() {
        let s = Array::scalar(3.5);
        assert!(s.is_scalar());
        assert_eq!(s.len(), 1);
        assert_eq!(s.scalar_value(), 3.5);
    }
}
