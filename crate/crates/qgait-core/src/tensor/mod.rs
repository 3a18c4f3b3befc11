//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! [`Tensor`] is an immutable row-major `f64` array with a shape. Gradient
//! tracking happens on a [`Tape`]: ops record nodes, `backward` walks the
//! tape in reverse creation order and populates per-node gradients.
//! [`CustomOp`] is the extension point through which quantizer and loss
//! backward rules are installed without autodiff through their forwards.

mod conv;
mod tape;

pub use tape::{CustomOp, Tape, TensorRef};

use alloc::sync::Arc;
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::error::{Error, Result};

/// Dense row-major tensor. Data is shared copy-on-write so reshapes and
/// clones are cheap; values are immutable after construction (parameter
/// updates go through [`Tensor::map_in_place`], which clones on shared).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, validating the shape/data contract: the data length
    /// must equal the product of extents and every value must be finite.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite value in tensor data".into()));
        }
        Ok(Self::from_vec(shape.to_vec(), data))
    }

    /// Internal constructor for op outputs; skips the finite scan.
    pub(crate) fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![0.0; numel])
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::from_vec(shape.to_vec(), vec![value; numel])
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Self::from_vec(Vec::new(), vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Usage(format!(
                "item() on tensor with {} elements",
                self.numel()
            )))
        }
    }

    /// Same data, new shape (element counts must agree).
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.numel(),
                shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Mutate values in place (copy-on-write when shared). Used by the
    /// optimizer and initializers; tape-held values are never aliased
    /// mutably because the tape clones handles.
    pub fn map_in_place(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let data = Arc::make_mut(&mut self.data);
        for (i, v) in data.iter_mut().enumerate() {
            f(i, v);
        }
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| v.is_nan())
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(matches!(
            Tensor::new(&[2, 3], vec![1.0; 5]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        assert!(matches!(
            Tensor::new(&[2], vec![1.0, f64::NAN]),
            Err(Error::Numeric(_))
        ));
        assert!(matches!(
            Tensor::new(&[1], vec![f64::INFINITY]),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn reshape_shares_data() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let r = t.reshaped(&[3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[4]).is_err());
    }

    #[test]
    fn scalar_roundtrip() {
        let s = Tensor::scalar(4.25);
        assert!(s.is_scalar());
        assert_eq!(s.item().unwrap(), 4.25);
    }
}
