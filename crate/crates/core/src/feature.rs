use compseg_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

/// A `(B, C, H, W)` tensor annotated with its pixel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    data: Tensor<T>,
    spacing_mm: (f64, f64),
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(data: Tensor<T>, spacing_mm: (f64, f64)) -> Result<Self> {
        let (b, c, h, w) = data.dims4()?;
        if b == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("feature map dims must be positive, got {:?}", data.shape())));
        }
        if !(spacing_mm.0 > 0.0 && spacing_mm.1 > 0.0 && spacing_mm.0.is_finite() && spacing_mm.1.is_finite()) {
            return Err(Error::Validation(format!("spacing {spacing_mm:?} must be positive")));
        }
        if !data.all_finite() {
            return Err(Error::Numeric("feature map contains non-finite values".into()));
        }
        Ok(Self { data, spacing_mm })
    }

    /// Unit spacing, for intermediate features where it carries no meaning.
    pub fn unitless(data: Tensor<T>) -> Result<Self> {
        Self::new(data, (1.0, 1.0))
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    pub fn spacing_mm(&self) -> (f64, f64) {
        self.spacing_mm
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4().expect("validated at construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_inputs() {
        assert!(FeatureMap::<f32>::new(Tensor::zeros(vec![1, 0, 2, 2]), (1.0, 1.0)).is_err());
        assert!(FeatureMap::<f32>::new(Tensor::zeros(vec![1, 2, 2]), (1.0, 1.0)).is_err());
        assert!(FeatureMap::<f32>::new(Tensor::zeros(vec![1, 1, 2, 2]), (0.0, 1.0)).is_err());
        assert!(FeatureMap::<f32>::new(Tensor::full(vec![1, 1, 1, 1], f32::NAN), (1.0, 1.0)).is_err());
        let fm = FeatureMap::<f32>::new(Tensor::zeros(vec![2, 3, 4, 5]), (1.25, 1.25)).unwrap();
        assert_eq!(fm.dims(), (2, 3, 4, 5));
    }
}
