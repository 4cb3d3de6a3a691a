//! Flat `f64` vectors and flattened model parameters.
//!
//! [`DenseVector`] is the single numeric currency of the crate: gradients,
//! aggregated gradients, and flattened models all travel as one. Construction
//! via [`DenseVector::new`] enforces the two invariants everything downstream
//! relies on — non-empty and finite — so the aggregation rules can skip
//! per-call validation. Attack code that deliberately produces extreme values
//! still goes through `new` and therefore stays finite by construction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;

/// A non-empty vector of finite 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVector {
    values: Vec<f64>,
}

impl DenseVector {
    /// Wraps `values`, rejecting empty input and non-finite entries.
    pub fn new(values: Vec<f64>) -> Result<Self, CoreError> {
        if values.is_empty() {
            return Err(CoreError::Empty);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite);
        }
        Ok(Self { values })
    }

    /// An all-zero vector of length `len`.
    ///
    /// # Panics
    /// Panics if `len` is zero; a zero-length vector is invalid by
    /// construction, so asking for one is a programming error.
    pub fn zeros(len: usize) -> Self {
        assert!(len > 0, "DenseVector length must be positive");
        Self {
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Always false: emptiness is rejected at construction. Provided so the
    /// type plays well with clippy's `len_without_is_empty` lint.
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> core::slice::Iter<'_, f64> {
        self.values.iter()
    }

    /// Consumes the vector, returning the raw values.
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Euclidean norm.
    pub fn l2_norm(&self) -> f64 {
        crate::math::sqrt(self.l2_norm_squared())
    }

    /// Squared Euclidean norm (no square root; used by validation scoring).
    pub fn l2_norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &Self) -> Result<f64, CoreError> {
        self.check_len(other.len())?;
        let sq: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(crate::math::sqrt(sq))
    }

    /// Returns `factor * self`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Returns `self - factor * other`, the shape of an SGD update.
    pub fn minus_scaled(&self, other: &Self, factor: f64) -> Result<Self, CoreError> {
        self.check_len(other.len())?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - factor * b)
                .collect(),
        })
    }

    fn check_len(&self, other_len: usize) -> Result<(), CoreError> {
        if self.values.len() == other_len {
            Ok(())
        } else {
            Err(CoreError::LengthMismatch {
                expected: self.values.len(),
                actual: other_len,
            })
        }
    }
}

impl core::ops::Index<usize> for DenseVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Logistic-regression parameters: a weight per feature plus a bias.
///
/// The flat wire form used by stores and aggregation is `weights ‖ bias`,
/// i.e. a [`DenseVector`] of length `dim + 1` with the bias last. Gradients
/// use the same layout, so `flat model − γ · flat gradient` is a valid flat
/// model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: DenseVector,
    pub bias: f64,
}

impl ModelParams {
    /// All-zero parameters for `dim` features.
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: DenseVector::zeros(dim),
            bias: 0.0,
        }
    }

    /// Number of features.
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// Flattens to `weights ‖ bias` (length `dim + 1`).
    pub fn to_flat(&self) -> DenseVector {
        let mut values = self.weights.values.clone();
        values.push(self.bias);
        DenseVector { values }
    }

    /// Rebuilds parameters from the flat `weights ‖ bias` layout.
    ///
    /// Fails on vectors of length 1 (weights would be empty).
    pub fn from_flat(flat: &DenseVector) -> Result<Self, CoreError> {
        if flat.len() < 2 {
            return Err(CoreError::LengthMismatch {
                expected: 2,
                actual: flat.len(),
            });
        }
        let (weights, bias) = flat.values.split_at(flat.len() - 1);
        Ok(Self {
            weights: DenseVector {
                values: weights.to_vec(),
            },
            bias: bias[0],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_empty_and_non_finite() {
        assert_eq!(DenseVector::new(vec![]), Err(CoreError::Empty));
        assert_eq!(
            DenseVector::new(vec![1.0, f64::NAN]),
            Err(CoreError::NonFinite)
        );
        assert_eq!(
            DenseVector::new(vec![f64::INFINITY]),
            Err(CoreError::NonFinite)
        );
        assert!(DenseVector::new(vec![0.0, -3.5]).is_ok());
    }

    #[test]
    fn norm_and_distance() {
        let v = DenseVector::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(v.l2_norm(), 5.0);
        assert_eq!(v.l2_norm_squared(), 25.0);
        let o = DenseVector::zeros(2);
        assert_eq!(v.distance(&o).unwrap(), 5.0);
        let bad = DenseVector::zeros(3);
        assert!(matches!(
            v.distance(&bad),
            Err(CoreError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn scaled_and_minus_scaled() {
        let v = DenseVector::new(vec![1.0, -2.0]).unwrap();
        assert_eq!(v.scaled(10.0).as_slice(), &[10.0, -20.0]);
        let g = DenseVector::new(vec![2.0, 4.0]).unwrap();
        let out = v.minus_scaled(&g, 0.5).unwrap();
        assert_eq!(out.as_slice(), &[0.0, -4.0]);
    }

    #[test]
    fn flat_round_trip_places_bias_last() {
        let p = ModelParams {
            weights: DenseVector::new(vec![1.0, 2.0]).unwrap(),
            bias: -3.0,
        };
        let flat = p.to_flat();
        assert_eq!(flat.as_slice(), &[1.0, 2.0, -3.0]);
        assert_eq!(ModelParams::from_flat(&flat).unwrap(), p);
    }

    #[test]
    fn from_flat_needs_at_least_one_weight() {
        let flat = DenseVector::new(vec![7.0]).unwrap();
        assert!(ModelParams::from_flat(&flat).is_err());
    }
}
