//! Binary logistic regression: loss, gradient, SGD step, accuracy.
//!
//! The model is `p(y=1 | x) = sigmoid(w·x + b)` trained under mean binary
//! cross-entropy. The loss is evaluated through the softplus identity
//! `-[y·ln p + (1-y)·ln(1-p)] = softplus(z) - y·z`, which stays finite for
//! any magnitude of `z`, and the gradient has the closed form
//! `mean[(sigmoid(z) - y) · (x ‖ 1)]` — weights first, bias last, matching
//! the flat layout of [`ModelParams::to_flat`].

use alloc::vec;

use crate::dataset::LabeledBatch;
use crate::error::CoreError;
use crate::math::{sigmoid, softplus};
use crate::vector::{DenseVector, ModelParams};

/// Hyperparameters for an SGD training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    /// Step size γ applied to each aggregated gradient.
    pub learning_rate: f64,
    /// Rows per shard; one gradient is computed per shard.
    pub batch_size: usize,
    /// Upper bound on epochs; training may stop earlier on convergence.
    pub max_epochs: usize,
    /// Convergence is evaluated every this many epochs.
    pub convergence_interval: usize,
    /// Minimum loss improvement per interval to keep training.
    pub convergence_tolerance: f64,
}

impl TrainingConfig {
    /// A config with the conventional cadence: convergence checked every 10
    /// epochs against a `1e-4` improvement threshold.
    pub fn new(learning_rate: f64, batch_size: usize, max_epochs: usize) -> Self {
        Self {
            learning_rate,
            batch_size,
            max_epochs,
            convergence_interval: 10,
            convergence_tolerance: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<(), CoreError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::InvalidParameter("learning_rate must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(CoreError::InvalidParameter("batch_size must be > 0"));
        }
        if self.max_epochs == 0 {
            return Err(CoreError::InvalidParameter("max_epochs must be > 0"));
        }
        if self.convergence_interval == 0 {
            return Err(CoreError::InvalidParameter(
                "convergence_interval must be > 0",
            ));
        }
        if !(self.convergence_tolerance > 0.0 && self.convergence_tolerance.is_finite()) {
            return Err(CoreError::InvalidParameter(
                "convergence_tolerance must be > 0",
            ));
        }
        Ok(())
    }
}

fn check_dims(params: &ModelParams, batch: &LabeledBatch) -> Result<(), CoreError> {
    if params.dim() == batch.dim() {
        Ok(())
    } else {
        Err(CoreError::LengthMismatch {
            expected: params.dim(),
            actual: batch.dim(),
        })
    }
}

fn logit(params: &ModelParams, x: &[f64]) -> f64 {
    let dot: f64 = params
        .weights
        .iter()
        .zip(x)
        .map(|(w, xi)| w * xi)
        .sum();
    dot + params.bias
}

/// Mean binary cross-entropy of `params` on `batch`. Always ≥ 0.
pub fn forward_loss(params: &ModelParams, batch: &LabeledBatch) -> Result<f64, CoreError> {
    check_dims(params, batch)?;
    let mut total = 0.0;
    for i in 0..batch.rows() {
        let z = logit(params, batch.row(i));
        total += softplus(z) - f64::from(batch.label(i)) * z;
    }
    Ok(total / batch.rows() as f64)
}

/// Gradient of [`forward_loss`] with respect to `(weights ‖ bias)`.
///
/// The result has length `dim + 1` with the bias derivative last.
pub fn compute_gradient(
    params: &ModelParams,
    batch: &LabeledBatch,
) -> Result<DenseVector, CoreError> {
    check_dims(params, batch)?;
    let dim = params.dim();
    let mut acc = vec![0.0; dim + 1];
    for i in 0..batch.rows() {
        let x = batch.row(i);
        let residual = sigmoid(logit(params, x)) - f64::from(batch.label(i));
        for (a, xi) in acc[..dim].iter_mut().zip(x) {
            *a += residual * xi;
        }
        acc[dim] += residual;
    }
    let inv = 1.0 / batch.rows() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    DenseVector::new(acc)
}

/// One SGD step: `w' = w − γ·g`, with the bias updated from the final
/// gradient component.
pub fn sgd_step(
    params: &ModelParams,
    grad: &DenseVector,
    learning_rate: f64,
) -> Result<ModelParams, CoreError> {
    if grad.len() != params.dim() + 1 {
        return Err(CoreError::LengthMismatch {
            expected: params.dim() + 1,
            actual: grad.len(),
        });
    }
    let flat = params.to_flat().minus_scaled(grad, learning_rate)?;
    ModelParams::from_flat(&flat)
}

/// Fraction of `batch` rows whose thresholded prediction (`z ≥ 0` ⇒ class 1)
/// matches the label.
pub fn accuracy(params: &ModelParams, batch: &LabeledBatch) -> Result<f64, CoreError> {
    check_dims(params, batch)?;
    let correct = (0..batch.rows())
        .filter(|&i| {
            let predicted = logit(params, batch.row(i)) >= 0.0;
            predicted == (batch.label(i) == 1)
        })
        .count();
    Ok(correct as f64 / batch.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    const LN_2: f64 = core::f64::consts::LN_2;

    fn single_sample(x: Vec<f64>, y: u8) -> LabeledBatch {
        let dim = x.len();
        LabeledBatch::new(dim, x, vec![y]).unwrap()
    }

    #[test]
    fn zero_params_give_ln_two_loss() {
        let batch = LabeledBatch::new(2, vec![3.0, -1.0, 0.5, 2.0], vec![1, 0]).unwrap();
        let loss = forward_loss(&ModelParams::zeros(2), &batch).unwrap();
        assert!((loss - LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_sample_has_tiny_loss() {
        let params = ModelParams {
            weights: DenseVector::new(vec![10.0, 0.0]).unwrap(),
            bias: 0.0,
        };
        let batch = single_sample(vec![1.0, 0.0], 1);
        let loss = forward_loss(&params, &batch).unwrap();
        // Independent route to -ln(sigmoid(10)).
        let oracle = (1.0 + (-10.0f64).exp()).ln();
        assert!((loss - oracle).abs() < 1e-15);
        assert!((loss - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn duplicating_rows_preserves_loss() {
        let params = ModelParams {
            weights: DenseVector::new(vec![0.3, -0.7]).unwrap(),
            bias: 0.2,
        };
        let batch = LabeledBatch::new(2, vec![1.0, 2.0, -0.5, 0.25], vec![1, 0]).unwrap();
        let doubled = LabeledBatch::new(
            2,
            vec![1.0, 2.0, -0.5, 0.25, 1.0, 2.0, -0.5, 0.25],
            vec![1, 0, 1, 0],
        )
        .unwrap();
        let a = forward_loss(&params, &batch).unwrap();
        let b = forward_loss(&params, &doubled).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn loss_rejects_dimension_mismatch() {
        let batch = single_sample(vec![1.0, 0.0], 1);
        assert!(matches!(
            forward_loss(&ModelParams::zeros(3), &batch),
            Err(CoreError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn gradient_at_zero_params() {
        let batch = single_sample(vec![1.0, 0.0], 1);
        let g = compute_gradient(&ModelParams::zeros(2), &batch).unwrap();
        assert_eq!(g.as_slice(), &[-0.5, 0.0, -0.5]);
    }

    #[test]
    fn gradient_vanishes_when_predictions_saturate_correctly() {
        // At |z| = 40 the sigmoid saturates to the label in f64, so the
        // residual underflows to (near) zero.
        let params = ModelParams {
            weights: DenseVector::new(vec![40.0]).unwrap(),
            bias: 0.0,
        };
        let batch = LabeledBatch::new(1, vec![1.0, -1.0], vec![1, 0]).unwrap();
        let g = compute_gradient(&params, &batch).unwrap();
        assert!(g.l2_norm() < 1e-15);
    }

    #[test]
    fn sgd_step_arithmetic() {
        let params = ModelParams {
            weights: DenseVector::new(vec![1.0, 1.0]).unwrap(),
            bias: 0.0,
        };
        let g = DenseVector::new(vec![2.0, 0.0, 4.0]).unwrap();
        let next = sgd_step(&params, &g, 0.5).unwrap();
        assert_eq!(next.weights.as_slice(), &[0.0, 1.0]);
        assert_eq!(next.bias, -2.0);
    }

    #[test]
    fn sgd_step_identity_and_inverse() {
        let params = ModelParams {
            weights: DenseVector::new(vec![0.5, -1.5]).unwrap(),
            bias: 0.25,
        };
        let zero = DenseVector::zeros(3);
        assert_eq!(sgd_step(&params, &zero, 0.7).unwrap(), params);

        let g = DenseVector::new(vec![1.0, 2.0, 3.0]).unwrap();
        let there = sgd_step(&params, &g, 0.1).unwrap();
        let back = sgd_step(&there, &g.scaled(-1.0), 0.1).unwrap();
        assert_eq!(back, params);
    }

    #[test]
    fn sgd_step_rejects_wrong_gradient_length() {
        let params = ModelParams::zeros(2);
        let g = DenseVector::zeros(2);
        assert!(matches!(
            sgd_step(&params, &g, 0.1),
            Err(CoreError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn accuracy_counts_threshold_matches() {
        let params = ModelParams {
            weights: DenseVector::new(vec![1.0]).unwrap(),
            bias: 0.0,
        };
        // z = x: rows at +1 (y=1) and -1 (y=0) are right, -2 (y=1) is wrong.
        let batch = LabeledBatch::new(1, vec![1.0, -1.0, -2.0], vec![1, 0, 1]).unwrap();
        let acc = accuracy(&params, &batch).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::new(0.3, 8, 100).validate().is_ok());
        assert!(TrainingConfig::new(0.0, 8, 100).validate().is_err());
        assert!(TrainingConfig::new(0.3, 0, 100).validate().is_err());
        let mut cfg = TrainingConfig::new(0.3, 8, 100);
        cfg.convergence_interval = 0;
        assert!(cfg.validate().is_err());
    }
}
