//! Seed derivation and synthetic binary-classification data.
//!
//! Every random decision in a scenario flows from one master seed through
//! [`split_seed`], so adding a peer or reordering phases never shifts the
//! random stream of an unrelated component — the backbone of run-to-run
//! determinism.

use peerlace_core::{CoreError, LabeledBatch};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Derives an independent child seed from `master` and a purpose label
/// (e.g. `"data"`, `"peer:2"`). Distinct labels give unrelated streams;
/// the same (master, label) pair always gives the same seed.
pub fn split_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("SHA-256 yields 32 bytes"))
}

/// Samples a two-class Gaussian mixture: class `y`'s features are drawn
/// around a mean vector at ±`separation`/2 along the all-ones diagonal
/// (scaled so the class means are exactly `separation` apart in L2),
/// with isotropic noise `noise_sigma`. Labels alternate 0,1,0,1,… so any
/// contiguous slice of even length is class-balanced.
pub fn two_gaussian_batch<R: Rng + ?Sized>(
    dim: usize,
    samples: usize,
    separation: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<LabeledBatch, CoreError> {
    if dim == 0 || samples == 0 {
        return Err(CoreError::Empty);
    }
    if !(separation.is_finite() && noise_sigma.is_finite()) || noise_sigma < 0.0 {
        return Err(CoreError::InvalidParameter(
            "separation must be finite and noise_sigma finite and non-negative",
        ));
    }
    let half = 0.5 * separation / (dim as f64).sqrt();
    let mut features = Vec::with_capacity(dim * samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = (i % 2) as u8;
        let mean = if label == 1 { half } else { -half };
        for _ in 0..dim {
            let noise: f64 = StandardNormal.sample(rng);
            features.push(mean + noise_sigma * noise);
        }
        labels.push(label);
    }
    LabeledBatch::new(dim, features, labels)
}

/// Appends `b`'s rows after `a`'s, e.g. when a surviving peer absorbs a
/// failed peer's data slice.
pub fn concat_batches(a: &LabeledBatch, b: &LabeledBatch) -> Result<LabeledBatch, CoreError> {
    if a.dim() != b.dim() {
        return Err(CoreError::LengthMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let mut features = Vec::with_capacity((a.rows() + b.rows()) * a.dim());
    let mut labels = Vec::with_capacity(a.rows() + b.rows());
    for batch in [a, b] {
        for i in 0..batch.rows() {
            features.extend_from_slice(batch.row(i));
            labels.push(batch.label(i));
        }
    }
    LabeledBatch::new(a.dim(), features, labels)
}

/// Splits a batch into a training prefix and validation suffix, with the
/// validation side holding `round(validation_fraction · rows)` rows. Thanks
/// to alternating labels both sides stay close to class-balanced.
pub fn train_validation_split(
    data: &LabeledBatch,
    validation_fraction: f64,
) -> Result<(LabeledBatch, LabeledBatch), CoreError> {
    if !(0.0..1.0).contains(&validation_fraction) || validation_fraction == 0.0 {
        return Err(CoreError::InvalidParameter(
            "validation_fraction must lie strictly between 0 and 1",
        ));
    }
    let rows = data.rows();
    let val_rows = ((rows as f64) * validation_fraction).round() as usize;
    if val_rows == 0 || val_rows >= rows {
        return Err(CoreError::InvalidParameter(
            "validation_fraction leaves an empty training or validation side",
        ));
    }
    let train = data.slice_rows(0, rows - val_rows);
    let validation = data.slice_rows(rows - val_rows, rows);
    Ok((train, validation))
}
