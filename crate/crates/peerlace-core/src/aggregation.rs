//! Byzantine-robust gradient aggregation rules.
//!
//! Five rules combine a set of peer gradients into one:
//!
//! * [`average`] — plain coordinate-wise mean, the non-robust baseline,
//! * [`marmed`] — coordinate-wise median (marginal median),
//! * [`geomed`] — geometric median via Weiszfeld iteration,
//! * [`meamed`] — mean-around-median: per coordinate, the mean of the
//!   `n − b` values closest to that coordinate's median,
//! * [`zeno`] — validation-set scoring: keep the `n − b` gradients whose
//!   probe SGD step most improves validation loss (minus a norm penalty),
//!   then average them.
//!
//! Every mean in this module sums its terms in a canonical order (sorted by
//! [`f64::total_cmp`]) so results are bit-identical under permutation of the
//! input gradients and so `meamed(g, 0)`, `zeno(…, 0)`, and `average(g)`
//! agree exactly — properties downstream consistency checks rely on.

use alloc::vec::Vec;

use crate::dataset::LabeledBatch;
use crate::error::CoreError;
use crate::logistic::{forward_loss, sgd_step};
use crate::vector::{DenseVector, ModelParams};

/// Which aggregation rule to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleKind {
    Average,
    MarMed,
    GeoMed,
    Meamed,
    Zeno,
}

/// A rule selector plus the parameters shared across calls.
///
/// `byzantine_bound` is the `b` used by Meamed and Zeno; the Weiszfeld
/// fields only affect GeoMed.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregationRule {
    pub kind: RuleKind,
    pub byzantine_bound: usize,
    pub geomed_tolerance: f64,
    pub geomed_max_iter: usize,
}

impl AggregationRule {
    /// A rule with the default parameters: `b = 0`, Weiszfeld tolerance
    /// `1e-8`, at most 200 iterations.
    pub fn new(kind: RuleKind) -> Self {
        Self {
            kind,
            byzantine_bound: 0,
            geomed_tolerance: 1e-8,
            geomed_max_iter: 200,
        }
    }

    pub fn with_byzantine_bound(mut self, b: usize) -> Self {
        self.byzantine_bound = b;
        self
    }

    /// Applies the selected rule. Zeno needs the current model and a
    /// [`ZenoConfig`]; the other rules ignore `zeno`.
    pub fn apply(
        &self,
        grads: &[DenseVector],
        zeno: Option<(&ModelParams, &ZenoConfig)>,
    ) -> Result<DenseVector, CoreError> {
        match self.kind {
            RuleKind::Average => average(grads),
            RuleKind::MarMed => marmed(grads),
            RuleKind::GeoMed => geomed(grads, self.geomed_tolerance, self.geomed_max_iter),
            RuleKind::Meamed => meamed(grads, self.byzantine_bound),
            RuleKind::Zeno => {
                let (params, cfg) = zeno.ok_or(CoreError::InvalidParameter(
                    "zeno rule requires model params and a ZenoConfig",
                ))?;
                self::zeno(grads, params, cfg, self.byzantine_bound)
            }
        }
    }
}

/// Parameters of the Zeno validation score.
#[derive(Debug, Clone, PartialEq)]
pub struct ZenoConfig {
    /// Norm penalty ρ discouraging oversized updates.
    pub rho: f64,
    /// Probe step size γ; conventionally the training learning rate.
    pub learning_rate: f64,
    /// Held-out batch the candidate steps are scored on.
    pub validation_batch: LabeledBatch,
}

impl ZenoConfig {
    /// A config with the default penalty ρ = 1e-4.
    pub fn new(learning_rate: f64, validation_batch: LabeledBatch) -> Self {
        Self {
            rho: 1e-4,
            learning_rate,
            validation_batch,
        }
    }
}

/// Checks non-emptiness and a common length, returning (n, len).
fn validate(grads: &[DenseVector]) -> Result<(usize, usize), CoreError> {
    let first = grads.first().ok_or(CoreError::Empty)?;
    let len = first.len();
    for g in grads {
        if g.len() != len {
            return Err(CoreError::LengthMismatch {
                expected: len,
                actual: g.len(),
            });
        }
    }
    Ok((grads.len(), len))
}

/// Mean of `values`, summed in sorted order so the result is independent of
/// the caller's ordering. All-equal inputs return the value itself exactly.
fn canonical_mean(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let (first, last) = (values[0], values[values.len() - 1]);
    if first == last {
        return first;
    }
    let sum: f64 = values.iter().sum();
    sum / values.len() as f64
}

/// Sum of `values` in sorted order (order-canonical, like [`canonical_mean`]).
fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Coordinate-wise arithmetic mean.
pub fn average(grads: &[DenseVector]) -> Result<DenseVector, CoreError> {
    let (_, len) = validate(grads)?;
    let mut out = Vec::with_capacity(len);
    let mut column = Vec::with_capacity(grads.len());
    for j in 0..len {
        column.clear();
        column.extend(grads.iter().map(|g| g[j]));
        out.push(canonical_mean(&mut column));
    }
    DenseVector::new(out)
}

/// Median of a non-empty slice; for even counts, the mean of the two middle
/// order statistics. Sorts in place.
fn median_in_place(values: &mut [f64]) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Coordinate-wise (marginal) median.
pub fn marmed(grads: &[DenseVector]) -> Result<DenseVector, CoreError> {
    let (_, len) = validate(grads)?;
    let mut out = Vec::with_capacity(len);
    let mut column = Vec::with_capacity(grads.len());
    for j in 0..len {
        column.clear();
        column.extend(grads.iter().map(|g| g[j]));
        out.push(median_in_place(&mut column));
    }
    DenseVector::new(out)
}

/// Sum of distances from `x` to every gradient, with order-canonical
/// summation so permuting `grads` cannot change the result.
fn geomed_objective(x: &DenseVector, grads: &[DenseVector]) -> Result<f64, CoreError> {
    let mut terms = grads
        .iter()
        .map(|g| x.distance(g))
        .collect::<Result<Vec<f64>, _>>()?;
    Ok(canonical_sum(&mut terms))
}

/// Geometric median: the approximate minimizer of `Σᵢ ‖x − gᵢ‖₂`.
///
/// Runs Weiszfeld iteration from the coordinate-wise average, stopping when
/// successive iterates move less than `tolerance` in L2 or after `max_iter`
/// rounds. Iterates that land on an input point would divide by zero, so
/// distances are clamped below at `1e-12`. Two points have no unique
/// minimizer; the midpoint is returned as the canonical choice.
///
/// When the true minimizer lies at an input point the objective is
/// non-smooth there and Weiszfeld approaches it sublinearly, so the final
/// iterate alone cannot promise much. The function therefore returns
/// whichever of the final iterate and the input points has the smallest
/// objective, which guarantees the output's objective never exceeds any
/// input point's.
pub fn geomed(
    grads: &[DenseVector],
    tolerance: f64,
    max_iter: usize,
) -> Result<DenseVector, CoreError> {
    if !(tolerance > 0.0 && tolerance.is_finite()) {
        return Err(CoreError::InvalidParameter("tolerance must be > 0"));
    }
    if max_iter == 0 {
        return Err(CoreError::InvalidParameter("max_iter must be > 0"));
    }
    let (n, len) = validate(grads)?;
    if n == 1 {
        return Ok(grads[0].clone());
    }
    if grads.iter().all(|g| g == &grads[0]) {
        return Ok(grads[0].clone());
    }
    if n == 2 {
        return average(grads);
    }

    let mut x = average(grads)?;
    let mut weights = Vec::with_capacity(n);
    let mut terms = Vec::with_capacity(n);
    for _ in 0..max_iter {
        weights.clear();
        for g in grads {
            let d = x.distance(g)?.max(1e-12);
            weights.push(1.0 / d);
        }
        // Weighted mean with order-canonical summation, keeping the whole
        // rule bit-exactly permutation invariant like the other rules.
        let mut denom_terms = weights.clone();
        let denom = canonical_sum(&mut denom_terms);
        let mut next = Vec::with_capacity(len);
        for j in 0..len {
            terms.clear();
            terms.extend(grads.iter().zip(&weights).map(|(g, w)| w * g[j]));
            next.push(canonical_sum(&mut terms) / denom);
        }
        let next = DenseVector::new(next)?;
        let moved = x.distance(&next)?;
        x = next;
        if moved < tolerance {
            break;
        }
    }

    let mut best_obj = geomed_objective(&x, grads)?;
    let mut best = x;
    for g in grads {
        let obj = geomed_objective(g, grads)?;
        if obj < best_obj {
            best_obj = obj;
            best = g.clone();
        }
    }
    Ok(best)
}

/// Mean-around-median: per coordinate, keep the `n − b` values closest to
/// that coordinate's median (ties broken by lower gradient index) and return
/// their mean.
pub fn meamed(grads: &[DenseVector], b: usize) -> Result<DenseVector, CoreError> {
    let (n, len) = validate(grads)?;
    if b >= n {
        return Err(CoreError::ByzantineBound { bound: b, n });
    }
    let keep = n - b;
    let mut out = Vec::with_capacity(len);
    let mut column = Vec::with_capacity(n);
    let mut ranked: Vec<(f64, usize)> = Vec::with_capacity(n);
    for j in 0..len {
        column.clear();
        column.extend(grads.iter().map(|g| g[j]));
        let mut sorted = column.clone();
        let m = median_in_place(&mut sorted);
        ranked.clear();
        ranked.extend(
            column
                .iter()
                .enumerate()
                .map(|(i, v)| ((v - m).abs(), i)),
        );
        ranked.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut kept: Vec<f64> = ranked[..keep].iter().map(|&(_, i)| column[i]).collect();
        out.push(canonical_mean(&mut kept));
    }
    DenseVector::new(out)
}

/// Validation score of one candidate gradient: the validation-loss decrease
/// achieved by a probe SGD step, minus `ρ·‖g‖₂²`. Higher is more trustworthy.
fn zeno_score(
    g: &DenseVector,
    params: &ModelParams,
    cfg: &ZenoConfig,
    base_loss: f64,
) -> Result<f64, CoreError> {
    let stepped = sgd_step(params, g, cfg.learning_rate)?;
    let stepped_loss = forward_loss(&stepped, &cfg.validation_batch)?;
    Ok(base_loss - stepped_loss - cfg.rho * g.l2_norm_squared())
}

/// Zeno aggregation: score every gradient on the validation batch, drop the
/// `b` lowest scorers (ties broken by keeping lower indices), and average
/// the rest.
pub fn zeno(
    grads: &[DenseVector],
    params: &ModelParams,
    cfg: &ZenoConfig,
    b: usize,
) -> Result<DenseVector, CoreError> {
    let (n, _) = validate(grads)?;
    if b >= n {
        return Err(CoreError::ByzantineBound { bound: b, n });
    }
    let base_loss = forward_loss(params, &cfg.validation_batch)?;
    let mut scored: Vec<(f64, usize)> = Vec::with_capacity(n);
    for (i, g) in grads.iter().enumerate() {
        scored.push((zeno_score(g, params, cfg, base_loss)?, i));
    }
    // Highest score first; equal scores keep the earlier gradient.
    scored.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let kept: Vec<DenseVector> = scored[..n - b]
        .iter()
        .map(|&(_, i)| grads[i].clone())
        .collect();
    average(&kept)
}
