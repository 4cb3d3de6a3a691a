//! Scalar math shims.
//!
//! `f64::exp` and friends live in `std`, not `core`, so the `no_std` build
//! routes through `libm`. Keeping the indirection in one module lets the rest
//! of the crate stay oblivious to which backend is active.

#[cfg(feature = "std")]
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    x.exp()
}

#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[cfg(feature = "std")]
#[inline]
pub(crate) fn ln_1p(x: f64) -> f64 {
    x.ln_1p()
}

#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn ln_1p(x: f64) -> f64 {
    libm::log1p(x)
}

#[cfg(feature = "std")]
#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    x.sqrt()
}

#[cfg(not(feature = "std"))]
#[inline]
pub(crate) fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

/// Logistic function `1 / (1 + e^-z)`, evaluated without overflow for any
/// finite `z` by branching on the sign.
#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + exp(-z))
    } else {
        let e = exp(z);
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)`, the softplus, computed as `max(z, 0) + ln_1p(e^-|z|)` so
/// large positive or negative `z` never overflow the exponential.
#[inline]
pub(crate) fn softplus(z: f64) -> f64 {
    let m = if z > 0.0 { z } else { 0.0 };
    m + ln_1p(exp(-(if z < 0.0 { -z } else { z })))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_midpoint_and_symmetry() {
        assert_eq!(sigmoid(0.0), 0.5);
        let s = sigmoid(2.0);
        assert!((s + sigmoid(-2.0) - 1.0).abs() < 1e-15);
        assert!(s > 0.5 && s < 1.0);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(sigmoid(-745.0) >= 0.0);
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        for z in [-20.0, -3.5, -1.0, 0.0, 0.25, 4.0, 20.0] {
            let naive = (1.0f64 + exp(z)).ln();
            assert!((softplus(z) - naive).abs() < 1e-12, "z = {z}");
        }
    }

    #[test]
    fn softplus_is_linear_for_large_z() {
        assert!((softplus(800.0) - 800.0).abs() < 1e-12);
        assert_eq!(softplus(-800.0), 0.0);
    }
}
