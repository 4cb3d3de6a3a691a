//! Adversarial gradient transforms.
//!
//! A Byzantine peer follows the protocol but publishes a corrupted local
//! average. These transforms produce that corruption; deciding *who* is
//! malicious and *when* to apply them belongs to the simulation layer.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::CoreError;
use crate::vector::DenseVector;

/// Sign-flip attack: returns `−epsilon · g`, the honest gradient inverted
/// and amplified.
pub fn sign_flip(g: &DenseVector, epsilon: f64) -> DenseVector {
    g.scaled(-epsilon)
}

/// Noise attack: returns `g + η` with `η` drawn iid per coordinate from
/// `Normal(0, sigma²)` using the caller's RNG. `sigma = 0` returns `g`
/// bit-identically.
pub fn gaussian_noise<R: Rng + ?Sized>(
    g: &DenseVector,
    sigma: f64,
    rng: &mut R,
) -> Result<DenseVector, CoreError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(CoreError::InvalidParameter("sigma must be ≥ 0"));
    }
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    let normal =
        Normal::new(0.0, sigma).map_err(|_| CoreError::InvalidParameter("bad sigma"))?;
    let values = g.iter().map(|v| v + normal.sample(rng)).collect();
    DenseVector::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn dv(values: &[f64]) -> DenseVector {
        DenseVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn sign_flip_inverts_and_amplifies() {
        assert_eq!(sign_flip(&dv(&[1.0, -2.0]), 10.0), dv(&[-10.0, 20.0]));
        assert_eq!(sign_flip(&dv(&[1.0, -2.0]), 1.0), dv(&[-1.0, 2.0]));
    }

    #[test]
    fn sign_flip_twice_squares_the_amplification() {
        let g = dv(&[0.5, -4.0, 3.0]);
        let twice = sign_flip(&sign_flip(&g, 3.0), 3.0);
        assert_eq!(twice, g.scaled(9.0));
    }

    #[test]
    fn zero_sigma_is_identity() {
        let g = dv(&[1.0, -2.0, 0.25]);
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        assert_eq!(gaussian_noise(&g, 0.0, &mut rng).unwrap(), g);
    }

    #[test]
    fn same_seed_same_noise() {
        let g = dv(&[1.0, -2.0, 0.25]);
        let mut a = ChaCha20Rng::seed_from_u64(42);
        let mut b = ChaCha20Rng::seed_from_u64(42);
        assert_eq!(
            gaussian_noise(&g, 1.0, &mut a).unwrap(),
            gaussian_noise(&g, 1.0, &mut b).unwrap()
        );
    }

    #[test]
    fn noise_is_centered() {
        // Sample mean of 1e5 iid N(0, 1) draws should land within
        // 3σ/√n ≈ 0.0095 of zero (three standard errors).
        let n = 100_000;
        let g = DenseVector::zeros(n);
        let mut rng = ChaCha20Rng::seed_from_u64(1234);
        let noisy = gaussian_noise(&g, 1.0, &mut rng).unwrap();
        let mean: f64 = noisy.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean = {mean}");
    }

    #[test]
    fn negative_sigma_rejected() {
        let g = dv(&[1.0]);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(gaussian_noise(&g, -1.0, &mut rng).is_err());
    }
}
