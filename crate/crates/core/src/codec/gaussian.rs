//! Gaussian integrals for the entropy model.
//!
//! Everything runs in f64. Tail differences go through `erfc` so that two
//! nearly-equal CDF values never cancel; with unit bins and scales near the
//! floor the integration limits reach |z| ~ 50 where `erf` alone would
//! round to +-1.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Standard normal CDF.
pub fn norm_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Probability mass of the unit bin centered on `x` under `N(mu, sigma^2)`:
/// `Phi((x+0.5-mu)/sigma) - Phi((x-0.5-mu)/sigma)`.
pub fn bin_probability(x: f64, mu: f64, sigma: f64) -> f64 {
    let a = (x + 0.5 - mu) / sigma;
    let b = (x - 0.5 - mu) / sigma;
    interval_probability(b, a)
}

/// `Phi(hi) - Phi(lo)` for `lo <= hi`, accurate in both tails.
pub fn interval_probability(lo: f64, hi: f64) -> f64 {
    debug_assert!(lo <= hi);
    let p = if lo >= 0.0 {
        0.5 * (libm::erfc(lo * FRAC_1_SQRT_2) - libm::erfc(hi * FRAC_1_SQRT_2))
    } else if hi <= 0.0 {
        0.5 * (libm::erfc(-hi * FRAC_1_SQRT_2) - libm::erfc(-lo * FRAC_1_SQRT_2))
    } else {
        0.5 * (libm::erf(hi * FRAC_1_SQRT_2) - libm::erf(lo * FRAC_1_SQRT_2))
    };
    p.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_bin_at_mode() {
        // Phi(0.5) - Phi(-0.5) for the standard normal.
        let p = bin_probability(0.0, 0.0, 1.0);
        assert!((p - 0.3829249225480262).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn cdf_reference_points() {
        assert!((norm_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((norm_cdf(1.0) - 0.8413447460685429).abs() < 1e-12);
        assert!((norm_cdf(-1.0) - 0.15865525393145707).abs() < 1e-12);
        // Deep tail stays positive and monotone instead of rounding to 0.
        assert!(norm_cdf(-38.0) > 0.0);
        assert!(norm_cdf(-38.0) < norm_cdf(-37.0));
    }

    #[test]
    fn bins_sum_to_one() {
        // Unit bins tile the real line; a wide sweep should capture
        // essentially all mass.
        let (mu, sigma) = (0.3, 2.7);
        let total: f64 = (-60..=60).map(|k| bin_probability(k as f64, mu, sigma)).sum();
        assert!((total - 1.0).abs() < 1e-12, "total = {total}");
    }

    #[test]
    fn tail_difference_does_not_cancel() {
        // Both limits far in the right tail: naive CDF subtraction gives 0.
        let p = bin_probability(30.0, 0.0, 1.0);
        assert!(p > 0.0);
        let q = bin_probability(31.0, 0.0, 1.0);
        assert!(q < p);
    }
}
