//! Peak signal-to-noise ratio.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Identical images would be +inf dB; capping keeps RD curves total-ordered.
pub const PSNR_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Psnr {
    pub db: f64,
    /// True when the inputs matched exactly (MSE of zero).
    pub identical: bool,
}

/// 10 * log10(peak^2 / MSE), capped at [`PSNR_CAP`]. MSE accumulates in f64.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>, peak: f64) -> Result<Psnr> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "psnr",
            format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.len() == 0 {
        return Err(Error::shape("psnr", "empty input"));
    }
    if !(peak > 0.0) || !peak.is_finite() {
        return Err(Error::Invalid(format!("peak must be positive and finite, got {peak}")));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(Psnr { db: PSNR_CAP, identical: true });
    }
    Ok(Psnr { db: (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP), identical: false })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_images_are_flagged_and_capped() {
        let a = Tensor::full(&[3, 3, 3], 0.5f32);
        let r = psnr(&a, &a, 1.0).unwrap();
        assert_eq!(r.db, 100.0);
        assert!(r.identical);
    }

    #[test]
    fn closed_form_values() {
        let zeros = Tensor::zeros(&[4, 4, 3]);
        let ones = Tensor::full(&[4, 4, 3], 1.0f32);
        let r = psnr(&zeros, &ones, 1.0).unwrap();
        assert!(r.db.abs() < 1e-12, "MSE 1 at peak 1 is 0 dB, got {}", r.db);
        assert!(!r.identical);

        // MSE 0.01 -> 20 dB.
        let off = Tensor::full(&[4, 4, 3], 0.1f32);
        let r = psnr(&zeros, &off, 1.0).unwrap();
        assert!((r.db - 20.0).abs() < 1e-6, "got {}", r.db);
    }

    #[test]
    fn symmetric_in_its_arguments() {
        let a = Tensor::from_fn(&[5, 4, 3], |i| (i as f32 * 0.317).sin().abs());
        let b = Tensor::from_fn(&[5, 4, 3], |i| (i as f32 * 0.711).cos().abs());
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Tensor::zeros(&[2, 2, 3]);
        let b = Tensor::zeros(&[2, 3, 3]);
        assert!(psnr(&a, &b, 1.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
        assert!(psnr(&a, &a, f64::NAN).is_err());
    }
}
