//! CIE76 colour difference between sRGB images.
//!
//! Pixels travel sRGB -> linear RGB -> XYZ (D65) -> CIELAB, and delta E is the
//! Euclidean distance in Lab averaged over all pixels.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// D65 reference white in XYZ, the normalisation for Lab.
pub const D65: [f64; 3] = [0.950_47, 1.0, 1.088_83];

// Linear-RGB -> XYZ for sRGB primaries. The middle row's blue coefficient is
// published as 0.0721750, which leaves the row summing to 1.0000001; one unit
// off the last digit makes every row sum to the D65 white exactly, so
// neutral inputs land exactly on the neutral axis (white is L = 100,
// a* = b* = 0).
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_174_9],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

/// Inverse of the sRGB transfer curve (IEC 61966-2-1).
pub fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// One sRGB pixel (components in [0, 1]) to CIELAB.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = [srgb_to_linear(rgb[0]), srgb_to_linear(rgb[1]), srgb_to_linear(rgb[2])];
    let mut xyz = [0.0; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / D65[0]);
    let fy = lab_f(xyz[1] / D65[1]);
    let fz = lab_f(xyz[2] / D65[2]);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// Mean CIE76 delta E over two [h, w, 3] images with channels in [0, 1].
/// Inputs are clamped to [0, 1] before conversion.
pub fn delta_e(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "delta_e",
            format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let shape = a.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape("delta_e", format!("want [h, w, 3], got {shape:?}")));
    }
    let n = shape[0] * shape[1];
    if n == 0 {
        return Err(Error::shape("delta_e", "empty image"));
    }
    let pa = a.data();
    let pb = b.data();
    let mut total = 0.0f64;
    for p in 0..n {
        let read = |d: &[f32], k: usize| f64::from(d[p * 3 + k]).clamp(0.0, 1.0);
        let la = srgb_to_lab([read(pa, 0), read(pa, 1), read(pa, 2)]);
        let lb = srgb_to_lab([read(pb, 0), read(pb, 1), read(pb, 2)]);
        let d = [la[0] - lb[0], la[1] - lb[1], la[2] - lb[2]];
        total += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_against_black_scores_one_hundred() {
        // White is L = 100, a = b = 0; black is the origin. Distance is 100.
        let white = Tensor::full(&[4, 5, 3], 1.0f32);
        let black = Tensor::zeros(&[4, 5, 3]);
        let d = delta_e(&white, &black).unwrap();
        assert!((d - 100.0).abs() < 1e-9, "got {d}");
    }

    #[test]
    fn neutral_grays_differ_in_lightness_only() {
        let g1 = 0.3f64;
        let g2 = 0.6f64;
        let a = Tensor::full(&[2, 2, 3], g1 as f32);
        let b = Tensor::full(&[2, 2, 3], g2 as f32);

        // Neutral axis: a* = b* = 0, so delta E collapses to |L1 - L2|.
        let l1 = srgb_to_lab([f64::from(g1 as f32); 3]);
        let l2 = srgb_to_lab([f64::from(g2 as f32); 3]);
        assert!(l1[1].abs() < 1e-9 && l1[2].abs() < 1e-9, "gray has a cast: {l1:?}");
        let want = (l1[0] - l2[0]).abs();
        let got = delta_e(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
    }

    #[test]
    fn identical_images_score_zero() {
        let a = Tensor::from_fn(&[3, 3, 3], |i| (i as f32 * 0.173).fract());
        assert_eq!(delta_e(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn transfer_curve_hits_the_standard_knee() {
        // Below the knee the curve is linear with slope 1/12.92.
        assert!((srgb_to_linear(0.04045) - 0.04045 / 12.92).abs() < 1e-12);
        // Continuity across the knee.
        let lo = srgb_to_linear(0.040_449_999);
        let hi = srgb_to_linear(0.040_450_001);
        assert!((hi - lo).abs() < 1e-6);
        assert!((srgb_to_linear(1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_values_are_clamped() {
        let over = Tensor::full(&[2, 2, 3], 1.5f32);
        let white = Tensor::full(&[2, 2, 3], 1.0f32);
        assert!(delta_e(&over, &white).unwrap() < 1e-12);
    }

    #[test]
    fn rejects_non_rgb_shapes() {
        let a = Tensor::zeros(&[2, 2, 4]);
        assert!(delta_e(&a, &a).is_err());
        let b = Tensor::zeros(&[2, 2]);
        assert!(delta_e(&b, &b).is_err());
    }
}
