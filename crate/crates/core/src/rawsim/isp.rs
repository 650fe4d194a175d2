//! Reference ISP: the distortion-free rendering the model is trained to
//! reproduce. Local contrast first (unsharp mask against a Gaussian blur),
//! then a global tone curve (gamma followed by a smoothstep s-curve blend).

use serde::{Deserialize, Serialize};

use super::scene::SceneImage;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToneParams {
    /// Display gamma; the curve applies the 1/gamma power.
    pub gamma: f64,
    /// S-curve blend weight in [0,1]; 0 disables it.
    pub s_curve: f64,
    /// Unsharp-mask strength; 0 disables local contrast.
    pub local_contrast: f64,
}

impl Default for ToneParams {
    fn default() -> Self {
        ToneParams { gamma: 2.2, s_curve: 0.3, local_contrast: 0.15 }
    }
}

impl ToneParams {
    pub fn identity() -> ToneParams {
        ToneParams { gamma: 1.0, s_curve: 0.0, local_contrast: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) {
            return Err(Error::Invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.s_curve) {
            return Err(Error::Invalid(format!("s-curve strength must be in [0,1], got {}", self.s_curve)));
        }
        if self.local_contrast < 0.0 {
            return Err(Error::Invalid(format!("local contrast must be >= 0, got {}", self.local_contrast)));
        }
        Ok(())
    }

    /// The global curve on one value in [0,1]. Monotone: the gamma power is
    /// monotone and the s-curve is a convex blend of t and the monotone
    /// smoothstep t^2(3-2t).
    pub fn global_curve(&self, v: f64) -> f64 {
        let t = v.clamp(0.0, 1.0).powf(1.0 / self.gamma);
        let s = t * t * (3.0 - 2.0 * t);
        (1.0 - self.s_curve) * t + self.s_curve * s
    }
}

/// Discrete Gaussian blur weights, sigma 2, radius 4, normalized.
fn blur_kernel() -> [f64; 9] {
    let sigma = 2.0f64;
    let mut k = [0.0; 9];
    let mut sum = 0.0;
    for (i, slot) in k.iter_mut().enumerate() {
        let d = i as f64 - 4.0;
        *slot = (-0.5 * d * d / (sigma * sigma)).exp();
        sum += *slot;
    }
    for slot in &mut k {
        *slot /= sum;
    }
    k
}

/// Separable blur with edge clamping, per channel.
fn gaussian_blur(rgb: &Tensor<f32>, h: usize, w: usize) -> Vec<f32> {
    let k = blur_kernel();
    let src = rgb.data();
    let mut tmp = vec![0.0f32; src.len()];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for (t, &kv) in k.iter().enumerate() {
                    let jj = (j as isize + t as isize - 4).clamp(0, w as isize - 1) as usize;
                    acc += kv * src[(i * w + jj) * 3 + c] as f64;
                }
                tmp[(i * w + j) * 3 + c] = acc as f32;
            }
        }
    }
    let mut out = vec![0.0f32; src.len()];
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                let mut acc = 0.0f64;
                for (t, &kv) in k.iter().enumerate() {
                    let ii = (i as isize + t as isize - 4).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[(ii * w + j) * 3 + c] as f64;
                }
                out[(i * w + j) * 3 + c] = acc as f32;
            }
        }
    }
    out
}

/// Render the supervision target for a clean scene. The output sees none of
/// the capture degradations, so the trained model must remove them.
pub fn reference_isp(scene: &SceneImage, tone: &ToneParams) -> Result<Tensor<f32>> {
    tone.validate()?;
    let (h, w) = (scene.height, scene.width);
    let mut work: Vec<f64> = scene.rgb.data().iter().map(|&v| v as f64).collect();
    if tone.local_contrast > 0.0 {
        let blurred = gaussian_blur(&scene.rgb, h, w);
        for (v, &b) in work.iter_mut().zip(blurred.iter()) {
            *v += tone.local_contrast * (*v - b as f64);
        }
    }
    let data = work.iter().map(|&v| tone.global_curve(v) as f32).collect();
    Tensor::new([h, w, 3], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn identity_tone_returns_the_scene() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let scene = SceneImage::generate(&mut rng, 32, 32).unwrap();
        let out = reference_isp(&scene, &ToneParams::identity()).unwrap();
        for (a, b) in out.data().iter().zip(scene.rgb.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn gamma_matches_closed_form() {
        let tone = ToneParams { gamma: 2.2, s_curve: 0.0, local_contrast: 0.0 };
        let got = tone.global_curve(0.25);
        assert!((got - 0.25f64.powf(1.0 / 2.2)).abs() < 1e-12);
        assert!((got - 0.5325).abs() < 1e-3, "got {got}");
    }

    #[test]
    fn global_curve_is_monotone() {
        let tone = ToneParams::default();
        let mut prev = tone.global_curve(0.0);
        for k in 1..=1000 {
            let cur = tone.global_curve(k as f64 / 1000.0);
            assert!(cur >= prev, "curve decreased at {k}");
            prev = cur;
        }
    }

    #[test]
    fn invalid_params_are_rejected() {
        assert!(ToneParams { gamma: 0.0, ..ToneParams::default() }.validate().is_err());
        assert!(ToneParams { s_curve: 1.5, ..ToneParams::default() }.validate().is_err());
        assert!(ToneParams { local_contrast: -0.1, ..ToneParams::default() }.validate().is_err());
    }

    #[test]
    fn local_contrast_sharpens_edges() {
        // A step edge should overshoot on both sides with unsharp masking.
        let mut data = vec![0.0f32; 16 * 16 * 3];
        for i in 0..16 {
            for j in 8..16 {
                for c in 0..3 {
                    data[(i * 16 + j) * 3 + c] = 0.8;
                }
            }
        }
        for v in &mut data {
            *v = v.max(0.2);
        }
        let scene = SceneImage::new(16, 16, Tensor::new([16, 16, 3], data).unwrap()).unwrap();
        let tone = ToneParams { gamma: 1.0, s_curve: 0.0, local_contrast: 0.5 };
        let out = reference_isp(&scene, &tone).unwrap();
        // Just left of the edge dips below the flat value, just right rises
        // above it.
        let left = out.data()[(8 * 16 + 7) * 3];
        let right = out.data()[(8 * 16 + 8) * 3];
        let flat_left = out.data()[(8 * 16 + 1) * 3];
        let flat_right = out.data()[(8 * 16 + 14) * 3];
        assert!(left < flat_left, "{left} vs {flat_left}");
        assert!(right > flat_right, "{right} vs {flat_right}");
    }
}
