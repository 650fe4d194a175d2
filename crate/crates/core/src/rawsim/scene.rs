//! Procedural scene generation: linear-light RGB images with gradients,
//! soft colored shapes, and band-limited texture so crops contain edges,
//! color variety, and fine detail worth spending bits on.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct SceneImage {
    pub height: usize,
    pub width: usize,
    /// `[height, width, 3]`, linear light, values in [0,1].
    pub rgb: Tensor<f32>,
}

impl SceneImage {
    pub fn new(height: usize, width: usize, rgb: Tensor<f32>) -> Result<SceneImage> {
        if height % 2 != 0 || width % 2 != 0 {
            return Err(Error::Invalid(format!("scene dims must be even, got {height}x{width}")));
        }
        if rgb.shape() != [height, width, 3] {
            return Err(Error::shape("scene", format!("want [{height},{width},3], got {:?}", rgb.shape())));
        }
        if rgb.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Invalid("scene values must lie in [0,1]".into()));
        }
        Ok(SceneImage { height, width, rgb })
    }

    /// Interpret packed 8-bit sRGB-ish data as linear values in [0,1].
    /// Entry point for user-supplied images; the procedural generator is
    /// the default source.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<SceneImage> {
        if bytes.len() != height * width * 3 {
            return Err(Error::Invalid(format!(
                "expected {} bytes for {height}x{width} rgb8, got {}",
                height * width * 3,
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|&b| b as f32 / 255.0).collect();
        SceneImage::new(height, width, Tensor::new([height, width, 3], data)?)
    }

    /// Deterministic procedural scene: base gradient, soft shapes, texture.
    pub fn generate(rng: &mut ChaCha12Rng, height: usize, width: usize) -> Result<SceneImage> {
        let mut img = vec![0.0f32; height * width * 3];

        // Base: per-channel linear gradient with random direction and range.
        let mut grad = [[0.0f64; 4]; 3];
        for g in &mut grad {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let lo = rng.gen_range(0.15..0.4);
            let hi = rng.gen_range(0.5..0.8);
            *g = [theta.cos(), theta.sin(), lo, hi];
        }
        let diag = ((height * height + width * width) as f64).sqrt();
        for i in 0..height {
            for j in 0..width {
                for (c, g) in grad.iter().enumerate() {
                    let t = 0.5 + (g[0] * i as f64 + g[1] * j as f64) / diag;
                    let v = g[2] + (g[3] - g[2]) * t.clamp(0.0, 1.0);
                    img[(i * width + j) * 3 + c] = v as f32;
                }
            }
        }

        // Soft-edged ellipses in random colors give occlusion boundaries.
        let shapes = rng.gen_range(6..12);
        for _ in 0..shapes {
            let ci = rng.gen_range(0.0..height as f64);
            let cj = rng.gen_range(0.0..width as f64);
            let ri = rng.gen_range(0.06..0.35) * height as f64;
            let rj = rng.gen_range(0.06..0.35) * width as f64;
            let color = [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)];
            let opacity = rng.gen_range(0.5..1.0);
            // Soft edge width as a fraction of the radius.
            let edge = rng.gen_range(0.02..0.2);
            for i in 0..height {
                for j in 0..width {
                    let d = (((i as f64 - ci) / ri).powi(2) + ((j as f64 - cj) / rj).powi(2)).sqrt();
                    if d >= 1.0 {
                        continue;
                    }
                    let t = ((1.0 - d) / edge).clamp(0.0, 1.0);
                    let a = (opacity * t * t * (3.0 - 2.0 * t)) as f32;
                    let px = &mut img[(i * width + j) * 3..][..3];
                    for c in 0..3 {
                        px[c] += a * (color[c] as f32 - px[c]);
                    }
                }
            }
        }

        // Band-limited texture: a few random cosine products per channel.
        let mut waves = Vec::new();
        for c in 0..3 {
            for _ in 0..3 {
                waves.push((
                    c,
                    rng.gen_range(0.01..0.04),
                    rng.gen_range(2.0..12.0) * std::f64::consts::TAU / height as f64,
                    rng.gen_range(2.0..12.0) * std::f64::consts::TAU / width as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                ));
            }
        }
        for i in 0..height {
            for j in 0..width {
                for &(c, amp, fi, fj, pi_, pj) in &waves {
                    let v = amp * (fi * i as f64 + pi_).cos() * (fj * j as f64 + pj).cos();
                    img[(i * width + j) * 3 + c] += v as f32;
                }
            }
        }

        // Keep headroom at both ends for the degradation and tone stages.
        for v in &mut img {
            *v = v.clamp(0.02, 0.98);
        }
        SceneImage::new(height, width, Tensor::new([height, width, 3], img)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn generated_scenes_are_in_range_and_deterministic() {
        let mut rng1 = ChaCha12Rng::seed_from_u64(9);
        let mut rng2 = ChaCha12Rng::seed_from_u64(9);
        let a = SceneImage::generate(&mut rng1, 64, 64).unwrap();
        let b = SceneImage::generate(&mut rng2, 64, 64).unwrap();
        assert!(a.rgb.bit_eq(&b.rgb));
        assert!(a.rgb.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scenes_have_spatial_structure() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let s = SceneImage::generate(&mut rng, 64, 64).unwrap();
        let d = s.rgb.data();
        let mean = d.iter().sum::<f32>() / d.len() as f32;
        let var = d.iter().map(|&v| (v - mean).powi(2)).sum::<f32>() / d.len() as f32;
        assert!(var > 1e-3, "scene is nearly flat: var {var}");
    }

    #[test]
    fn odd_dims_are_rejected() {
        assert!(SceneImage::new(63, 64, Tensor::zeros(&[63, 64, 3])).is_err());
    }

    #[test]
    fn rgb8_import_scales_to_unit_range() {
        let bytes: Vec<u8> = (0..12).map(|k| [0u8, 128, 255, 64][k % 4]).collect();
        let s = SceneImage::from_rgb8(2, 2, &bytes).unwrap();
        assert_eq!(s.rgb.data()[2], 1.0);
        assert!((s.rgb.data()[1] - 128.0 / 255.0).abs() < 1e-7);
    }
}
