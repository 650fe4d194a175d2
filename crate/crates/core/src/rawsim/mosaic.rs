//! Bayer mosaicing and the forward degradation model.

use super::field::{capture_rng, standard_normal, DistortionField};
use super::scene::SceneImage;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Color sampled at a Bayer site. RGGB: R at (0,0).
pub fn bayer_channel(i: usize, j: usize) -> usize {
    match (i % 2, j % 2) {
        (0, 0) => 0,
        (1, 1) => 2,
        _ => 1,
    }
}

/// Sample the scene through the color filter array: one channel per pixel.
pub fn mosaic(scene: &SceneImage) -> Tensor<f32> {
    let (h, w) = (scene.height, scene.width);
    let rgb = scene.rgb.data();
    let data = (0..h * w)
        .map(|k| {
            let (i, j) = (k / w, k % w);
            rgb[k * 3 + bayer_channel(i, j)]
        })
        .collect();
    Tensor::new([h, w], data).expect("length matches")
}

#[derive(Clone, Debug)]
pub struct RawCapture {
    pub capture_id: u32,
    pub height: usize,
    pub width: usize,
    /// Bayer plane `[H, W]`, values clipped to [0,1].
    pub raw: Tensor<f32>,
    pub field: DistortionField,
}

/// Apply the capture degradations to a clean scene:
/// `raw = clip(mosaic * V + D + eta)` with
/// `eta ~ N(0, sigma_r^2 + gain * (mosaic * V))`.
pub fn degrade(scene: &SceneImage, field: &DistortionField, seed: u64, capture_id: u32) -> Result<RawCapture> {
    if scene.height != field.height || scene.width != field.width {
        return Err(Error::shape(
            "degrade",
            format!(
                "scene {}x{} vs field {}x{}",
                scene.height, scene.width, field.height, field.width
            ),
        ));
    }
    field.validate()?;
    let clean = mosaic(scene);
    let v = field.vignette.data();
    let d = field.dark.data();
    let mut rng = capture_rng(seed, capture_id, "noise");
    let data = clean
        .data()
        .iter()
        .enumerate()
        .map(|(k, &m)| {
            let signal = (m * v[k]) as f64;
            let var = field.sigma_r * field.sigma_r + field.gain * signal.max(0.0);
            let eta = if var > 0.0 { var.sqrt() * standard_normal(&mut rng) } else { 0.0 };
            ((signal + d[k] as f64 + eta) as f32).clamp(0.0, 1.0)
        })
        .collect();
    Ok(RawCapture {
        capture_id,
        height: scene.height,
        width: scene.width,
        raw: Tensor::new([scene.height, scene.width], data)?,
        field: field.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn rggb_phase_layout() {
        assert_eq!(bayer_channel(0, 0), 0);
        assert_eq!(bayer_channel(0, 1), 1);
        assert_eq!(bayer_channel(1, 0), 1);
        assert_eq!(bayer_channel(1, 1), 2);
        assert_eq!(bayer_channel(6, 4), 0);
    }

    #[test]
    fn identity_field_returns_clean_mosaic() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let scene = SceneImage::generate(&mut rng, 32, 32).unwrap();
        let field = DistortionField::identity(32, 32);
        let cap = degrade(&scene, &field, 123, 0).unwrap();
        assert!(cap.raw.bit_eq(&mosaic(&scene)));
    }

    #[test]
    fn mosaic_samples_the_right_channels() {
        let mut data = vec![0.0f32; 4 * 4 * 3];
        for i in 0..4 {
            for j in 0..4 {
                data[(i * 4 + j) * 3] = 0.9; // R
                data[(i * 4 + j) * 3 + 1] = 0.5; // G
                data[(i * 4 + j)* 3 + 2] = 0.1; // B
            }
        }
        let scene = SceneImage::new(4, 4, Tensor::new([4, 4, 3], data).unwrap()).unwrap();
        let m = mosaic(&scene);
        assert_eq!(m.data()[0], 0.9);
        assert_eq!(m.data()[1], 0.5);
        assert_eq!(m.data()[4], 0.5);
        assert_eq!(m.data()[5], 0.1);
    }

    #[test]
    fn constant_scene_center_passes_through_unit_gain() {
        let rgb = Tensor::new([8, 8, 3], vec![0.5f32; 8 * 8 * 3]).unwrap();
        let scene = SceneImage::new(8, 8, rgb).unwrap();
        let field = DistortionField::identity(8, 8);
        let cap = degrade(&scene, &field, 0, 0).unwrap();
        assert_eq!(cap.raw.data()[4 * 8 + 4], 0.5);
    }

    #[test]
    fn noise_variance_matches_the_model() {
        // V = 1, D = 0, constant scene 0.5: var should be
        // sigma_r^2 + gain * 0.5 within 5% over >= 1e5 pixels.
        let (h, w) = (512, 512);
        let rgb = Tensor::new([h, w, 3], vec![0.5f32; h * w * 3]).unwrap();
        let scene = SceneImage::new(h, w, rgb).unwrap();
        let mut field = DistortionField::identity(h, w);
        field.sigma_r = 0.01;
        field.gain = 0.0002;
        let cap = degrade(&scene, &field, 77, 3).unwrap();
        let vals: Vec<f64> = cap.raw.data().iter().map(|&v| v as f64).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        let expect = 0.01f64 * 0.01 + 0.0002 * 0.5;
        assert!(
            (var - expect).abs() < 0.05 * expect,
            "var {var:.3e} vs expected {expect:.3e}"
        );
    }

    #[test]
    fn degrade_is_deterministic_per_seed() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let scene = SceneImage::generate(&mut rng, 16, 16).unwrap();
        let mut field = DistortionField::identity(16, 16);
        field.sigma_r = 0.01;
        let a = degrade(&scene, &field, 9, 5).unwrap();
        let b = degrade(&scene, &field, 9, 5).unwrap();
        assert!(a.raw.bit_eq(&b.raw));
        let c = degrade(&scene, &field, 10, 5).unwrap();
        assert!(!a.raw.bit_eq(&c.raw));
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let scene = SceneImage::generate(&mut rng, 32, 32).unwrap();
        let field = DistortionField::identity(16, 16);
        assert!(degrade(&scene, &field, 0, 0).is_err());
    }
}
