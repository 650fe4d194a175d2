//! Coordinate-dependent degradation fields: radial lens falloff, smooth
//! dark shading, and the heteroscedastic sensor noise model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Everything needed to regenerate a capture's V and D maps exactly.
/// Stored in the dataset manifest so tests can rebuild the maps from
/// parameters and compare against the stored tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldParams {
    /// Falloff radius as a fraction of the half-diagonal, in [0.5, 1.0].
    pub r0_frac: f64,
    /// Optical center, integer pixel coordinates so max V = 1 is attained
    /// on the grid.
    pub center: (u32, u32),
    /// Dark shading cosine terms: (amplitude, freq_i, freq_j, phase_i, phase_j).
    /// Frequencies are radians per pixel.
    pub cosines: [(f64, f64, f64, f64, f64); 3],
    /// Read noise standard deviation, sensor units.
    pub sigma_r: f64,
    /// Shot noise gain: variance contribution is `gain * signal`.
    pub gain: f64,
}

/// Total dark-shading amplitude stays at or below this.
pub const DARK_AMPLITUDE_MAX: f64 = 0.05;
/// Highest cosine frequency the sampler draws, in periods across an axis.
pub const DARK_MAX_PERIODS: f64 = 1.5;

/// Smoothness contract for dark shading: the per-pixel gradient of a sum of
/// cosines with total amplitude `DARK_AMPLITUDE_MAX` and at most
/// `DARK_MAX_PERIODS` periods across the shorter axis.
pub fn dark_gradient_bound(height: usize, width: usize) -> f64 {
    DARK_AMPLITUDE_MAX * 0.5 * DARK_MAX_PERIODS * std::f64::consts::TAU / height.min(width) as f64
}

impl FieldParams {
    /// Draw a random field for a capture. Amplitudes are sized so the
    /// coordinate-dependent effects are strong enough to separate a
    /// coordinate-aware model from a blind one.
    pub fn sample(rng: &mut ChaCha12Rng, height: usize, width: usize) -> FieldParams {
        let r0_frac = rng.gen_range(0.5..=1.0);
        let center = ((height / 2) as u32, (width / 2) as u32);
        let mut cosines = [(0.0, 0.0, 0.0, 0.0, 0.0); 3];
        // Split the amplitude budget across three terms; cap total at
        // DARK_AMPLITUDE_MAX with room below the gradient bound.
        let total_amp = rng.gen_range(0.6..=1.0) * DARK_AMPLITUDE_MAX;
        let weights: [f64; 3] = [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)];
        let wsum: f64 = weights.iter().sum();
        for (k, slot) in cosines.iter_mut().enumerate() {
            let amp = total_amp * weights[k] / wsum;
            // At most DARK_MAX_PERIODS periods across each axis keeps the
            // field inside the gradient bound by construction.
            let fi = rng.gen_range(0.5..DARK_MAX_PERIODS) * std::f64::consts::TAU / height as f64;
            let fj = rng.gen_range(0.5..DARK_MAX_PERIODS) * std::f64::consts::TAU / width as f64;
            let pi_ = rng.gen_range(0.0..std::f64::consts::TAU);
            let pj = rng.gen_range(0.0..std::f64::consts::TAU);
            *slot = (amp, fi, fj, pi_, pj);
        }
        FieldParams {
            r0_frac,
            center,
            cosines,
            sigma_r: rng.gen_range(0.005..0.015),
            gain: rng.gen_range(0.0001..0.0004),
        }
    }

    /// Lens falloff gain at radius `r` with falloff radius `r0`.
    pub fn vignette_gain(r: f64, r0: f64) -> f64 {
        let q = 1.0 + (r / r0) * (r / r0);
        1.0 / (q * q)
    }

    pub fn vignette_map(&self, height: usize, width: usize) -> Tensor<f32> {
        let half_diag = 0.5 * ((height * height + width * width) as f64).sqrt();
        let r0 = self.r0_frac * half_diag;
        let (ci, cj) = (self.center.0 as f64, self.center.1 as f64);
        let data = (0..height * width)
            .map(|k| {
                let (i, j) = ((k / width) as f64, (k % width) as f64);
                let r = ((i - ci).powi(2) + (j - cj).powi(2)).sqrt();
                Self::vignette_gain(r, r0) as f32
            })
            .collect();
        Tensor::new([height, width], data).expect("length matches")
    }

    pub fn dark_map(&self, height: usize, width: usize) -> Tensor<f32> {
        let data = (0..height * width)
            .map(|k| {
                let (i, j) = ((k / width) as f64, (k % width) as f64);
                let mut d = 0.0;
                for &(amp, fi, fj, pi_, pj) in &self.cosines {
                    // (1 + cos*cos)/2 stays in [0,1], so each term
                    // contributes [0, amp] and D >= 0 overall.
                    d += amp * 0.5 * (1.0 + (fi * i + pi_).cos() * (fj * j + pj).cos());
                }
                d as f32
            })
            .collect();
        Tensor::new([height, width], data).expect("length matches")
    }
}

/// Materialized degradation maps for one capture.
#[derive(Clone, Debug)]
pub struct DistortionField {
    pub height: usize,
    pub width: usize,
    pub vignette: Tensor<f32>,
    pub dark: Tensor<f32>,
    pub sigma_r: f64,
    pub gain: f64,
}

impl DistortionField {
    pub fn from_params(params: &FieldParams, height: usize, width: usize) -> DistortionField {
        DistortionField {
            height,
            width,
            vignette: params.vignette_map(height, width),
            dark: params.dark_map(height, width),
            sigma_r: params.sigma_r,
            gain: params.gain,
        }
    }

    /// An identity field: no falloff, no shading, no noise.
    pub fn identity(height: usize, width: usize) -> DistortionField {
        DistortionField {
            height,
            width,
            vignette: Tensor::full(&[height, width], 1.0),
            dark: Tensor::zeros(&[height, width]),
            sigma_r: 0.0,
            gain: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vignette.shape() != [self.height, self.width] || self.dark.shape() != [self.height, self.width] {
            return Err(Error::Invalid("distortion field maps do not match declared dims".into()));
        }
        let vmax = self.vignette.data().iter().cloned().fold(f32::MIN, f32::max);
        if !(0.999999..=1.000001).contains(&vmax) {
            return Err(Error::Invalid(format!("vignette max {vmax} is not 1")));
        }
        if self.vignette.data().iter().any(|&v| v <= 0.0 || v > 1.0 + 1e-6) {
            return Err(Error::Invalid("vignette gain out of (0, 1]".into()));
        }
        if self.dark.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("dark shading must be non-negative".into()));
        }
        // Smoothness: discrete gradient bound.
        let (h, w) = (self.height, self.width);
        let bound = dark_gradient_bound(h, w) as f32;
        let d = self.dark.data();
        for i in 0..h {
            for j in 0..w {
                let v = d[i * w + j];
                if j + 1 < w && (d[i * w + j + 1] - v).abs() > bound {
                    return Err(Error::Invalid(format!("dark shading gradient too steep at ({i},{j})")));
                }
                if i + 1 < h && (d[(i + 1) * w + j] - v).abs() > bound {
                    return Err(Error::Invalid(format!("dark shading gradient too steep at ({i},{j})")));
                }
            }
        }
        if self.sigma_r < 0.0 || self.gain < 0.0 {
            return Err(Error::Invalid("noise parameters must be non-negative".into()));
        }
        Ok(())
    }
}

pub(crate) fn standard_normal(rng: &mut ChaCha12Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub(crate) fn capture_rng(seed: u64, capture_id: u32, role: &str) -> ChaCha12Rng {
    let s = crate::tensor::derive_seed(seed, &format!("capture/{capture_id}/{role}"));
    ChaCha12Rng::seed_from_u64(s)
}
