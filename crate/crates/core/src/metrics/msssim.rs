//! Multi-scale structural similarity for [h, w, c] images with peak 1.
//!
//! Scales are built by 2x2 mean pooling with floored dimensions. The scale
//! count is the largest M <= 5 whose coarsest level still has a minimum
//! dimension of at least 10; fewer than 3 scales is an error. The window is
//! 11 taps (Gaussian, sigma 1.5) shrunk to the largest odd width that fits
//! whenever a level is narrower than 11.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Published five-scale exponents, applied as-is when all 5 scales are
/// available and renormalised to sum 1 over the first M otherwise.
pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;
const MAX_SCALES: usize = 5;
const MIN_SCALES: usize = 3;
const MIN_COARSE_DIM: usize = 10;
const FULL_WINDOW: usize = 11;
const SIGMA: f64 = 1.5;

/// dB view is -10 log10(1 - raw), capped here for identical inputs.
pub const MSSSIM_DB_CAP: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MsSsim {
    pub raw: f64,
    pub db: f64,
    /// Number of scales actually used (3..=5).
    pub scales: usize,
}

/// Scales usable for a given minimum image dimension, capped at 5.
pub fn scale_count(min_dim: usize) -> usize {
    let mut dim = min_dim;
    let mut m = 0;
    while m < MAX_SCALES && dim >= MIN_COARSE_DIM {
        m += 1;
        dim /= 2;
    }
    m
}

fn window_for(min_dim: usize) -> usize {
    let cap = FULL_WINDOW.min(min_dim);
    if cap % 2 == 0 { cap - 1 } else { cap }
}

fn gaussian_window(taps: usize) -> Vec<f64> {
    let c = (taps - 1) as f64 / 2.0;
    let mut w: Vec<f64> = (0..taps)
        .map(|k| (-((k as f64 - c) * (k as f64 - c)) / (2.0 * SIGMA * SIGMA)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    w
}

/// Separable valid-mode filter: rows then columns, output shrinks by taps-1.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64]) -> (Vec<f64>, usize, usize) {
    let t = win.len();
    let ow = w - t + 1;
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * plane[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let oh = h - t + 1;
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

fn downsample2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let oh = h / 2;
    let ow = w / 2;
    let mut out = vec![0.0f64; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let p = 2 * y * w + 2 * x;
            out[y * ow + x] = 0.25 * (plane[p] + plane[p + 1] + plane[p + w] + plane[p + w + 1]);
        }
    }
    (out, oh, ow)
}

/// Mean luminance and contrast-structure terms over one scale of one plane.
fn ssim_scale(x: &[f64], y: &[f64], h: usize, w: usize, taps: usize) -> (f64, f64) {
    let win = gaussian_window(taps);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, oh, ow) = filter_valid(x, h, w, &win);
    let (my, _, _) = filter_valid(y, h, w, &win);
    let (mxx, _, _) = filter_valid(&xx, h, w, &win);
    let (myy, _, _) = filter_valid(&yy, h, w, &win);
    let (mxy, _, _) = filter_valid(&xy, h, w, &win);
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..oh * ow {
        let vx = mxx[i] - mx[i] * mx[i];
        let vy = myy[i] - my[i] * my[i];
        let cov = mxy[i] - mx[i] * my[i];
        let l = (2.0 * mx[i] * my[i] + C1) / (mx[i] * mx[i] + my[i] * my[i] + C1);
        let cs = (2.0 * cov + C2) / (vx + vy + C2);
        // Fractional exponents need non-negative bases.
        l_sum += l.max(0.0);
        cs_sum += cs.max(0.0);
    }
    let n = (oh * ow) as f64;
    (l_sum / n, cs_sum / n)
}

fn extract_plane(img: &Tensor<f32>, channel: usize) -> Vec<f64> {
    let s = img.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let d = img.data();
    (0..h * w).map(|p| f64::from(d[p * c + channel])).collect()
}

pub fn msssim_db(raw: f64) -> f64 {
    if raw >= 1.0 {
        MSSSIM_DB_CAP
    } else {
        (-10.0 * (1.0 - raw).log10()).min(MSSSIM_DB_CAP)
    }
}

/// Multi-scale SSIM averaged over channels. Values are treated as [0, 1].
pub fn ms_ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<MsSsim> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "ms_ssim",
            format!("shapes differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let shape = a.shape();
    if shape.len() != 3 || shape[2] == 0 {
        return Err(Error::shape("ms_ssim", format!("want [h, w, c], got {shape:?}")));
    }
    let (h, w, channels) = (shape[0], shape[1], shape[2]);
    let m = scale_count(h.min(w));
    if m < MIN_SCALES {
        return Err(Error::Invalid(format!(
            "image {h}x{w} supports {m} scale(s); multi-scale comparison needs at least \
             {MIN_SCALES} (minimum dimension 40)"
        )));
    }
    let mut weights: Vec<f64> = SCALE_WEIGHTS[..m].to_vec();
    if m < MAX_SCALES {
        let total: f64 = weights.iter().sum();
        for v in &mut weights {
            *v /= total;
        }
    }

    let mut raw_mean = 0.0f64;
    for c in 0..channels {
        let mut x = extract_plane(a, c);
        let mut y = extract_plane(b, c);
        let (mut ph, mut pw) = (h, w);
        let mut score = 1.0f64;
        for (s, &wt) in weights.iter().enumerate() {
            let taps = window_for(ph.min(pw));
            let (l, cs) = ssim_scale(&x, &y, ph, pw, taps);
            score *= cs.powf(wt);
            if s + 1 == m {
                score *= l.powf(wt);
            } else {
                let (nx, nh, nw) = downsample2(&x, ph, pw);
                let (ny, _, _) = downsample2(&y, ph, pw);
                x = nx;
                y = ny;
                ph = nh;
                pw = nw;
            }
        }
        raw_mean += score;
    }
    raw_mean /= channels as f64;
    let raw = raw_mean.clamp(0.0, 1.0);
    Ok(MsSsim { raw, db: msssim_db(raw), scales: m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    // Direct-formula reference: per-window weighted moments with an explicit
    // 2D kernel, no separable filtering, no shared statistics code.
    fn direct_ms_ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let s = a.shape();
        let (h, w, channels) = (s[0], s[1], s[2]);
        let m = scale_count(h.min(w));
        assert!(m >= MIN_SCALES);
        let mut weights: Vec<f64> = SCALE_WEIGHTS[..m].to_vec();
        if m < MAX_SCALES {
            let t: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|v| *v /= t);
        }
        let mut total = 0.0;
        for c in 0..channels {
            let mut x = extract_plane(a, c);
            let mut y = extract_plane(b, c);
            let (mut ph, mut pw) = (h, w);
            let mut score = 1.0;
            for (s, &wt) in weights.iter().enumerate() {
                let taps = window_for(ph.min(pw));
                let g1 = gaussian_window(taps);
                let mut kern = vec![0.0f64; taps * taps];
                for i in 0..taps {
                    for j in 0..taps {
                        kern[i * taps + j] = g1[i] * g1[j];
                    }
                }
                let (oh, ow) = (ph - taps + 1, pw - taps + 1);
                let (mut lsum, mut csum) = (0.0, 0.0);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (mut sx, mut sy, mut sxx, mut syy, mut sxy) =
                            (0.0, 0.0, 0.0, 0.0, 0.0);
                        for ky in 0..taps {
                            for kx in 0..taps {
                                let wgt = kern[ky * taps + kx];
                                let px = x[(oy + ky) * pw + ox + kx];
                                let py = y[(oy + ky) * pw + ox + kx];
                                sx += wgt * px;
                                sy += wgt * py;
                                sxx += wgt * px * px;
                                syy += wgt * py * py;
                                sxy += wgt * px * py;
                            }
                        }
                        let (vx, vy, cov) = (sxx - sx * sx, syy - sy * sy, sxy - sx * sy);
                        let l = (2.0 * sx * sy + C1) / (sx * sx + sy * sy + C1);
                        let cs = (2.0 * cov + C2) / (vx + vy + C2);
                        lsum += l.max(0.0);
                        csum += cs.max(0.0);
                    }
                }
                let n = (oh * ow) as f64;
                score *= (csum / n).powf(wt);
                if s + 1 == m {
                    score *= (lsum / n).powf(wt);
                } else {
                    let (nh, nw) = (ph / 2, pw / 2);
                    let mut nx = vec![0.0; nh * nw];
                    let mut ny = vec![0.0; nh * nw];
                    for yy in 0..nh {
                        for xx in 0..nw {
                            let p = 2 * yy * pw + 2 * xx;
                            nx[yy * nw + xx] = (x[p] + x[p + 1] + x[p + pw] + x[p + pw + 1]) / 4.0;
                            ny[yy * nw + xx] = (y[p] + y[p + 1] + y[p + pw] + y[p + pw + 1]) / 4.0;
                        }
                    }
                    x = nx;
                    y = ny;
                    ph = nh;
                    pw = nw;
                }
            }
            total += score;
        }
        (total / channels as f64).clamp(0.0, 1.0)
    }

    fn noisy_pair(seed: u64, h: usize, w: usize, sigma: f32) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let base: Vec<f32> = (0..h * w * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        let noisy: Vec<f32> = base
            .iter()
            .map(|&v| (v + sigma * rng.gen_range(-0.5f32..0.5)).clamp(0.0, 1.0))
            .collect();
        (
            Tensor::new([h, w, 3], base).unwrap(),
            Tensor::new([h, w, 3], noisy).unwrap(),
        )
    }

    #[test]
    fn identical_images_reach_unity() {
        let (a, _) = noisy_pair(7, 160, 160, 0.0);
        let r = ms_ssim(&a, &a).unwrap();
        assert_eq!(r.scales, 5);
        assert!((r.raw - 1.0).abs() < 1e-12, "raw {}", r.raw);
        assert_eq!(r.db, MSSSIM_DB_CAP);
    }

    #[test]
    fn matches_the_direct_formula_on_random_pairs() {
        for seed in 0..5u64 {
            let (a, b) = noisy_pair(100 + seed, 160, 160, 0.3);
            let fast = ms_ssim(&a, &b).unwrap();
            let slow = direct_ms_ssim(&a, &b);
            assert!(
                (fast.raw - slow).abs() < 1e-4,
                "seed {seed}: separable {} vs direct {slow}",
                fast.raw
            );
        }
    }

    #[test]
    fn scale_count_follows_the_halving_rule() {
        assert_eq!(scale_count(160), 5);
        assert_eq!(scale_count(80), 4);
        assert_eq!(scale_count(64), 3);
        assert_eq!(scale_count(40), 3);
        assert_eq!(scale_count(39), 2);
        assert_eq!(scale_count(10), 1);
        assert_eq!(scale_count(9), 0);
    }

    #[test]
    fn small_images_are_rejected() {
        let a = Tensor::zeros(&[32, 32, 3]);
        let err = ms_ssim(&a, &a).unwrap_err().to_string();
        assert!(err.contains("at least 3"), "{err}");
    }

    #[test]
    fn more_noise_scores_lower() {
        let (a, b_light) = noisy_pair(11, 80, 80, 0.1);
        let (_, b_heavy) = noisy_pair(11, 80, 80, 0.5);
        let light = ms_ssim(&a, &b_light).unwrap();
        let heavy = ms_ssim(&a, &b_heavy).unwrap();
        assert!(light.raw > heavy.raw, "{} vs {}", light.raw, heavy.raw);
        assert!(light.db > heavy.db);
    }

    #[test]
    fn db_mapping_is_monotone_and_capped() {
        assert_eq!(msssim_db(1.0), 100.0);
        assert!((msssim_db(0.9) - 10.0).abs() < 1e-12);
        assert!((msssim_db(0.99) - 20.0).abs() < 1e-12);
        assert!(msssim_db(0.0).abs() < 1e-12);
    }

    #[test]
    fn window_shrinks_to_fit_the_coarsest_level() {
        assert_eq!(window_for(160), 11);
        assert_eq!(window_for(11), 11);
        assert_eq!(window_for(10), 9);
    }
}
