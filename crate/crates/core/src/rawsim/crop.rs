//! Crop extraction with exact coordinate bookkeeping.
//!
//! Absolute coordinates ((i+m)/H, (j+n)/W) identify the crop's position on
//! the sensor, so coordinate-dependent degradations stay learnable after
//! cropping; relative coordinates (i/h, j/w) do not.

use super::mosaic::RawCapture;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct CropSample {
    /// Stacked RGGB crop `[h/2, w/2, 4]`.
    pub x_crop: Tensor<f32>,
    /// Crop origin in full-RAW pixels, both even.
    pub origin: (usize, usize),
    /// Full-RAW dims the origin refers to.
    pub raw_dims: (usize, usize),
    /// Absolute coordinate map `[h, w, 2]`: ((i+m)/H, (j+n)/W).
    pub coord_abs: Tensor<f32>,
    /// Relative coordinate map `[h, w, 2]`: (i/h, j/w).
    pub coord_rel: Tensor<f32>,
    /// Distortion-free target `[h, w, 3]`.
    pub target: Tensor<f32>,
    /// Ground-truth degradation crops `[h, w]`, for diagnostics.
    pub vignette: Tensor<f32>,
    pub dark: Tensor<f32>,
}

fn slice2d(src: &Tensor<f32>, full_w: usize, ch: usize, m: usize, n: usize, h: usize, w: usize) -> Vec<f32> {
    let d = src.data();
    let mut out = Vec::with_capacity(h * w * ch);
    for i in 0..h {
        let row = ((m + i) * full_w + n) * ch;
        out.extend_from_slice(&d[row..row + w * ch]);
    }
    out
}

/// Stack a full Bayer plane `[h, w]` into `[h/2, w/2, 4]`, phase-major:
/// channel p holds phase (p/2, p%2), so RGGB lands as R, G1, G2, B.
pub fn stack_plane(raw: &Tensor<f32>) -> Result<Tensor<f32>> {
    if raw.rank() != 2 || raw.shape()[0] % 2 != 0 || raw.shape()[1] % 2 != 0 {
        return Err(Error::shape(
            "stack_plane",
            format!("want an even-dimensioned [h,w] plane, got {:?}", raw.shape()),
        ));
    }
    Ok(stack_rggb(raw.data(), raw.shape()[0], raw.shape()[1]))
}

/// Stack a Bayer plane crop into 4 half-resolution channels, phase-major:
/// channel p holds phase (p/2, p%2).
fn stack_rggb(plane: &[f32], h: usize, w: usize) -> Tensor<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; h * w];
    for i in 0..oh {
        for j in 0..ow {
            let dst = &mut out[(i * ow + j) * 4..][..4];
            for p in 0..4 {
                dst[p] = plane[(2 * i + p / 2) * w + 2 * j + p % 2];
            }
        }
    }
    Tensor::new([oh, ow, 4], out).expect("length matches")
}

pub fn make_crop(
    capture: &RawCapture,
    target_full: &Tensor<f32>,
    m: usize,
    n: usize,
    h: usize,
    w: usize,
) -> Result<CropSample> {
    let (cap_h, cap_w) = (capture.height, capture.width);
    if m % 2 != 0 || n % 2 != 0 {
        return Err(Error::Invalid(format!("crop origin must be even, got ({m},{n})")));
    }
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::Invalid(format!("crop dims must be positive and even, got {h}x{w}")));
    }
    if m + h > cap_h || n + w > cap_w {
        return Err(Error::Invalid(format!(
            "crop ({m},{n})+{h}x{w} exceeds capture {cap_h}x{cap_w}"
        )));
    }
    if target_full.shape() != [cap_h, cap_w, 3] {
        return Err(Error::shape(
            "make_crop",
            format!("target must be [{cap_h},{cap_w},3], got {:?}", target_full.shape()),
        ));
    }

    let raw_crop = slice2d(&capture.raw, cap_w, 1, m, n, h, w);
    let x_crop = stack_rggb(&raw_crop, h, w);

    let mut coord_abs = Vec::with_capacity(h * w * 2);
    let mut coord_rel = Vec::with_capacity(h * w * 2);
    for i in 0..h {
        for j in 0..w {
            coord_abs.push((i + m) as f32 / cap_h as f32);
            coord_abs.push((j + n) as f32 / cap_w as f32);
            coord_rel.push(i as f32 / h as f32);
            coord_rel.push(j as f32 / w as f32);
        }
    }

    Ok(CropSample {
        x_crop,
        origin: (m, n),
        raw_dims: (cap_h, cap_w),
        coord_abs: Tensor::new([h, w, 2], coord_abs)?,
        coord_rel: Tensor::new([h, w, 2], coord_rel)?,
        target: Tensor::new([h, w, 3], slice2d(target_full, cap_w, 3, m, n, h, w))?,
        vignette: Tensor::new([h, w], slice2d(&capture.field.vignette, cap_w, 1, m, n, h, w))?,
        dark: Tensor::new([h, w], slice2d(&capture.field.dark, cap_w, 1, m, n, h, w))?,
    })
}
