//! Effective receptive field probes.
//!
//! [`effective_receptive_field`] measures how far the center latent unit
//! actually reaches into an input: run the encoder, backpropagate from that
//! unit, and report per-site gradient magnitudes normalized to a max of 1.
//! [`architectural_support`] computes the set of sites the wiring permits
//! to matter at all, by walking the layer structure backwards. Measured
//! support can only ever be a subset of the architectural one; comparing
//! the two separates "the model ignores this" from "the model cannot see
//! this".

use super::config::ModelConfig;
use super::net::encode;
use super::params::ModelParams;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Which encoder input to probe.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErfInput {
    /// The stacked RAW crop.
    Crop,
    /// The stacked full-capture context.
    Global,
    /// The stacked coordinate map.
    Coords,
}

/// Boolean spatial mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportMask {
    pub h: usize,
    pub w: usize,
    bits: Vec<bool>,
}

impl SupportMask {
    pub fn empty(h: usize, w: usize) -> SupportMask {
        SupportMask { h, w, bits: vec![false; h * w] }
    }

    pub fn full(h: usize, w: usize) -> SupportMask {
        SupportMask { h, w, bits: vec![true; h * w] }
    }

    /// Sites of `map` with strictly positive magnitude.
    pub fn from_map<T: Scalar>(map: &Tensor<T>) -> Result<SupportMask> {
        if map.rank() != 2 {
            return Err(Error::shape("support", format!("want [h,w], got {:?}", map.shape())));
        }
        let (h, w) = (map.shape()[0], map.shape()[1]);
        let bits = map.data().iter().map(|v| v.to_f64() > 0.0).collect();
        Ok(SupportMask { h, w, bits })
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j]
    }

    pub fn set(&mut self, i: usize, j: usize) {
        self.bits[i * self.w + j] = true;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.bits.iter().any(|&b| b)
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// True when every set site of `other` is also set here.
    pub fn covers(&self, other: &SupportMask) -> bool {
        self.h == other.h
            && self.w == other.w
            && self.bits.iter().zip(&other.bits).all(|(a, b)| *a || !*b)
    }

    pub fn union(&self, other: &SupportMask) -> SupportMask {
        assert_eq!((self.h, self.w), (other.h, other.w), "mask dims differ");
        SupportMask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        }
    }

    /// Backward support of a same-padded 3x3 stride-1 conv: grow by one.
    fn dilate1(&self) -> SupportMask {
        let mut out = SupportMask::empty(self.h, self.w);
        for i in 0..self.h {
            for j in 0..self.w {
                if self.get(i, j) {
                    mark_neighborhood(&mut out, i as isize, j as isize);
                }
            }
        }
        out
    }

    /// Backward support of a same-padded 3x3 stride-2 conv: output site o
    /// reads input rows/cols 2o-1 ..= 2o+1 of the doubled grid.
    fn conv3_s2_back(&self) -> SupportMask {
        let mut out = SupportMask::empty(self.h * 2, self.w * 2);
        for i in 0..self.h {
            for j in 0..self.w {
                if self.get(i, j) {
                    mark_neighborhood(&mut out, 2 * i as isize, 2 * j as isize);
                }
            }
        }
        out
    }
}

fn mark_neighborhood(mask: &mut SupportMask, ci: isize, cj: isize) {
    for di in -1..=1 {
        for dj in -1..=1 {
            let (y, x) = (ci + di, cj + dj);
            if y >= 0 && (y as usize) < mask.h && x >= 0 && (x as usize) < mask.w {
                mask.set(y as usize, x as usize);
            }
        }
    }
}

/// Backward support of one attention block. The pooled channel gate inside
/// it averages the whole map, so any nonempty support reaches every
/// position; the conv and window spreads are subsumed by that.
fn csa_back(m: &SupportMask) -> SupportMask {
    if m.any() {
        SupportMask::full(m.h, m.w)
    } else {
        m.clone()
    }
}

/// Sites of the probed input that the wiring allows to influence the center
/// latent unit. `hs` x `ws` is the probed input's own resolution: the
/// stacked crop grid for `Crop`/`Coords`, the stacked capture grid for
/// `Global` (whose pooled pathway connects every site, hence a full mask).
pub fn architectural_support(
    config: &ModelConfig,
    hs: usize,
    ws: usize,
    probe: ErfInput,
) -> Result<SupportMask> {
    if matches!(probe, ErfInput::Global) {
        return Ok(SupportMask::full(hs, ws));
    }
    let (lh, lw) = config.latent_dims(2 * hs, 2 * ws)?;
    let mut m = SupportMask::empty(lh, lw);
    m.set(lh / 2, lw / 2);

    // Walk the encoder backwards from the latent head (1x1, no spread).
    let mut lft_touch: Vec<Option<SupportMask>> = vec![None; config.stages];
    for s in (1..=config.stages).rev() {
        for _ in 0..config.cimc_blocks {
            if config.use_lft {
                let slot = &mut lft_touch[s - 1];
                *slot = Some(match slot.take() {
                    Some(prev) => prev.union(&m),
                    None => m.clone(),
                });
            }
            if config.use_csa {
                m = csa_back(&m);
            }
        }
        m = m.conv3_s2_back();
    }

    if matches!(probe, ErfInput::Coords) {
        return Ok(if config.coord_gate_active() {
            m.dilate1()
        } else {
            SupportMask::empty(hs, ws)
        });
    }

    // Crop: the stem conv, plus the local-prior encoder pathway (its heads
    // are 1x1, each stage sits below one more stride-2 conv, and the trunk
    // adds two 3x3 convs at the stacked resolution).
    let mut out = m.dilate1();
    for (idx, slot) in lft_touch.into_iter().enumerate() {
        let Some(mut lm) = slot else { continue };
        for _ in 0..=idx {
            lm = lm.conv3_s2_back();
        }
        out = out.union(&lm.dilate1().dilate1());
    }
    Ok(out)
}

/// Gradient of the latent unit at `pos` (summed over channels) with respect
/// to the probed input. Returns the raw gradient plus the leaf's [h, w, c].
/// `None` means the probed input never entered the computation.
fn position_gradient<T: Scalar>(
    params: &ModelParams<T>,
    x_crop: &Tensor<T>,
    coords: Option<&Tensor<T>>,
    full_raw: Option<&Tensor<T>>,
    probe: ErfInput,
    pos: Option<(usize, usize)>,
) -> Result<Option<(Vec<T>, [usize; 3])>> {
    let config = params.config().clone();
    let mut tape: Tape<T> = Tape::new();

    let leaf;
    let crop_t;
    let mut coords_t = coords.map(|t| t.detach());
    let mut full_t = full_raw.map(|t| t.detach());
    match probe {
        ErfInput::Crop => {
            leaf = tape.leaf(x_crop);
            crop_t = leaf.clone();
        }
        ErfInput::Coords => {
            let c = coords.ok_or_else(|| Error::Invalid("coordinate probe needs a coordinate map".into()))?;
            leaf = tape.leaf(c);
            coords_t = Some(leaf.clone());
            crop_t = x_crop.detach();
        }
        ErfInput::Global => {
            let f = full_raw
                .ok_or_else(|| Error::Invalid("global probe needs the stacked capture".into()))?;
            leaf = tape.leaf(f);
            full_t = Some(leaf.clone());
            crop_t = x_crop.detach();
        }
    }

    let y = encode(&mut tape, params.tensors(), &config, &crop_t, coords_t.as_ref(), full_t.as_ref())?;
    let dims = [leaf.shape()[0], leaf.shape()[1], leaf.shape()[2]];
    if !y.is_attached() {
        return Ok(None);
    }

    let (lh, lw, lc) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let (pi, pj) = pos.unwrap_or((lh / 2, lw / 2));
    let target = pi * lw + pj;
    let pick = Tensor::from_fn(&[lh, lw, lc], |k| if k / lc == target { T::ONE } else { T::ZERO });
    let picked = tape.mul(&y, &pick)?;
    let loss = tape.sum(&picked)?;
    let mut grads = tape.backward(&loss)?;
    Ok(Some((grads.take(&leaf)?, dims)))
}

fn magnitude_map(g: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut mag = vec![0.0f64; h * w];
    for (site, m) in mag.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for ch in 0..c {
            acc += g[site * c + ch] * g[site * c + ch];
        }
        *m = acc.sqrt();
    }
    mag
}

fn normalize_max(mag: &mut [f64]) {
    let mx = mag.iter().fold(0.0f64, |a, &b| a.max(b));
    if mx > 0.0 {
        for v in mag.iter_mut() {
            *v /= mx;
        }
    }
}

/// Gradient-magnitude map of the center latent unit (summed over channels)
/// with respect to one input, at that input's resolution, normalized so the
/// largest entry is 1. An input the config never reads yields all zeros.
pub fn effective_receptive_field<T: Scalar>(
    params: &ModelParams<T>,
    x_crop: &Tensor<T>,
    coords: Option<&Tensor<T>>,
    full_raw: Option<&Tensor<T>>,
    probe: ErfInput,
) -> Result<Tensor<T>> {
    match position_gradient(params, x_crop, coords, full_raw, probe, None)? {
        None => {
            let hs = x_crop.shape()[0];
            let ws = x_crop.shape()[1];
            let (h, w) = match probe {
                ErfInput::Crop => (hs, ws),
                ErfInput::Coords => (coords.unwrap().shape()[0], coords.unwrap().shape()[1]),
                ErfInput::Global => (full_raw.unwrap().shape()[0], full_raw.unwrap().shape()[1]),
            };
            Ok(Tensor::zeros(&[h, w]))
        }
        Some((g, [h, w, c])) => {
            let raw: Vec<f64> = g.iter().map(|v| v.to_f64()).collect();
            let mut mag = magnitude_map(&raw, h, w, c);
            normalize_max(&mut mag);
            Tensor::new(vec![h, w], mag.into_iter().map(T::from_f64).collect())
        }
    }
}

/// How strongly the full-capture pathway reaches each latent position: one
/// backward pass per position, entry = total gradient magnitude at the
/// capture input, normalized so the largest entry is 1. A zero entry means
/// that position is cut off from the capture context entirely.
pub fn global_influence<T: Scalar>(
    params: &ModelParams<T>,
    x_crop: &Tensor<T>,
    coords: Option<&Tensor<T>>,
    full_raw: &Tensor<T>,
) -> Result<Tensor<T>> {
    let hs = x_crop.shape()[0];
    let ws = x_crop.shape()[1];
    let (lh, lw) = params.config().latent_dims(2 * hs, 2 * ws)?;
    let mut out = vec![0.0f64; lh * lw];
    for pi in 0..lh {
        for pj in 0..lw {
            let got = position_gradient(
                params,
                x_crop,
                coords,
                Some(full_raw),
                ErfInput::Global,
                Some((pi, pj)),
            )?;
            if let Some((g, _)) = got {
                let mut acc = 0.0f64;
                for v in &g {
                    let v = v.to_f64();
                    acc += v * v;
                }
                out[pi * lw + pj] = acc.sqrt();
            }
        }
    }
    normalize_max(&mut out);
    Tensor::new(vec![lh, lw], out.into_iter().map(T::from_f64).collect())
}
