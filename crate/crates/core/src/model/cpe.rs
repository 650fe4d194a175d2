//! Color prior encoders.
//!
//! Captures share one illumination and one optics field, so a compressed
//! description of the whole frame carries information a crop alone cannot.
//! Two encoders extract it:
//!
//! * the global branch pools the downsampled full capture into a single
//!   per-channel (gain, offset) vector, and
//! * the local branch turns the crop itself into per-stage (gain, offset)
//!   maps at each trunk resolution.
//!
//! Both start near identity (gains 1, offsets 0) via their head bias init.

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::params::param;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Short side the full capture is reduced to before the global branch.
pub const GLOBAL_RES: usize = 64;

/// Conditioning signals consumed by the trunk's modulation stages.
#[derive(Debug)]
pub struct ColorPriors<T: Scalar> {
    /// `[2C]`: per-channel gains then offsets, from the whole capture.
    global: Option<Tensor<T>>,
    /// One `[h_s, w_s, 2C]` map per stage, from the crop.
    locals: Vec<Tensor<T>>,
}

impl<T: Scalar> ColorPriors<T> {
    /// Priors for a config that modulates nothing.
    pub fn empty() -> Self {
        ColorPriors { global: None, locals: Vec::new() }
    }

    pub fn global(&self) -> Result<&Tensor<T>> {
        self.global
            .as_ref()
            .ok_or_else(|| Error::Invalid("global color prior was not computed for this config".into()))
    }

    /// Stage-indexed local prior (0-based).
    pub fn local(&self, stage: usize) -> Result<&Tensor<T>> {
        self.locals.get(stage).ok_or_else(|| {
            Error::Invalid(format!(
                "local color prior for stage {stage} was not computed ({} available)",
                self.locals.len()
            ))
        })
    }

    pub fn has_global(&self) -> bool {
        self.global.is_some()
    }

    pub fn num_locals(&self) -> usize {
        self.locals.len()
    }
}

/// Pick the block-average factor that brings the stacked capture near
/// [`GLOBAL_RES`] while keeping the result divisible by 8 (three stride-2
/// convs follow).
pub fn global_pool_factor(hs: usize, ws: usize) -> Result<usize> {
    let want = (hs.min(ws) / GLOBAL_RES).max(1);
    for f in (1..=want).rev() {
        if hs % f == 0 && ws % f == 0 && (hs / f) % 8 == 0 && (ws / f) % 8 == 0 {
            return Ok(f);
        }
    }
    Err(Error::Config(format!(
        "global color branch needs a stacked capture reducible to dims divisible by 8, got {hs}x{ws}"
    )))
}

/// Compute the priors `config` asks for. `full_raw` is the whole capture in
/// stacked form `[H/2, W/2, 4]` and is only required when the global branch
/// is on; `x_crop` is the stacked crop the local branch reads.
pub fn cpe<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    config: &ModelConfig,
    full_raw: Option<&Tensor<T>>,
    x_crop: &Tensor<T>,
) -> Result<ColorPriors<T>> {
    let c = config.base_channels;
    let mut priors = ColorPriors::empty();

    if config.use_gft {
        let full = full_raw
            .ok_or_else(|| Error::Invalid("global color prior needs the full stacked capture".into()))?;
        if full.rank() != 3 || full.shape()[2] != 4 {
            return Err(Error::shape(
                "cpe",
                format!("full capture must be stacked [h,w,4], got {:?}", full.shape()),
            ));
        }
        let f = global_pool_factor(full.shape()[0], full.shape()[1])?;
        let small = if f == 1 { full.clone() } else { tape.area_downsample(full, f)? };
        let g = conv(tape, params, "enc.cpe.g1", &small, 2)?;
        let g = tape.relu(&g)?;
        let g = conv(tape, params, "enc.cpe.g2", &g, 2)?;
        let g = tape.relu(&g)?;
        let g = conv(tape, params, "enc.cpe.g3", &g, 2)?;
        let g = tape.relu(&g)?;
        let pooled = tape.global_avg_pool(&g)?;
        let row = tape.reshape(&pooled, &[1, c])?;
        let lin = linear(tape, params, "enc.cpe.g_lin", &row)?;
        priors.global = Some(tape.reshape(&lin, &[2 * c])?);
    }

    if config.use_lft {
        if x_crop.rank() != 3 || x_crop.shape()[2] != 4 {
            return Err(Error::shape(
                "cpe",
                format!("crop must be stacked [h,w,4], got {:?}", x_crop.shape()),
            ));
        }
        let t = conv(tape, params, "enc.cpe.l1", x_crop, 1)?;
        let t = tape.relu(&t)?;
        let t = conv(tape, params, "enc.cpe.l2", &t, 1)?;
        let mut t = tape.relu(&t)?;
        for s in 1..=config.stages {
            let d = conv(tape, params, &format!("enc.cpe.l_down{s}"), &t, 2)?;
            t = tape.relu(&d)?;
            priors.locals.push(conv(tape, params, &format!("enc.cpe.l_head{s}"), &t, 1)?);
        }
    }

    Ok(priors)
}

pub(crate) fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    prefix: &str,
    x: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let w = param(params, &format!("{prefix}.w"))?;
    let b = param(params, &format!("{prefix}.b"))?;
    tape.conv2d(x, w, b, stride)
}

/// Matmul over the last axis plus bias. The bias rides a channel-affine with
/// a constant unit gain so it stays a single differentiable op.
pub(crate) fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let w = param(params, &format!("{prefix}.w"))?;
    let b = param(params, &format!("{prefix}.b"))?;
    let y = tape.matmul(x, w)?;
    let c = *y.shape().last().expect("matmul output has rank >= 2");
    let ones = Tensor::full(&[c], T::ONE);
    tape.channel_affine(&y, &ones, b)
}
