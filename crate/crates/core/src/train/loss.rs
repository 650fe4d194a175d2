//! Rate-distortion loss: L = lambda * D + R.

use crate::tensor::{Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Lambda sweep for RD curves, highest rate pressure first.
pub const LAMBDA_GRID: [f64; 4] = [0.1, 0.025, 0.01, 0.005];

/// MSE is measured on [0,1] images but the loss convention scales it to an
/// 8-bit range, so lambda values stay comparable with common practice.
pub const DISTORTION_SCALE: f64 = 255.0 * 255.0;

#[derive(Clone, Copy, Debug)]
pub struct RDLossConfig {
    pub lambda: f64,
    pub distortion_scale: f64,
}

impl RDLossConfig {
    pub fn new(lambda: f64) -> Result<RDLossConfig> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive and finite, got {lambda}")));
        }
        Ok(RDLossConfig { lambda, distortion_scale: DISTORTION_SCALE })
    }

    /// Entry `k` of the lambda grid.
    pub fn for_lambda_index(k: usize) -> Result<RDLossConfig> {
        let lambda = *LAMBDA_GRID
            .get(k)
            .ok_or_else(|| Error::Config(format!("lambda index {k} out of range 0..{}", LAMBDA_GRID.len())))?;
        RDLossConfig::new(lambda)
    }
}

/// One loss evaluation: the attached scalar drives backward; the f64 fields
/// are the logged components, combined so that loss = lambda * distortion +
/// rate holds exactly in f64.
#[derive(Clone, Debug)]
pub struct LossTerms<T: Scalar> {
    pub total: Tensor<T>,
    pub loss: f64,
    pub distortion: f64,
    pub rate_bpp: f64,
    pub mse: f64,
}

/// Build L = lambda * scale * MSE(recon, target) + R on the tape.
/// `rate_bpp` must already be in bits per RAW pixel of the crop.
pub fn rd_loss<T: Scalar>(
    tape: &mut Tape<T>,
    recon: &Tensor<T>,
    target: &Tensor<T>,
    rate_bpp: &Tensor<T>,
    cfg: &RDLossConfig,
) -> Result<LossTerms<T>> {
    if rate_bpp.len() != 1 {
        return Err(Error::shape("rd-loss", format!("rate must be a scalar, got {:?}", rate_bpp.shape())));
    }
    let mse_t = tape.mse(recon, target)?;
    let weighted = tape.affine_const(&mse_t, cfg.lambda * cfg.distortion_scale, 0.0)?;
    let total = tape.add(&weighted, rate_bpp)?;

    let mse = mse_t.item().to_f64();
    let distortion = cfg.distortion_scale * mse;
    let rate = rate_bpp.item().to_f64();
    Ok(LossTerms { total, loss: cfg.lambda * distortion + rate, distortion, rate_bpp: rate, mse })
}
