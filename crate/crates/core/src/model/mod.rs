//! The compression model: coordinate-gated restoration, color prior
//! encoders, window attention blocks, feature modulation, and the
//! encoder/decoder pair around the latent.

mod blocks;
mod config;
mod cpe;
mod erf;
mod net;
mod params;

pub use blocks::{cadr_forward, cimc_forward, csa_forward, gft, lft};
pub use config::{CoordMode, ModelConfig};
pub use cpe::{cpe, global_pool_factor, ColorPriors, GLOBAL_RES};
pub use erf::{architectural_support, effective_receptive_field, global_influence, ErfInput, SupportMask};
pub use net::{decode, encode, stacked_coords};
pub use params::{param, parameter_specs, ModelParams, ParamSpec};
