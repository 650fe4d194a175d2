//! End-to-end learned compression for camera RAW captures.
//!
//! The pipeline turns a degraded RAW crop into a compact bitstream and back
//! into a restored, tone-mapped RGB image. It is organized as:
//!
//! * [`tensor`]: a small reverse-mode autodiff engine with exactly the
//!   operations the model needs, plus checkpoint serialization.
//! * [`rawsim`]: a synthetic RAW capture simulator (optics, sensor noise,
//!   Bayer mosaic) and dataset container.
//! * [`model`]: the coordinate-aware encoder/decoder network.
//! * [`codec`]: discretized-Gaussian entropy model and range coder.
//! * [`train`]: rate-distortion loss, Adam, training and ablation drivers.
//! * [`metrics`]: PSNR / MS-SSIM / color-difference metrics and
//!   Bjontegaard-delta curve comparison.
//! * [`pipeline`]: the demo driver gluing everything together.

pub mod codec;
pub mod error;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rawsim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
