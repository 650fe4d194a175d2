//! Synthetic RAW capture simulation: procedural scenes, coordinate-dependent
//! lens falloff and dark shading, Bayer mosaicing, sensor noise, and the
//! reference ISP that produces training targets.
//!
//! The supervision pairs a degraded RAW with the ISP output of the *clean*
//! scene, so removing the coordinate-dependent degradations is part of what
//! a model trained on this data has to learn.

mod crop;
mod dataset;
mod field;
mod isp;
mod mosaic;
mod scene;

pub use crop::{make_crop, stack_plane, CropSample};
pub use dataset::{
    build_dataset, crop_plan, generate_capture, load_dataset, Dataset, DatasetConfig, DatasetRecord,
    DATASET_MAGIC,
};
pub use field::{dark_gradient_bound, DistortionField, FieldParams, DARK_AMPLITUDE_MAX};
pub use isp::{reference_isp, ToneParams};
pub use mosaic::{bayer_channel, degrade, mosaic, RawCapture};
pub use scene::SceneImage;
