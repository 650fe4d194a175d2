//! Joint rate-distortion training of encoder, decoder, and entropy model.

mod ablate;
mod adam;
mod loss;
mod run;

pub use ablate::{ablation_ladder, coord_variants, run_ablation, run_variant, AblationOutcome, AblationSpec, Variant, VariantCurve};
pub use adam::{adam_step, clip_global_norm, global_grad_norm, OptimState};
pub use loss::{rd_loss, LossTerms, RDLossConfig, DISTORTION_SCALE, LAMBDA_GRID};
pub use run::{default_milestones, median, train, LogRecord, TrainOutcome, TrainRunSpec};
