//! Image quality metrics (PSNR, MS-SSIM, CIELAB delta E), rate accounting,
//! and Bjontegaard-delta curve comparison.

mod bd;
mod deltae;
mod evaluate;
mod msssim;
mod psnr;

pub use bd::{bd_metric, bd_rate, BdResult};
pub use deltae::{delta_e, srgb_to_lab, srgb_to_linear, D65};
pub use evaluate::{
    bd_csv, bd_report, compress, decompress, eval_origins, evaluate_checkpoint, evaluate_model,
    likelihood_from_params, rd_csv, write_bd_csv, write_rd_csv, BdReport, RdPoint, BD_CSV_HEADER,
    RD_CSV_HEADER,
};
pub use msssim::{ms_ssim, msssim_db, scale_count, MsSsim, MSSSIM_DB_CAP, SCALE_WEIGHTS};
pub use psnr::{psnr, Psnr, PSNR_CAP};
