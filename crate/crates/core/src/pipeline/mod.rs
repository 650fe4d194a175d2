//! End-to-end orchestration: dataset builds, training runs, evaluation
//! sweeps, and the reproducible demo that exercises the whole chain.

mod demo;
mod selftest;

pub use demo::{run_demo, DemoReport, DemoSpec};
pub use selftest::{
    codec_conformance, e2e_grad_check, metric_oracles, selftest, CodecConformance,
    E2eGradReport, OracleCheck, SelftestReport, E2E_GRAD_TOL, OP_GRAD_TOL,
};
