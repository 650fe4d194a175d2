//! Finite-difference gradient verification.
//!
//! Runs every op in 64-bit precision: analytic gradients from the tape
//! against central differences of a randomly weighted scalar loss. Inputs
//! are sampled away from non-differentiable points (ReLU's kink, the
//! entropy model's scale floor), since no subgradient choice can match a
//! difference quotient straddling a kink.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use super::ops::{self, OpSpec};
use super::{Tape, Tensor};
use crate::Result;

pub const FD_STEP: f64 = 1e-5;
const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub ops: Vec<OpReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.ops.iter().fold(0.0, |m, r| m.max(r.max_rel_err))
    }

    pub fn worst(&self) -> &OpReport {
        self.ops
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("catalog is not empty")
    }
}

/// The checkable catalog: every op variant with representative attributes.
pub fn catalog() -> Vec<OpSpec> {
    vec![
        OpSpec::Conv2d { stride: 1 },
        OpSpec::Conv2d { stride: 2 },
        OpSpec::Relu,
        OpSpec::Sigmoid,
        OpSpec::Add,
        OpSpec::Sub,
        OpSpec::Mul,
        OpSpec::ScalarAffine,
        OpSpec::ChannelAffine,
        OpSpec::MatMul { tb: false },
        OpSpec::MatMul { tb: true },
        OpSpec::Softmax,
        OpSpec::LayerNorm,
        OpSpec::GlobalAvgPool,
        OpSpec::AreaDownsample { factor: 2 },
        OpSpec::Concat,
        OpSpec::Narrow { start: 1, len: 2 },
        OpSpec::Reshape { shape: vec![3, 2] },
        OpSpec::SpaceToDepth,
        OpSpec::DepthToSpace,
        OpSpec::WindowPartition { ws: 2 },
        OpSpec::WindowMerge { ws: 2, h: 4, w: 4 },
        OpSpec::Mse,
        OpSpec::Sum,
        OpSpec::GaussianRateBits,
    ]
}

/// Check every cataloged op. Failures show up as large `max_rel_err`
/// entries; nothing is thrown.
pub fn grad_check_catalog(trials: usize, seed: u64) -> Result<GradCheckReport> {
    let mut ops = Vec::new();
    for (i, op) in catalog().into_iter().enumerate() {
        ops.push(grad_check(&op, trials, seed.wrapping_add(i as u64))?);
    }
    Ok(GradCheckReport { ops })
}

/// Compare analytic and central-difference gradients over random trials.
pub fn grad_check(op: &OpSpec, trials: usize, seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut max_rel_err = 0.0f64;
    for trial in 0..trials {
        let inputs = sample_inputs(op, trial, &mut rng);
        let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
        let (out_shape, out_data) = ops::forward(op, &refs)?;
        let weights: Vec<f64> = (0..out_data.len())
            .map(|_| {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                sign * rng.gen_range(0.5..1.5)
            })
            .collect();
        drop(out_data);
        let w = Tensor::new(out_shape, weights.clone())?;

        let mut tape = Tape::<f64>::new();
        let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| tape.leaf(t)).collect();
        let leaf_refs: Vec<&Tensor<f64>> = leaves.iter().collect();
        let out = tape.apply(op, &leaf_refs)?;
        let weighted = tape.mul(&out, &w)?;
        let loss = tape.sum(&weighted)?;
        let grads = tape.backward(&loss)?;

        for (idx, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(leaf)?;
            for elem in 0..leaf.len() {
                let fd = central_difference(op, &inputs, idx, elem, &weights)?;
                let a = analytic[elem];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_ERR_FLOOR);
                if rel > max_rel_err {
                    max_rel_err = rel;
                }
            }
        }
    }
    Ok(OpReport { name: op.name().to_string(), trials, max_rel_err })
}

fn central_difference(
    op: &OpSpec,
    inputs: &[Tensor<f64>],
    idx: usize,
    elem: usize,
    weights: &[f64],
) -> Result<f64> {
    let eval = |delta: f64| -> Result<f64> {
        let bumped = inputs[idx].with_element(elem, inputs[idx].data()[elem] + delta);
        let refs: Vec<&Tensor<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| if i == idx { &bumped } else { t })
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        let (_, out) = ops::forward(op, &refs)?;
        Ok(out.iter().zip(weights.iter()).map(|(o, w)| o * w).sum())
    };
    Ok((eval(FD_STEP)? - eval(-FD_STEP)?) / (2.0 * FD_STEP))
}

fn uniform(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches")
}

/// Uniform magnitude in `[margin, hi]`, random sign. Keeps inputs away
/// from a kink at zero.
fn away_from_zero(rng: &mut ChaCha12Rng, shape: &[usize], margin: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(margin..hi)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("length matches")
}

fn sample_inputs(op: &OpSpec, trial: usize, rng: &mut ChaCha12Rng) -> Vec<Tensor<f64>> {
    match op {
        OpSpec::Conv2d { stride: 1 } => vec![
            uniform(rng, &[3, 4, 2], -1.0, 1.0),
            uniform(rng, &[3, 3, 2, 2], -1.0, 1.0),
            uniform(rng, &[2], -0.5, 0.5),
        ],
        OpSpec::Conv2d { .. } => vec![
            uniform(rng, &[4, 4, 2], -1.0, 1.0),
            uniform(rng, &[3, 3, 2, 3], -1.0, 1.0),
            uniform(rng, &[3], -0.5, 0.5),
        ],
        OpSpec::Relu => vec![away_from_zero(rng, &[5], 0.1, 1.5)],
        OpSpec::Sigmoid => vec![uniform(rng, &[4], -3.0, 3.0)],
        OpSpec::Add | OpSpec::Sub | OpSpec::Mul => {
            vec![uniform(rng, &[5], -1.5, 1.5), uniform(rng, &[5], -1.5, 1.5)]
        }
        OpSpec::ScalarAffine => vec![
            uniform(rng, &[4], -1.5, 1.5),
            uniform(rng, &[], -1.5, 1.5),
            uniform(rng, &[], -1.5, 1.5),
        ],
        OpSpec::ChannelAffine => vec![
            uniform(rng, &[2, 3], -1.5, 1.5),
            uniform(rng, &[3], -1.5, 1.5),
            uniform(rng, &[3], -1.5, 1.5),
        ],
        OpSpec::MatMul { tb } => {
            // Cycle plain / batched / batched-with-shared-rhs cases.
            let (a, b) = match trial % 3 {
                0 => ([2, 3].as_slice(), if *tb { vec![4, 3] } else { vec![3, 4] }),
                1 => ([2, 2, 3].as_slice(), if *tb { vec![2, 4, 3] } else { vec![2, 3, 4] }),
                _ => ([2, 2, 3].as_slice(), if *tb { vec![4, 3] } else { vec![3, 4] }),
            };
            vec![uniform(rng, a, -1.0, 1.0), uniform(rng, &b, -1.0, 1.0)]
        }
        OpSpec::Softmax => vec![uniform(rng, &[2, 4], -2.0, 2.0)],
        OpSpec::LayerNorm => vec![
            uniform(rng, &[2, 4], -2.0, 2.0),
            uniform(rng, &[4], 0.5, 1.5),
            uniform(rng, &[4], -0.5, 0.5),
        ],
        OpSpec::GlobalAvgPool => vec![uniform(rng, &[2, 2, 3], -1.0, 1.0)],
        OpSpec::AreaDownsample { .. } => vec![uniform(rng, &[4, 4, 2], -1.0, 1.0)],
        OpSpec::Concat => vec![
            uniform(rng, &[2, 2], -1.0, 1.0),
            uniform(rng, &[2, 3], -1.0, 1.0),
            uniform(rng, &[2, 1], -1.0, 1.0),
        ],
        OpSpec::Narrow { .. } => vec![uniform(rng, &[2, 4], -1.0, 1.0)],
        OpSpec::Reshape { .. } => vec![uniform(rng, &[2, 3], -1.0, 1.0)],
        OpSpec::SpaceToDepth => vec![uniform(rng, &[4, 4, 2], -1.0, 1.0)],
        OpSpec::DepthToSpace => vec![uniform(rng, &[2, 2, 8], -1.0, 1.0)],
        OpSpec::WindowPartition { .. } => vec![uniform(rng, &[4, 4, 2], -1.0, 1.0)],
        OpSpec::WindowMerge { .. } => vec![uniform(rng, &[4, 4, 2], -1.0, 1.0)],
        OpSpec::Mse => vec![uniform(rng, &[5], -1.0, 1.0), uniform(rng, &[5], -1.0, 1.0)],
        OpSpec::Sum => vec![uniform(rng, &[5], -1.0, 1.0)],
        // Scales kept well above the floor so the difference quotient never
        // straddles the clamp; the floor's gating has its own unit test.
        OpSpec::GaussianRateBits => vec![
            uniform(rng, &[2, 3], -2.0, 2.0),
            uniform(rng, &[3], -0.5, 0.5),
            uniform(rng, &[3], -0.5, 1.0),
        ],
    }
}
