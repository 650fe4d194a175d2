//! Health checks runnable on a fresh clone: autodiff against central
//! differences (per-op catalog plus a whole-model probe), codec
//! bit-exactness with its rate bound, and closed-form metric oracles.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::codec::{decode_latent, encode_latent, quantize_infer, stream_bits, LikelihoodModel};
use crate::metrics::{bd_metric, bd_rate, delta_e, ms_ssim, psnr};
use crate::model::{decode, encode, param, stacked_coords, CoordMode, ModelConfig, ModelParams};
use crate::tensor::{derive_seed, grad_check_catalog, GradCheckReport, Tape, Tensor};
use crate::train::{rd_loss, RDLossConfig};
use crate::Result;

/// Per-op gradient tolerance (64-bit central differences).
pub const OP_GRAD_TOL: f64 = 1e-4;
/// Whole-model gradient tolerance; longer chains accumulate more error.
pub const E2E_GRAD_TOL: f64 = 1e-3;

const REL_FLOOR: f64 = 1e-6;

/// Finite-difference audit of the complete training loss.
#[derive(Clone, Debug)]
pub struct E2eGradReport {
    pub max_rel_err: f64,
    /// Parameter coordinate with the worst agreement, as `name[elem]`.
    pub worst_param: String,
    pub probes: usize,
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        latent_channels: 3,
        cimc_blocks: 1,
        window: 2,
        heads: 2,
        stages: 2,
        use_cadr: true,
        coord_mode: CoordMode::Absolute,
        use_csa: true,
        use_gft: true,
        use_lft: true,
    }
}

struct E2eInputs {
    x_crop: Tensor<f64>,
    coords: Tensor<f64>,
    full: Tensor<f64>,
    target: Tensor<f64>,
}

fn e2e_inputs(seed: u64) -> E2eInputs {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut unit = |shape: &[usize]| -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        Tensor::new(shape.to_vec(), data).expect("length matches")
    };
    let x_crop = unit(&[8, 8, 4]);
    let full = unit(&[8, 8, 4]);
    let target = unit(&[16, 16, 3]);
    // A plausible crop frame: origin (4, 6) inside a 32x32 capture.
    let coord = Tensor::from_fn(&[16, 16, 2], |i| {
        let (p, k) = (i / 2, i % 2);
        if k == 0 { (p / 16 + 4) as f64 / 32.0 } else { (p % 16 + 6) as f64 / 32.0 }
    });
    let coords = stacked_coords(&coord).expect("even dims");
    E2eInputs { x_crop, coords, full, target }
}

fn e2e_loss(
    tape: &mut Tape<f64>,
    map: &BTreeMap<String, Tensor<f64>>,
    config: &ModelConfig,
    inp: &E2eInputs,
) -> Result<Tensor<f64>> {
    let y = encode(tape, map, config, &inp.x_crop, Some(&inp.coords), Some(&inp.full))?;
    let bits = tape.gaussian_rate_bits(
        &y,
        param(map, "entropy.mu")?,
        param(map, "entropy.log_sigma")?,
    )?;
    let total = tape.sum(&bits)?;
    let bpp = tape.affine_const(&total, 1.0 / (16.0 * 16.0), 0.0)?;
    let recon = decode(tape, map, config, &y)?;
    Ok(rd_loss(tape, &recon, &inp.target, &bpp, &RDLossConfig::for_lambda_index(1)?)?.total)
}

/// Check the analytic gradient of the whole rate-distortion loss against
/// central differences for a tiny full-featured model in 64-bit: a 16x16
/// crop through every component, probing three coordinates of every
/// parameter tensor.
pub fn e2e_grad_check(seed: u64) -> Result<E2eGradReport> {
    let config = tiny_config();
    let inp = e2e_inputs(derive_seed(seed, "inputs"));
    let params = ModelParams::<f64>::init(&config, derive_seed(seed, "params"))?;

    let mut tape: Tape<f64> = Tape::new();
    let leaves = params.attach(&mut tape);
    let total = e2e_loss(&mut tape, &leaves, &config, &inp)?;
    let mut grads = tape.backward(&total)?;

    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let mut tape: Tape<f64> = Tape::new();
        Ok(e2e_loss(&mut tape, p.tensors(), &config, &inp)?.item())
    };

    // Per-parameter gradients span eight orders of magnitude while loss
    // evaluation noise is a fixed few ulps of the loss itself, so no single
    // step size suits every coordinate. Scale each probe so its secant
    // displacement sits near sqrt(eps) of the loss: far above rounding
    // noise, small enough that curvature stays in the quadratic regime.
    // The analytic value only sets the scale; if it is wrong, the finite
    // difference still converges to the true slope and the mismatch shows.
    let f0 = total.item().abs().max(1.0);
    let displacement = f64::EPSILON.sqrt() * f0;

    let mut report =
        E2eGradReport { max_rel_err: 0.0, worst_param: String::new(), probes: 0 };
    for (name, leaf) in &leaves {
        let analytic = grads.take(leaf)?;
        let len = leaf.len();
        let mut elems = vec![0, len / 2, len - 1];
        elems.dedup();
        for &e in &elems {
            let a = analytic[e];
            let h = (displacement / a.abs()).clamp(1e-8, 1e-3);
            let center = params.get(name)?.data()[e];
            let bump = |delta: f64| -> Result<f64> {
                let mut p = params.clone();
                p.set(name, params.get(name)?.with_element(e, center + delta))?;
                eval(&p)
            };
            let fd = (bump(h)? - bump(-h)?) / (2.0 * h);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(REL_FLOOR);
            report.probes += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{e}]");
            }
        }
    }
    Ok(report)
}

/// Randomized round trips through the range coder.
#[derive(Clone, Debug)]
pub struct CodecConformance {
    pub trials: usize,
    pub bit_exact_failures: usize,
    pub bound_violations: usize,
    /// Worst payload excess over the allowance of entropy + 1% + 64 bits;
    /// at or below zero when every trial fits.
    pub worst_excess_bits: f64,
    /// FNV over every payload byte, for cross-run comparisons.
    pub payload_hash: u64,
}

pub fn codec_conformance(trials: usize, seed: u64) -> Result<CodecConformance> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut report = CodecConformance {
        trials,
        bit_exact_failures: 0,
        bound_violations: 0,
        worst_excess_bits: f64::NEG_INFINITY,
        payload_hash: 0xcbf2_9ce4_8422_2325,
    };
    for _ in 0..trials {
        let c = rng.gen_range(1..=8usize);
        let (h, w) = (rng.gen_range(1..=12usize), rng.gen_range(1..=12usize));
        let model = LikelihoodModel::new(
            (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            (0..c).map(|_| rng.gen_range(-2.5..2.0)).collect(),
        )?;
        let scale = rng.gen_range(0.5f32..8.0);
        let y = Tensor::from_fn(&[h, w, c], |_| rng.gen_range(-1.0f32..1.0) * scale);
        let (q, _) = quantize_infer(&y, &model)?;

        let payload = encode_latent(&q, &model)?;
        let again = encode_latent(&q, &model)?;
        let back = decode_latent(&payload, h, w, c, &model)?;
        if payload != again || back.symbols != q.symbols {
            report.bit_exact_failures += 1;
        }

        let entropy = stream_bits(&q, &model)?;
        let excess = 8.0 * payload.len() as f64 - (entropy * 1.01 + 64.0);
        report.worst_excess_bits = report.worst_excess_bits.max(excess);
        if excess > 0.0 {
            report.bound_violations += 1;
        }
        for &b in &payload {
            report.payload_hash ^= u64::from(b);
            report.payload_hash = report.payload_hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
    Ok(report)
}

/// One closed-form or directional metric check.
#[derive(Clone, Debug)]
pub struct OracleCheck {
    pub name: &'static str,
    pub ok: bool,
    pub detail: String,
}

pub fn metric_oracles() -> Vec<OracleCheck> {
    let mut checks = Vec::new();
    let mut push = |name: &'static str, ok: bool, detail: String| {
        checks.push(OracleCheck { name, ok, detail });
    };

    let zeros = Tensor::zeros(&[8, 8, 3]);
    let ones = Tensor::full(&[8, 8, 3], 1.0f32);
    match psnr(&zeros, &ones, 1.0) {
        Ok(p) => push("psnr_unit_error_is_zero_db", p.db.abs() < 1e-9, format!("{} dB", p.db)),
        Err(e) => push("psnr_unit_error_is_zero_db", false, e.to_string()),
    }
    match psnr(&ones, &ones, 1.0) {
        Ok(p) => push(
            "psnr_identical_capped_and_flagged",
            p.identical && p.db == 100.0,
            format!("{} dB, identical {}", p.db, p.identical),
        ),
        Err(e) => push("psnr_identical_capped_and_flagged", false, e.to_string()),
    }

    match delta_e(&ones, &zeros) {
        Ok(d) => push("delta_e_white_black_is_100", (d - 100.0).abs() < 1e-9, format!("{d}")),
        Err(e) => push("delta_e_white_black_is_100", false, e.to_string()),
    }

    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let img = Tensor::from_fn(&[160, 160, 3], |_| rng.gen_range(0.0f32..1.0));
    let noisy = Tensor::new(
        [160, 160, 3],
        img.data().iter().map(|&v| (v + rng.gen_range(-0.2f32..0.2)).clamp(0.0, 1.0)).collect(),
    )
    .expect("length matches");
    match (ms_ssim(&img, &img), ms_ssim(&img, &noisy)) {
        (Ok(same), Ok(diff)) => {
            push(
                "msssim_identity_at_five_scales",
                (same.raw - 1.0).abs() < 1e-12 && same.scales == 5 && same.db == 100.0,
                format!("raw {}, {} scales", same.raw, same.scales),
            );
            push(
                "msssim_noise_scores_below_identity",
                diff.raw < same.raw && diff.raw > 0.0,
                format!("noisy raw {}", diff.raw),
            );
        }
        (a, b) => push(
            "msssim_identity_at_five_scales",
            false,
            format!("{:?} / {:?}", a.err(), b.err()),
        ),
    }

    // Analytic ladder: 2 dB per octave, test curve 1 dB above the anchor.
    // The metric delta is exactly 1 dB and the rate delta is half an octave.
    let ladder = |off: f64| -> Vec<(f64, f64)> {
        [0.25f64, 0.5, 1.0, 2.0].iter().map(|&r| (r, 30.0 + 2.0 * r.log2() + off)).collect()
    };
    match bd_metric(&ladder(0.0), &ladder(1.0)) {
        Ok(r) => push(
            "bd_metric_plus_one_db",
            (r.value - 1.0).abs() < 1e-3,
            format!("{} dB", r.value),
        ),
        Err(e) => push("bd_metric_plus_one_db", false, e.to_string()),
    }
    match bd_rate(&ladder(0.0), &ladder(1.0)) {
        Ok(r) => push(
            "bd_rate_half_octave",
            (r.value - (0.5f64.sqrt() - 1.0) * 100.0).abs() < 0.1,
            format!("{}%", r.value),
        ),
        Err(e) => push("bd_rate_half_octave", false, e.to_string()),
    }

    checks
}

#[derive(Clone, Debug)]
pub struct SelftestReport {
    pub ops: GradCheckReport,
    pub e2e: E2eGradReport,
    pub codec: CodecConformance,
    pub oracles: Vec<OracleCheck>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.ops.ops.iter().all(|o| o.max_rel_err < OP_GRAD_TOL)
            && self.e2e.max_rel_err < E2E_GRAD_TOL
            && self.codec.bit_exact_failures == 0
            && self.codec.bound_violations == 0
            && self.oracles.iter().all(|o| o.ok)
    }

    /// Human-readable summary, one line per check.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mark = |ok: bool| if ok { "ok  " } else { "FAIL" };
        for op in &self.ops.ops {
            let _ = writeln!(
                out,
                "{} grad {:<18} max rel err {:.3e} over {} trials",
                mark(op.max_rel_err < OP_GRAD_TOL),
                op.name,
                op.max_rel_err,
                op.trials
            );
        }
        let _ = writeln!(
            out,
            "{} grad end-to-end        max rel err {:.3e} over {} probes (worst {})",
            mark(self.e2e.max_rel_err < E2E_GRAD_TOL),
            self.e2e.max_rel_err,
            self.e2e.probes,
            self.e2e.worst_param
        );
        let _ = writeln!(
            out,
            "{} codec round-trip       {}/{} bit-exact, worst rate excess {:.1} bits",
            mark(self.codec.bit_exact_failures == 0 && self.codec.bound_violations == 0),
            self.codec.trials - self.codec.bit_exact_failures,
            self.codec.trials,
            self.codec.worst_excess_bits
        );
        for o in &self.oracles {
            let _ = writeln!(out, "{} metric {:<32} {}", mark(o.ok), o.name, o.detail);
        }
        let _ = writeln!(out, "selftest: {}", if self.passed() { "PASS" } else { "FAIL" });
        out
    }
}

/// Run every suite. `trials` is the per-op trial count for the gradient
/// catalog; the codec suite always runs 100 round trips.
pub fn selftest(trials: usize, seed: u64) -> Result<SelftestReport> {
    eprintln!("selftest: gradient catalog ({trials} trials per op)");
    let ops = grad_check_catalog(trials, derive_seed(seed, "ops"))?;
    eprintln!("selftest: end-to-end gradient probe");
    let e2e = e2e_grad_check(derive_seed(seed, "e2e"))?;
    eprintln!("selftest: codec conformance");
    let codec = codec_conformance(100, derive_seed(seed, "codec"))?;
    eprintln!("selftest: metric oracles");
    let oracles = metric_oracles();
    Ok(SelftestReport { ops, e2e, codec, oracles })
}
