//! Trunk building blocks.
//!
//! * [`cadr_forward`]: stem conv whose output is gated by a ReLU'd conv of
//!   the coordinate map, so features know where on the sensor they sit.
//! * [`csa_forward`]: split-trunk attention; one half runs a pooled channel
//!   gate, the other windowed multi-head self-attention.
//! * [`lft`] / [`gft`]: per-position and per-channel affine modulation from
//!   the color priors.
//! * [`cimc_forward`]: the per-stage composition of the above.

use std::collections::BTreeMap;

use super::config::ModelConfig;
use super::cpe::{conv, linear, ColorPriors};
use super::params::param;
use crate::tensor::{Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Stem: features from the stacked crop, optionally gated by coordinates.
///
/// The head conv always runs. When the coordinate gate is active, a second
/// conv reads the 2-channel coordinate map, passes through ReLU, and scales
/// the head features elementwise; zero gate weights therefore zero the
/// output, and a gate of ones passes the head through untouched.
pub fn cadr_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    config: &ModelConfig,
    x_crop: &Tensor<T>,
    coords: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if x_crop.rank() != 3 || x_crop.shape()[2] != 4 {
        return Err(Error::shape(
            "cadr",
            format!("crop must be stacked [h,w,4], got {:?}", x_crop.shape()),
        ));
    }
    let x_h = conv(tape, params, "enc.stem.head", x_crop, 1)?;
    if !config.coord_gate_active() {
        return Ok(x_h);
    }
    let c = coords.ok_or_else(|| {
        Error::Invalid(format!("coord_mode = {} needs a coordinate map", config.coord_mode))
    })?;
    if c.rank() != 3 || c.shape()[..2] != x_crop.shape()[..2] || c.shape()[2] != 2 {
        return Err(Error::shape(
            "cadr",
            format!(
                "coordinate map {:?} must be [{}, {}, 2] to match the crop",
                c.shape(),
                x_crop.shape()[0],
                x_crop.shape()[1]
            ),
        ));
    }
    let gate = conv(tape, params, "enc.stem.gate", c, 1)?;
    let x_e = tape.relu(&gate)?;
    tape.mul(&x_h, &x_e)
}

/// Per-channel affine from a global prior vector: `g_p` stacks C gains then
/// C offsets.
pub fn gft<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>, g_p: &Tensor<T>) -> Result<Tensor<T>> {
    let c = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("gft", "input must have rank >= 1"))?;
    if g_p.rank() != 1 || g_p.len() != 2 * c {
        return Err(Error::shape(
            "gft",
            format!("prior {:?} must be [2*{c}] for {c} feature channels", g_p.shape()),
        ));
    }
    let alpha = tape.narrow(g_p, 0, c)?;
    let beta = tape.narrow(g_p, c, c)?;
    tape.channel_affine(x, &alpha, &beta)
}

/// Per-position affine from a local prior map: `l_p` stacks gain and offset
/// maps channelwise and must sit at the feature resolution.
pub fn lft<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>, l_p: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || l_p.rank() != 3 {
        return Err(Error::shape(
            "lft",
            format!("want [h,w,c] features and [h,w,2c] prior, got {:?} and {:?}", x.shape(), l_p.shape()),
        ));
    }
    let c = x.shape()[2];
    if l_p.shape()[..2] != x.shape()[..2] || l_p.shape()[2] != 2 * c {
        return Err(Error::shape(
            "lft",
            format!(
                "prior {:?} must be [{}, {}, {}] to modulate features {:?}",
                l_p.shape(),
                x.shape()[0],
                x.shape()[1],
                2 * c,
                x.shape()
            ),
        ));
    }
    let alpha = tape.narrow(l_p, 0, c)?;
    let beta = tape.narrow(l_p, c, c)?;
    let scaled = tape.mul(x, &alpha)?;
    tape.add(&scaled, &beta)
}

/// Channel gate: pool, squeeze through a bottleneck, sigmoid, rescale, and
/// add back. Zeroed bottleneck weights give a sigmoid(0) = 0.5 gate, so the
/// block degenerates to `1.5 * x`.
fn cwra<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let d = x.shape()[2];
    let pooled = tape.global_avg_pool(x)?;
    let row = tape.reshape(&pooled, &[1, d])?;
    let squeezed = linear(tape, params, &format!("{prefix}.cwra.r"), &row)?;
    // Sigmoid, not relu: the bottleneck can be a single unit at narrow
    // widths, and a dead relu there would cut the gate's weights off from
    // gradient flow permanently.
    let squeezed = tape.sigmoid(&squeezed)?;
    let expanded = linear(tape, params, &format!("{prefix}.cwra.e"), &squeezed)?;
    let gate = tape.sigmoid(&expanded)?;
    let gate = tape.reshape(&gate, &[d])?;
    let zeros = Tensor::zeros(&[d]);
    let scaled = tape.channel_affine(x, &gate, &zeros)?;
    tape.add(x, &scaled)
}

/// Windowed multi-head self-attention with a two-layer MLP, both residual.
/// Windows are non-overlapping `ws x ws` tiles; attention never crosses a
/// tile boundary.
fn swa<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    prefix: &str,
    x: &Tensor<T>,
    ws: usize,
    heads: usize,
) -> Result<Tensor<T>> {
    let (h, w, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let dh = d / heads;
    let win = tape.window_partition(x, ws)?;

    let normed = layer_norm(tape, params, &format!("{prefix}.swa.ln1"), &win)?;
    let qkv = linear(tape, params, &format!("{prefix}.swa.qkv"), &normed)?;
    let q = tape.narrow(&qkv, 0, d)?;
    let k = tape.narrow(&qkv, d, d)?;
    let v = tape.narrow(&qkv, 2 * d, d)?;

    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.narrow(&q, head * dh, dh)?;
        let kh = tape.narrow(&k, head * dh, dh)?;
        let vh = tape.narrow(&v, head * dh, dh)?;
        let logits = tape.matmul_bt(&qh, &kh)?;
        let logits = tape.affine_const(&logits, scale, 0.0)?;
        let attn = tape.softmax(&logits)?;
        head_outs.push(tape.matmul(&attn, &vh)?);
    }
    let merged = if heads == 1 {
        head_outs.pop().expect("one head")
    } else {
        let refs: Vec<&Tensor<T>> = head_outs.iter().collect();
        tape.concat(&refs)?
    };
    let proj = linear(tape, params, &format!("{prefix}.swa.proj"), &merged)?;
    let attended = tape.add(&win, &proj)?;

    let normed = layer_norm(tape, params, &format!("{prefix}.swa.ln2"), &attended)?;
    let m = linear(tape, params, &format!("{prefix}.swa.mlp1"), &normed)?;
    let m = tape.relu(&m)?;
    let m = linear(tape, params, &format!("{prefix}.swa.mlp2"), &m)?;
    let out = tape.add(&attended, &m)?;

    tape.window_merge(&out, ws, h, w)
}

/// Split-trunk attention block: conv, bifurcate channelwise, run the channel
/// gate on the first half and windowed attention on the second, then fuse
/// with a conv. Shape-preserving.
pub fn csa_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    config: &ModelConfig,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x.rank() != 3 {
        return Err(Error::shape("csa", format!("want [h,w,c], got {:?}", x.shape())));
    }
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if c % 2 != 0 {
        return Err(Error::shape("csa", format!("{c} channels cannot split into two branches")));
    }
    let ws = config.window;
    if h % ws != 0 || w % ws != 0 {
        return Err(Error::shape(
            "csa",
            format!("window {ws} does not divide the {h}x{w} feature map"),
        ));
    }
    let xp = conv(tape, params, &format!("{prefix}.pre"), x, 1)?;
    let halves = tape.split(&xp, 2)?;
    let x_ca = cwra(tape, params, prefix, &halves[0])?;
    let x_sa = swa(tape, params, prefix, &halves[1], ws, config.heads)?;
    let fused = tape.concat(&[&x_sa, &x_ca])?;
    conv(tape, params, &format!("{prefix}.post"), &fused, 1)
}

/// One stage's modulated attention stack: `cimc_blocks` rounds of attention
/// followed by local modulation, then one global modulation. Disabled
/// toggles drop their step, leaving the rest untouched; with everything
/// off the input passes through unchanged.
pub fn cimc_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    config: &ModelConfig,
    stage_prefix: &str,
    stage: usize,
    x: &Tensor<T>,
    priors: &ColorPriors<T>,
) -> Result<Tensor<T>> {
    let mut x = x.clone();
    for b in 1..=config.cimc_blocks {
        if config.use_csa {
            x = csa_forward(tape, params, config, &format!("{stage_prefix}.b{b}.csa"), &x)?;
        }
        if config.use_lft {
            x = lft(tape, &x, priors.local(stage)?)?;
        }
    }
    if config.use_gft {
        x = gft(tape, &x, priors.global()?)?;
    }
    Ok(x)
}

fn layer_norm<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    prefix: &str,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = param(params, &format!("{prefix}.g"))?;
    let b = param(params, &format!("{prefix}.b"))?;
    tape.layernorm(x, g, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::CoordMode;
    use crate::model::cpe::cpe;
    use crate::model::params::ModelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            latent_channels: 3,
            cimc_blocks: 1,
            window: 2,
            heads: 1,
            stages: 1,
            use_cadr: true,
            coord_mode: CoordMode::Absolute,
            use_csa: true,
            use_gft: true,
            use_lft: true,
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// 3x3 conv kernel whose center tap copies channel i to channel i.
    fn identity_conv3(c: usize) -> Tensor<f32> {
        Tensor::from_fn(&[3, 3, c, c], |idx| {
            let cout = idx % c;
            let cin = (idx / c) % c;
            let tap = idx / (c * c);
            if tap == 4 && cin == cout {
                1.0
            } else {
                0.0
            }
        })
    }

    fn zeroed(params: &mut ModelParams<f32>, names: &[&str]) {
        for n in names {
            let shape = params.get(n).unwrap().shape().to_vec();
            params.set(n, Tensor::zeros(&shape)).unwrap();
        }
    }

    #[test]
    fn zero_gate_weights_zero_the_stem_output() {
        let config = cfg();
        let mut params = ModelParams::<f32>::init(&config, 1).unwrap();
        zeroed(&mut params, &["enc.stem.gate.w", "enc.stem.gate.b"]);
        let mut tape = Tape::new();
        let out = cadr_forward(
            &mut tape,
            params.tensors(),
            &config,
            &rand_t(&[4, 4, 4], 2),
            Some(&rand_t(&[4, 4, 2], 3)),
        )
        .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_gate_passes_the_head_through() {
        let config = cfg();
        let mut params = ModelParams::<f32>::init(&config, 1).unwrap();
        let c = config.base_channels;
        params.set("enc.stem.gate.w", Tensor::zeros(&[3, 3, 2, c])).unwrap();
        params.set("enc.stem.gate.b", Tensor::full(&[c], 1.0)).unwrap();
        let crop = rand_t(&[4, 4, 4], 2);

        let mut tape = Tape::new();
        let gated = cadr_forward(&mut tape, params.tensors(), &config, &crop, Some(&rand_t(&[4, 4, 2], 3)))
            .unwrap();
        let head_only = ModelConfig { use_cadr: false, ..config };
        let mut tape = Tape::new();
        let head = cadr_forward(&mut tape, params.tensors(), &head_only, &crop, None).unwrap();
        assert!(gated.bit_eq(&head));
    }

    #[test]
    fn different_coordinates_change_the_output() {
        let config = cfg();
        let params = ModelParams::<f32>::init(&config, 1).unwrap();
        let crop = rand_t(&[4, 4, 4], 2);
        let mut tape = Tape::new();
        let a = cadr_forward(&mut tape, params.tensors(), &config, &crop, Some(&rand_t(&[4, 4, 2], 3))).unwrap();
        let mut tape = Tape::new();
        let b = cadr_forward(&mut tape, params.tensors(), &config, &crop, Some(&rand_t(&[4, 4, 2], 4))).unwrap();
        assert!(!a.bit_eq(&b), "gate must respond to the coordinate map");
    }

    #[test]
    fn missing_or_misshapen_coordinates_are_rejected() {
        let config = cfg();
        let params = ModelParams::<f32>::init(&config, 1).unwrap();
        let crop = rand_t(&[4, 4, 4], 2);
        let mut tape = Tape::new();
        assert!(cadr_forward(&mut tape, params.tensors(), &config, &crop, None).is_err());
        let mut tape = Tape::new();
        let bad = rand_t(&[2, 4, 2], 3);
        assert!(cadr_forward(&mut tape, params.tensors(), &config, &crop, Some(&bad)).is_err());
    }

    #[test]
    fn gft_applies_gain_then_offset() {
        let mut tape = Tape::new();
        let x = Tensor::full(&[2, 2, 3], 1.0f32);
        let prior = Tensor::new([6], vec![2.0, 2.0, 2.0, 0.5, 0.5, 0.5]).unwrap();
        let y = gft(&mut tape, &x, &prior).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.5));
        let bad = Tensor::zeros(&[5]);
        assert!(gft(&mut tape, &x, &bad).is_err());
    }

    #[test]
    fn identity_priors_leave_features_alone() {
        let mut tape = Tape::new();
        let x = rand_t(&[4, 4, 3], 7);
        let l_p = Tensor::from_fn(&[4, 4, 6], |i| if i % 6 < 3 { 1.0 } else { 0.0 });
        let y = lft(&mut tape, &x, &l_p).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn lft_is_affine_in_its_features() {
        // f(x1 + x2) = f(x1) + f(x2) - beta, elementwise.
        let mut tape = Tape::<f64>::new();
        let x1 = rand_t(&[2, 2, 2], 1).cast::<f64>();
        let x2 = rand_t(&[2, 2, 2], 2).cast::<f64>();
        let l_p = rand_t(&[2, 2, 4], 3).cast::<f64>();
        let xsum = Tensor::new(
            x1.shape().to_vec(),
            x1.data().iter().zip(x2.data()).map(|(a, b)| a + b).collect(),
        )
        .unwrap();
        let f1 = lft(&mut tape, &x1, &l_p).unwrap();
        let f2 = lft(&mut tape, &x2, &l_p).unwrap();
        let fs = lft(&mut tape, &xsum, &l_p).unwrap();
        for i in 0..fs.len() {
            let beta = l_p.data()[(i / 2) * 4 + 2 + i % 2];
            let want = f1.data()[i] + f2.data()[i] - beta;
            assert!((fs.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn lft_rejects_misaligned_priors() {
        let mut tape = Tape::new();
        let x = rand_t(&[4, 4, 3], 7);
        assert!(lft(&mut tape, &x, &rand_t(&[2, 4, 6], 8)).is_err());
        assert!(lft(&mut tape, &x, &rand_t(&[4, 4, 5], 8)).is_err());
    }

    #[test]
    fn zeroed_channel_gate_scales_by_one_and_a_half() {
        let config = cfg();
        let mut params = ModelParams::<f32>::init(&config, 1).unwrap();
        let prefix = "enc.s1.b1.csa";
        zeroed(
            &mut params,
            &[
                &format!("{prefix}.cwra.r.w"),
                &format!("{prefix}.cwra.r.b"),
                &format!("{prefix}.cwra.e.w"),
                &format!("{prefix}.cwra.e.b"),
            ],
        );
        let x = rand_t(&[4, 4, 2], 5);
        let mut tape = Tape::new();
        let y = cwra(&mut tape, params.tensors(), prefix, &x).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - 1.5 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn attention_rows_are_normalized_through_the_whole_block() {
        // Rig the attention so its output IS the row sums: values become
        // constant one (zero value-weights, unit value-bias), the projection
        // is identity, and the MLP is silenced. The block then returns
        // x + rowsum, so rowsum == 1 everywhere proves normalization.
        let config = ModelConfig { heads: 2, base_channels: 8, ..cfg() };
        let mut params = ModelParams::<f32>::init(&config, 1).unwrap();
        let prefix = "enc.s1.b1.csa";
        let d = config.base_channels / 2;
        params.set(&format!("{prefix}.swa.qkv.w"), Tensor::zeros(&[d, 3 * d])).unwrap();
        params
            .set(
                &format!("{prefix}.swa.qkv.b"),
                Tensor::from_fn(&[3 * d], |i| if i >= 2 * d { 1.0 } else { 0.0 }),
            )
            .unwrap();
        params
            .set(
                &format!("{prefix}.swa.proj.w"),
                Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
            )
            .unwrap();
        zeroed(
            &mut params,
            &[
                &format!("{prefix}.swa.proj.b"),
                &format!("{prefix}.swa.mlp1.w"),
                &format!("{prefix}.swa.mlp1.b"),
                &format!("{prefix}.swa.mlp2.w"),
                &format!("{prefix}.swa.mlp2.b"),
            ],
        );
        let x = rand_t(&[4, 4, d], 6);
        let mut tape = Tape::new();
        let y = swa(&mut tape, params.tensors(), prefix, &x, config.window, config.heads).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - (b + 1.0)).abs() < 1e-5, "attention row sum drifted: {a} vs {b} + 1");
        }
    }

    #[test]
    fn csa_preserves_shape_at_the_default_width() {
        let config = ModelConfig {
            base_channels: 32,
            window: 8,
            heads: 2,
            ..cfg()
        };
        let params = ModelParams::<f32>::init(&config, 2).unwrap();
        let x = rand_t(&[16, 16, 32], 3);
        let mut tape = Tape::new();
        let y = csa_forward(&mut tape, params.tensors(), &config, "enc.s1.b1.csa", &x).unwrap();
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn csa_rejects_windows_that_do_not_fit() {
        let config = ModelConfig { window: 3, ..cfg() };
        let params = ModelParams::<f32>::init(&config, 2).unwrap();
        let x = rand_t(&[4, 4, 4], 3);
        let mut tape = Tape::new();
        let err = csa_forward(&mut tape, params.tensors(), &config, "enc.s1.b1.csa", &x)
            .unwrap_err()
            .to_string();
        assert!(err.contains("window"), "{err}");
    }

    #[test]
    fn silenced_csa_is_a_split_passthrough() {
        // Identity pre/post convs, zeroed attention and gate interiors. The
        // attention half rides its residuals untouched; the gate half comes
        // back scaled by 1.5. Fused output: [x2, 1.5*x1].
        let config = cfg();
        let mut params = ModelParams::<f32>::init(&config, 1).unwrap();
        let prefix = "enc.s1.b1.csa";
        let c = config.base_channels;
        let d = c / 2;
        params.set(&format!("{prefix}.pre.w"), identity_conv3(c)).unwrap();
        params.set(&format!("{prefix}.post.w"), identity_conv3(c)).unwrap();
        zeroed(
            &mut params,
            &[
                &format!("{prefix}.pre.b"),
                &format!("{prefix}.post.b"),
                &format!("{prefix}.cwra.r.w"),
                &format!("{prefix}.cwra.r.b"),
                &format!("{prefix}.cwra.e.w"),
                &format!("{prefix}.cwra.e.b"),
                &format!("{prefix}.swa.ln1.g"),
                &format!("{prefix}.swa.ln1.b"),
                &format!("{prefix}.swa.qkv.w"),
                &format!("{prefix}.swa.qkv.b"),
                &format!("{prefix}.swa.proj.w"),
                &format!("{prefix}.swa.proj.b"),
                &format!("{prefix}.swa.ln2.g"),
                &format!("{prefix}.swa.ln2.b"),
                &format!("{prefix}.swa.mlp1.w"),
                &format!("{prefix}.swa.mlp1.b"),
                &format!("{prefix}.swa.mlp2.w"),
                &format!("{prefix}.swa.mlp2.b"),
            ],
        );
        let x = rand_t(&[4, 4, c], 9);
        let mut tape = Tape::new();
        let y = csa_forward(&mut tape, params.tensors(), &config, prefix, &x).unwrap();
        for pos in 0..16 {
            for ch in 0..c {
                let got = y.data()[pos * c + ch];
                let want = if ch < d {
                    // Attention half (second input half), bit-preserved.
                    x.data()[pos * c + d + ch]
                } else {
                    1.5 * x.data()[pos * c + ch - d]
                };
                assert!((got - want).abs() < 1e-6, "pos {pos} ch {ch}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn all_toggles_off_is_the_identity() {
        let config = ModelConfig { use_csa: false, use_gft: false, use_lft: false, ..cfg() };
        let params = ModelParams::<f32>::init(&config, 1).unwrap();
        let x = rand_t(&[4, 4, 4], 2);
        let mut tape = Tape::new();
        let y = cimc_forward(
            &mut tape,
            params.tensors(),
            &config,
            "enc.s1",
            0,
            &x,
            &ColorPriors::empty(),
        )
        .unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn dropping_local_modulation_leaves_attention_then_global() {
        let config = ModelConfig { cimc_blocks: 2, use_lft: false, ..cfg() };
        let params = ModelParams::<f32>::init(&config, 4).unwrap();
        let full = Tensor::from_fn(&[16, 16, 4], |i| (i % 97) as f32 / 97.0);
        let crop = rand_t(&[4, 4, 4], 5);
        let x = rand_t(&[4, 4, 4], 6);

        let mut tape = Tape::new();
        let priors = cpe(&mut tape, params.tensors(), &config, Some(&full), &crop).unwrap();
        let composed = cimc_forward(&mut tape, params.tensors(), &config, "enc.s1", 0, &x, &priors).unwrap();

        let mut tape = Tape::new();
        let priors = cpe(&mut tape, params.tensors(), &config, Some(&full), &crop).unwrap();
        let a = csa_forward(&mut tape, params.tensors(), &config, "enc.s1.b1.csa", &x).unwrap();
        let b = csa_forward(&mut tape, params.tensors(), &config, "enc.s1.b2.csa", &a).unwrap();
        let manual = gft(&mut tape, &b, priors.global().unwrap()).unwrap();

        assert!(composed.bit_eq(&manual));
    }

    #[test]
    fn full_stack_preserves_shape() {
        let config = ModelConfig { cimc_blocks: 2, ..cfg() };
        let params = ModelParams::<f32>::init(&config, 4).unwrap();
        let full = rand_t(&[16, 16, 4], 1);
        let crop = rand_t(&[8, 8, 4], 5);
        let mut tape = Tape::new();
        let priors = cpe(&mut tape, params.tensors(), &config, Some(&full), &crop).unwrap();
        // Stage features at half the stacked crop: 4x4.
        let x = rand_t(&[4, 4, 4], 6);
        let y = cimc_forward(&mut tape, params.tensors(), &config, "enc.s1", 0, &x, &priors).unwrap();
        assert_eq!(y.shape(), x.shape());
    }
}
