//! Whole-network wiring.
//!
//! The encoder maps a stacked RAW crop (plus optional coordinate map and
//! full-capture context) to a compact latent; the decoder maps a latent back
//! to RGB at the crop's original resolution. Both are pure functions of
//! (params, inputs): the same tensors in give bitwise the same tensors out.

use std::collections::BTreeMap;

use super::blocks::{cadr_forward, cimc_forward, csa_forward};
use super::config::ModelConfig;
use super::cpe::{conv, cpe, ColorPriors};
use crate::tensor::{Scalar, Tape, Tensor};
use crate::{Error, Result};

/// Reduce a RAW-resolution coordinate map `[h, w, 2]` to the stacked grid
/// `[h/2, w/2, 2]` by taking each 2x2 cell's top-left site. All four sites
/// of a cell collapse to one feature pixel, so one representative
/// coordinate per cell is exact up to half a RAW pixel.
pub fn stacked_coords<T: Scalar>(coord: &Tensor<T>) -> Result<Tensor<T>> {
    if coord.rank() != 3 || coord.shape()[2] != 2 {
        return Err(Error::shape(
            "stacked_coords",
            format!("want [h,w,2], got {:?}", coord.shape()),
        ));
    }
    let (h, w) = (coord.shape()[0], coord.shape()[1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("stacked_coords", format!("dims must be even, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = coord.data();
    let mut out = Vec::with_capacity(oh * ow * 2);
    for i in 0..oh {
        for j in 0..ow {
            let k = (2 * i * w + 2 * j) * 2;
            out.push(src[k]);
            out.push(src[k + 1]);
        }
    }
    Tensor::new(vec![oh, ow, 2], out)
}

/// Encoder: stacked crop `[hs, ws, 4]` to latent
/// `[hs >> stages, ws >> stages, latent_channels]`.
///
/// `coords` is the stacked-resolution coordinate map; it is required exactly
/// when the coordinate gate is active and ignored otherwise. `full_raw` is
/// the stacked full capture and is required exactly when the global color
/// branch is on.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    config: &ModelConfig,
    x_crop: &Tensor<T>,
    coords: Option<&Tensor<T>>,
    full_raw: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    if x_crop.rank() != 3 || x_crop.shape()[2] != 4 {
        return Err(Error::shape(
            "encode",
            format!("crop must be stacked [h,w,4], got {:?}", x_crop.shape()),
        ));
    }
    let (hs, ws) = (x_crop.shape()[0], x_crop.shape()[1]);
    config.latent_dims(2 * hs, 2 * ws)?;

    let priors = if config.use_gft || config.use_lft {
        cpe(tape, params, config, full_raw, x_crop)?
    } else {
        ColorPriors::empty()
    };

    let stem = cadr_forward(tape, params, config, x_crop, coords)?;
    let mut x = tape.relu(&stem)?;
    for s in 1..=config.stages {
        let down = conv(tape, params, &format!("enc.s{s}.down"), &x, 2)?;
        x = tape.relu(&down)?;
        x = cimc_forward(tape, params, config, &format!("enc.s{s}"), s - 1, &x, &priors)?;
    }
    conv(tape, params, "enc.latent", &x, 1)
}

/// Decoder: latent back to RGB `[hs * 2, ws * 2, 3]` for a latent of
/// `[hs >> stages, ws >> stages, latent_channels]`. Output is unclipped;
/// clamping to [0,1] is an evaluation-time concern.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    params: &BTreeMap<String, Tensor<T>>,
    config: &ModelConfig,
    y: &Tensor<T>,
) -> Result<Tensor<T>> {
    config.validate()?;
    if y.rank() != 3 || y.shape()[2] != config.latent_channels {
        return Err(Error::shape(
            "decode",
            format!(
                "latent must be [h,w,{}], got {:?}",
                config.latent_channels,
                y.shape()
            ),
        ));
    }
    let head = conv(tape, params, "dec.head", y, 1)?;
    let mut x = tape.relu(&head)?;
    for s in 1..=config.stages {
        let up = conv(tape, params, &format!("dec.s{s}.up"), &x, 1)?;
        let up = tape.relu(&up)?;
        x = tape.depth_to_space(&up)?;
        if config.use_csa {
            x = csa_forward(tape, params, config, &format!("dec.s{s}.csa"), &x)?;
        }
    }
    let x = tape.depth_to_space(&x)?;
    conv(tape, params, "dec.out", &x, 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::CoordMode;
    use crate::model::params::ModelParams;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            base_channels: 4,
            latent_channels: 3,
            cimc_blocks: 1,
            window: 2,
            heads: 1,
            stages: 2,
            ..ModelConfig::default()
        }
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    struct Inputs {
        crop: Tensor<f32>,
        coords: Tensor<f32>,
        full: Tensor<f32>,
    }

    fn inputs(hs: usize, seed: u64) -> Inputs {
        Inputs {
            crop: rand_t(&[hs, hs, 4], seed),
            coords: rand_t(&[hs, hs, 2], seed + 1),
            full: rand_t(&[4 * hs, 4 * hs, 4], seed + 2),
        }
    }

    fn run_encode(config: &ModelConfig, params: &ModelParams<f32>, io: &Inputs) -> Tensor<f32> {
        let mut tape = Tape::new();
        encode(
            &mut tape,
            params.tensors(),
            config,
            &io.crop,
            Some(&io.coords),
            Some(&io.full),
        )
        .unwrap()
    }

    #[test]
    fn stacked_coords_take_the_cell_representative() {
        let coord = Tensor::from_fn(&[4, 6, 2], |k| k as f32);
        let small = stacked_coords(&coord).unwrap();
        assert_eq!(small.shape(), &[2, 3, 2]);
        // out[1,2] should be in[2,4].
        let k_in = ((2 * 6) + 4) * 2;
        let k_out = ((1 * 3) + 2) * 2;
        assert_eq!(small.data()[k_out], coord.data()[k_in]);
        assert_eq!(small.data()[k_out + 1], coord.data()[k_in + 1]);
        assert!(stacked_coords(&Tensor::<f32>::zeros(&[3, 4, 2])).is_err());
    }

    #[test]
    fn default_crop_maps_to_the_documented_shapes() {
        let config = ModelConfig::default();
        let params = ModelParams::<f32>::init(&config, 1).unwrap();
        let io = inputs(32, 5);
        let mut tape = Tape::new();
        let y = encode(
            &mut tape,
            params.tensors(),
            &config,
            &io.crop,
            Some(&io.coords),
            Some(&io.full),
        )
        .unwrap();
        assert_eq!(y.shape(), &[8, 8, 48]);
        let rgb = decode(&mut tape, params.tensors(), &config, &y).unwrap();
        assert_eq!(rgb.shape(), &[64, 64, 3]);
    }

    #[test]
    fn tiny_crops_round_trip_their_shapes() {
        let config = tiny();
        let params = ModelParams::<f32>::init(&config, 1).unwrap();
        for hs in [8usize, 16] {
            let io = inputs(hs, hs as u64);
            let mut tape = Tape::new();
            let y = encode(
                &mut tape,
                params.tensors(),
                &config,
                &io.crop,
                Some(&io.coords),
                Some(&io.full),
            )
            .unwrap();
            assert_eq!(y.shape(), &[hs / 4, hs / 4, 3]);
            let rgb = decode(&mut tape, params.tensors(), &config, &y).unwrap();
            assert_eq!(rgb.shape(), &[2 * hs, 2 * hs, 3]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = tiny();
        let params = ModelParams::<f32>::init(&config, 2).unwrap();
        let io = inputs(8, 3);
        let a = run_encode(&config, &params, &io);
        let b = run_encode(&config, &params, &io);
        assert!(a.bit_eq(&b));

        let mut t1 = Tape::new();
        let r1 = decode(&mut t1, params.tensors(), &config, &a).unwrap();
        let mut t2 = Tape::new();
        let r2 = decode(&mut t2, params.tensors(), &config, &b).unwrap();
        assert!(r1.bit_eq(&r2));
    }

    #[test]
    fn coord_mode_none_ignores_coordinate_input() {
        let config = ModelConfig { coord_mode: CoordMode::None, ..tiny() };
        let params = ModelParams::<f32>::init(&config, 2).unwrap();
        let io = inputs(8, 3);
        let with = run_encode(&config, &params, &io);
        let mut tape = Tape::new();
        let without = encode(&mut tape, params.tensors(), &config, &io.crop, None, Some(&io.full)).unwrap();
        assert!(with.bit_eq(&without));
    }

    #[test]
    fn gate_disabled_and_coords_disabled_agree_bitwise() {
        // Turning the stem gate off and keeping coordinates, or keeping the
        // gate and removing coordinates, must be the same architecture; the
        // shared parameter names then share their seed streams.
        let no_gate = ModelConfig { use_cadr: false, ..tiny() };
        let no_coords = ModelConfig { coord_mode: CoordMode::None, ..tiny() };
        let pa = ModelParams::<f32>::init(&no_gate, 4).unwrap();
        let pb = ModelParams::<f32>::init(&no_coords, 4).unwrap();
        let io = inputs(8, 9);
        let a = run_encode(&no_gate, &pa, &io);
        let b = run_encode(&no_coords, &pb, &io);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn random_inits_stay_finite() {
        // The tape rejects NaN/Inf at every op, so Ok here means the whole
        // pass stayed finite.
        let config = tiny();
        let io = inputs(8, 1000);
        for seed in 0..100 {
            let params = ModelParams::<f32>::init(&config, seed).unwrap();
            let mut tape = Tape::new();
            let y = encode(
                &mut tape,
                params.tensors(),
                &config,
                &io.crop,
                Some(&io.coords),
                Some(&io.full),
            )
            .unwrap();
            decode(&mut tape, params.tensors(), &config, &y).unwrap();
        }
    }

    #[test]
    fn capture_context_is_required_only_with_the_global_branch() {
        let with_gft = tiny();
        let params = ModelParams::<f32>::init(&with_gft, 2).unwrap();
        let io = inputs(8, 3);
        let mut tape = Tape::new();
        assert!(encode(&mut tape, params.tensors(), &with_gft, &io.crop, Some(&io.coords), None).is_err());

        let without = ModelConfig { use_gft: false, ..tiny() };
        let params = ModelParams::<f32>::init(&without, 2).unwrap();
        let mut tape = Tape::new();
        encode(&mut tape, params.tensors(), &without, &io.crop, Some(&io.coords), None).unwrap();
    }

    #[test]
    fn bad_crop_geometry_is_rejected_up_front() {
        let config = tiny();
        let params = ModelParams::<f32>::init(&config, 2).unwrap();
        let io = inputs(6, 3);
        let mut tape = Tape::new();
        let err = encode(
            &mut tape,
            params.tensors(),
            &config,
            &io.crop,
            Some(&io.coords),
            Some(&io.full),
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("divisible") || err.contains("window"), "{err}");

        let mut tape = Tape::new();
        let err = decode(&mut tape, params.tensors(), &config, &Tensor::zeros(&[2, 2, 5]))
            .unwrap_err()
            .to_string();
        assert!(err.contains("latent"), "{err}");
    }
}
