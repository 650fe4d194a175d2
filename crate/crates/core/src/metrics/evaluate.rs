//! Rate-distortion evaluation through the real codec.
//!
//! Every reported number comes from the deployable path: encode to a latent,
//! round the latent, range-code it into a serialized bitstream, parse that
//! bitstream back, and decode the reconstruction from what was read. Rate is
//! counted over the full stream, container header included.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::codec::{
    decode_latent, dequantize, encode_latent, quantize_infer, Bitstream, LikelihoodModel,
    StreamHeader,
};
use crate::metrics::{bd_metric, bd_rate, delta_e, ms_ssim, psnr};
use crate::model::{decode, encode, stacked_coords, CoordMode, ModelConfig, ModelParams};
use crate::rawsim::{make_crop, stack_plane, CropSample, Dataset};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// One measured point of an RD curve, averaged over the evaluation split.
#[derive(Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub variant: String,
    pub lambda_index: usize,
    /// Total stream bits (headers included) over total coded pixels.
    pub bpp: f64,
    pub psnr_db: f64,
    pub msssim_raw: f64,
    pub msssim_db: f64,
    pub delta_e: f64,
    pub samples: usize,
    pub total_bits: u64,
    pub total_pixels: u64,
    /// Samples whose reconstruction matched the target exactly (PSNR capped).
    pub capped_samples: usize,
}

/// Bjontegaard summary of a test curve against an anchor curve.
#[derive(Clone, Debug, PartialEq)]
pub struct BdReport {
    pub anchor: String,
    pub test: String,
    /// Percent rate change at equal PSNR; negative favours the test curve.
    pub bd_rate_pct: f64,
    pub bd_psnr: f64,
    pub bd_msssim_db: f64,
    /// Average delta E change at equal rate; negative favours the test curve.
    pub bd_delta_e: f64,
}

/// Per-channel entropy model from trained parameters.
pub fn likelihood_from_params(params: &ModelParams<f32>) -> Result<LikelihoodModel> {
    let mu = params.get("entropy.mu")?.data().iter().map(|&v| f64::from(v)).collect();
    let ls = params.get("entropy.log_sigma")?.data().iter().map(|&v| f64::from(v)).collect();
    LikelihoodModel::new(mu, ls)
}

/// Deterministic evaluation origins for one capture: the four corners plus
/// the centre (rounded down to even), with duplicates removed.
pub fn eval_origins(height: usize, width: usize, crop: usize) -> Vec<(usize, usize)> {
    let hm = height - crop;
    let wm = width - crop;
    let centre = (hm / 2 & !1, wm / 2 & !1);
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for o in [(0, 0), (0, wm), (hm, 0), (hm, wm), centre] {
        if seen.insert(o) {
            out.push(o);
        }
    }
    out
}

fn clip01(t: &Tensor<f32>) -> Tensor<f32> {
    Tensor::new(t.shape(), t.data().iter().map(|&v| v.clamp(0.0, 1.0)).collect())
        .expect("shape unchanged")
}

/// Encode one crop into a self-contained bitstream.
pub fn compress(
    params: &ModelParams<f32>,
    model: &LikelihoodModel,
    sample: &CropSample,
    full_raw: Option<&Tensor<f32>>,
    lambda_index: u8,
) -> Result<Bitstream> {
    let config = params.config();
    let coords = match config.coord_mode {
        CoordMode::Absolute => Some(stacked_coords(&sample.coord_abs)?),
        CoordMode::Relative => Some(stacked_coords(&sample.coord_rel)?),
        CoordMode::None => None,
    };
    let mut tape: Tape<f32> = Tape::new();
    let y = encode(&mut tape, params.tensors(), config, &sample.x_crop, coords.as_ref(), full_raw)?;
    let (q, _) = quantize_infer(&y, model)?;
    let payload = encode_latent(&q, model)?;
    let dim = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Invalid(format!("{what} {v} exceeds the header limit")))
    };
    let header = StreamHeader {
        raw_h: dim(sample.raw_dims.0, "capture height")?,
        raw_w: dim(sample.raw_dims.1, "capture width")?,
        crop_h: dim(sample.target.shape()[0], "crop height")?,
        crop_w: dim(sample.target.shape()[1], "crop width")?,
        latent_h: dim(q.height, "latent height")?,
        latent_w: dim(q.width, "latent width")?,
        latent_c: dim(q.channels, "latent channels")?,
        model_id: params.model_id(),
        lambda_index,
    };
    Ok(Bitstream { header, payload })
}

/// Decode a bitstream back to a clipped RGB image, verifying that it was
/// produced by this exact model.
pub fn decompress(
    params: &ModelParams<f32>,
    model: &LikelihoodModel,
    stream: &Bitstream,
) -> Result<Tensor<f32>> {
    stream.check_model(params.model_id())?;
    let h = &stream.header;
    let q = decode_latent(
        &stream.payload,
        h.latent_h as usize,
        h.latent_w as usize,
        h.latent_c as usize,
        model,
    )?;
    let y = dequantize(&q, model)?;
    let mut tape: Tape<f32> = Tape::new();
    let rgb = decode(&mut tape, params.tensors(), params.config(), &y)?;
    if rgb.shape() != [h.crop_h as usize, h.crop_w as usize, 3] {
        return Err(Error::shape(
            "decompress",
            format!("decoded {:?}, header says {}x{}", rgb.shape(), h.crop_h, h.crop_w),
        ));
    }
    Ok(clip01(&rgb))
}

/// Measure one RD point: every evaluation capture, corner and centre crops,
/// full compress -> serialize -> parse -> decompress round trip per crop.
pub fn evaluate_model(
    variant: &str,
    lambda_index: usize,
    params: &ModelParams<f32>,
    dataset: &Dataset,
    crop: usize,
) -> Result<RdPoint> {
    let config = params.config();
    config.latent_dims(crop, crop)?;
    if dataset.eval_ids.is_empty() {
        return Err(Error::Invalid("dataset has no evaluation split".into()));
    }
    let model = likelihood_from_params(params)?;

    let mut point = RdPoint {
        variant: variant.to_string(),
        lambda_index,
        bpp: 0.0,
        psnr_db: 0.0,
        msssim_raw: 0.0,
        msssim_db: 0.0,
        delta_e: 0.0,
        samples: 0,
        total_bits: 0,
        total_pixels: 0,
        capped_samples: 0,
    };

    for &id in &dataset.eval_ids {
        let record = dataset.record(id)?;
        if record.height < crop || record.width < crop {
            return Err(Error::Invalid(format!(
                "capture {id} is {}x{}, smaller than the {crop}-pixel evaluation crop",
                record.height, record.width
            )));
        }
        let capture = record.as_capture();
        let full = if config.use_gft { Some(stack_plane(&record.raw)?) } else { None };
        for (m, n) in eval_origins(record.height, record.width, crop) {
            let sample = make_crop(&capture, &record.target, m, n, crop, crop)?;
            let stream = compress(params, &model, &sample, full.as_ref(), lambda_index as u8)?;
            let parsed = Bitstream::deserialize(&stream.serialize())?;
            let recon = decompress(params, &model, &parsed)?;

            let p = psnr(&recon, &sample.target, 1.0)?;
            let s = ms_ssim(&recon, &sample.target)?;
            point.total_bits += parsed.total_bits();
            point.total_pixels += (crop * crop) as u64;
            point.psnr_db += p.db;
            point.capped_samples += usize::from(p.identical);
            point.msssim_raw += s.raw;
            point.msssim_db += s.db;
            point.delta_e += delta_e(&recon, &sample.target)?;
            point.samples += 1;
        }
    }

    let n = point.samples as f64;
    point.psnr_db /= n;
    point.msssim_raw /= n;
    point.msssim_db /= n;
    point.delta_e /= n;
    point.bpp = point.total_bits as f64 / point.total_pixels as f64;
    Ok(point)
}

/// [`evaluate_model`] for a checkpoint on disk.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    config: &ModelConfig,
    variant: &str,
    lambda_index: usize,
    dataset: &Dataset,
    crop: usize,
) -> Result<RdPoint> {
    let params = ModelParams::<f32>::load(checkpoint, config)?;
    evaluate_model(variant, lambda_index, &params, dataset, crop)
}

/// Bjontegaard deltas between two measured curves, anchored on PSNR for the
/// rate delta and on rate for the metric deltas. Axes are independent: one
/// whose curves share no interval (or whose fit is degenerate) reports NaN
/// rather than suppressing the others, since a rate delta can be undefined
/// while the metric deltas are fine.
pub fn bd_report(anchor: &[RdPoint], test: &[RdPoint]) -> Result<BdReport> {
    let name = |pts: &[RdPoint], who: &str| -> Result<String> {
        let mut names: Vec<&str> = pts.iter().map(|p| p.variant.as_str()).collect();
        names.dedup();
        match names[..] {
            [one] => Ok(one.to_string()),
            _ => Err(Error::Invalid(format!("{who} curve mixes variants {names:?}"))),
        }
    };
    for (pts, who) in [(anchor, "anchor"), (test, "test")] {
        if pts.len() < 3 {
            return Err(Error::Invalid(format!(
                "{who} curve has {} point(s); Bjontegaard deltas need at least 3",
                pts.len()
            )));
        }
    }
    let curve = |pts: &[RdPoint], f: fn(&RdPoint) -> f64| -> Vec<(f64, f64)> {
        pts.iter().map(|p| (p.bpp, f(p))).collect()
    };
    let a_psnr = curve(anchor, |p| p.psnr_db);
    let t_psnr = curve(test, |p| p.psnr_db);
    let value = |r: Result<super::BdResult>| r.map(|v| v.value).unwrap_or(f64::NAN);
    Ok(BdReport {
        anchor: name(anchor, "anchor")?,
        test: name(test, "test")?,
        bd_rate_pct: value(bd_rate(&a_psnr, &t_psnr)),
        bd_psnr: value(bd_metric(&a_psnr, &t_psnr)),
        bd_msssim_db: value(bd_metric(
            &curve(anchor, |p| p.msssim_db),
            &curve(test, |p| p.msssim_db),
        )),
        bd_delta_e: value(bd_metric(&curve(anchor, |p| p.delta_e), &curve(test, |p| p.delta_e))),
    })
}

pub const RD_CSV_HEADER: &str = "variant,lambda_index,bpp,psnr_db,msssim_raw,msssim_db,delta_e";
pub const BD_CSV_HEADER: &str = "anchor,test,axis,value";

/// RD points as CSV text with pinned float precision, so identical runs give
/// identical bytes.
pub fn rd_csv(points: &[RdPoint]) -> String {
    let mut out = String::from(RD_CSV_HEADER);
    out.push('\n');
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.8},{:.6},{:.6}",
            p.variant, p.lambda_index, p.bpp, p.psnr_db, p.msssim_raw, p.msssim_db, p.delta_e
        );
    }
    out
}

/// BD reports as CSV text, one row per (anchor, test, axis).
pub fn bd_csv(reports: &[BdReport]) -> String {
    let mut out = String::from(BD_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (axis, value) in [
            ("bd_rate_pct", r.bd_rate_pct),
            ("bd_psnr", r.bd_psnr),
            ("bd_msssim_db", r.bd_msssim_db),
            ("bd_delta_e", r.bd_delta_e),
        ] {
            let _ = writeln!(out, "{},{},{},{:.6}", r.anchor, r.test, axis, value);
        }
    }
    out
}

pub fn write_rd_csv(path: &Path, points: &[RdPoint]) -> Result<()> {
    fs::write(path, rd_csv(points))?;
    Ok(())
}

pub fn write_bd_csv(path: &Path, reports: &[BdReport]) -> Result<()> {
    fs::write(path, bd_csv(reports))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rawsim::{build_dataset, load_dataset, DatasetConfig, ToneParams};
    use tempfile::tempdir;

    fn micro_dataset(dir: &Path, captures: u32, size: usize) -> Dataset {
        let path = dir.join("data.rcds");
        let cfg = DatasetConfig {
            captures,
            height: size,
            width: size,
            seed: 5,
            tone: ToneParams::default(),
        };
        build_dataset(&cfg, &path).unwrap();
        load_dataset(&path).unwrap()
    }

    fn micro_params() -> ModelParams<f32> {
        let config = ModelConfig {
            base_channels: 8,
            latent_channels: 6,
            cimc_blocks: 1,
            window: 4,
            heads: 2,
            stages: 2,
            ..ModelConfig::default()
        };
        ModelParams::init(&config, 33).unwrap()
    }

    #[test]
    fn origins_cover_corners_and_centre() {
        let got = eval_origins(100, 128, 64);
        assert_eq!(got, vec![(0, 0), (0, 64), (36, 0), (36, 64), (18, 32)]);
        for (m, n) in got {
            assert_eq!((m % 2, n % 2), (0, 0));
        }
        // A crop the size of the capture collapses to a single origin.
        assert_eq!(eval_origins(64, 64, 64), vec![(0, 0)]);
    }

    #[test]
    fn decompress_matches_the_direct_reconstruction() {
        let dir = tempdir().unwrap();
        let ds = micro_dataset(dir.path(), 4, 64);
        let params = micro_params();
        let model = likelihood_from_params(&params).unwrap();

        let record = ds.record(ds.eval_ids[0]).unwrap();
        let sample = make_crop(&record.as_capture(), &record.target, 0, 0, 64, 64).unwrap();
        let full = stack_plane(&record.raw).unwrap();

        let stream = compress(&params, &model, &sample, Some(&full), 2).unwrap();
        let parsed = Bitstream::deserialize(&stream.serialize()).unwrap();
        assert_eq!(parsed.header.lambda_index, 2);
        let via_codec = decompress(&params, &model, &parsed).unwrap();

        // Same reconstruction without the range coder in the loop.
        let mut tape: Tape<f32> = Tape::new();
        let coords = stacked_coords(&sample.coord_abs).unwrap();
        let y = encode(
            &mut tape,
            params.tensors(),
            params.config(),
            &sample.x_crop,
            Some(&coords),
            Some(&full),
        )
        .unwrap();
        let (q, _) = quantize_infer(&y, &model).unwrap();
        let y_hat = dequantize(&q, &model).unwrap();
        let direct = clip01(&decode(&mut tape, params.tensors(), params.config(), &y_hat).unwrap());

        assert_eq!(via_codec.data(), direct.data());
    }

    #[test]
    fn evaluation_is_deterministic_and_accounts_every_bit() {
        let dir = tempdir().unwrap();
        let ds = micro_dataset(dir.path(), 4, 64);
        let params = micro_params();

        let a = evaluate_model("full", 1, &params, &ds, 64).unwrap();
        let b = evaluate_model("full", 1, &params, &ds, 64).unwrap();
        assert_eq!(a, b);

        // 64-pixel crops of 64-pixel captures: one sample per eval capture.
        assert_eq!(a.samples, ds.eval_ids.len());
        assert_eq!(a.total_pixels, (a.samples * 64 * 64) as u64);
        // Container header is 32 bytes per sample; payload adds more.
        assert!(a.total_bits > (a.samples * 32 * 8) as u64);
        assert!((a.bpp - a.total_bits as f64 / a.total_pixels as f64).abs() < 1e-15);
        assert!(a.psnr_db.is_finite() && a.delta_e.is_finite());
        assert!(a.msssim_raw > 0.0 && a.msssim_raw <= 1.0);
    }

    #[test]
    fn undersized_captures_are_rejected() {
        let dir = tempdir().unwrap();
        let ds = micro_dataset(dir.path(), 4, 64);
        let params = micro_params();
        let err = evaluate_model("full", 0, &params, &ds, 128).unwrap_err().to_string();
        assert!(err.contains("smaller than"), "{err}");
    }

    fn ladder_point(variant: &str, i: usize, bpp: f64, offset: f64) -> RdPoint {
        RdPoint {
            variant: variant.into(),
            lambda_index: i,
            bpp,
            psnr_db: 30.0 + 2.0 * bpp.log2() + offset,
            msssim_raw: 0.9,
            msssim_db: 10.0 + bpp.log2() + offset,
            delta_e: 4.0 - bpp.log2() - offset,
            samples: 1,
            total_bits: 1000,
            total_pixels: 4096,
            capped_samples: 0,
        }
    }

    #[test]
    fn bd_report_reads_back_the_known_ladder() {
        let rates = [0.25, 0.5, 1.0, 2.0];
        let anchor: Vec<_> =
            rates.iter().enumerate().map(|(i, &r)| ladder_point("base", i, r, 0.0)).collect();
        let test: Vec<_> =
            rates.iter().enumerate().map(|(i, &r)| ladder_point("full", i, r, 1.0)).collect();
        let rep = bd_report(&anchor, &test).unwrap();
        assert_eq!(rep.anchor, "base");
        assert_eq!(rep.test, "full");
        assert!((rep.bd_psnr - 1.0).abs() < 1e-9, "{}", rep.bd_psnr);
        assert!((rep.bd_rate_pct - ((0.5f64.sqrt() - 1.0) * 100.0)).abs() < 1e-6);
        assert!((rep.bd_msssim_db - 1.0).abs() < 1e-9);
        assert!((rep.bd_delta_e + 1.0).abs() < 1e-9);
    }

    #[test]
    fn csv_output_is_byte_stable() {
        let points =
            vec![ladder_point("base", 0, 0.25, 0.0), ladder_point("base", 1, 0.5, 0.0)];
        assert_eq!(rd_csv(&points), rd_csv(&points));
        let first_line = rd_csv(&points).lines().next().unwrap().to_string();
        assert_eq!(first_line, RD_CSV_HEADER);

        let rep = BdReport {
            anchor: "base".into(),
            test: "full".into(),
            bd_rate_pct: -29.289322,
            bd_psnr: 1.0,
            bd_msssim_db: 0.5,
            bd_delta_e: -0.25,
        };
        let text = bd_csv(std::slice::from_ref(&rep));
        assert_eq!(text.lines().count(), 5);
        assert!(text.contains("base,full,bd_rate_pct,-29.289322"), "{text}");

        let dir = tempdir().unwrap();
        let p1 = dir.path().join("rd.csv");
        write_rd_csv(&p1, &points).unwrap();
        write_rd_csv(&p1, &points).unwrap();
        assert_eq!(fs::read_to_string(&p1).unwrap(), rd_csv(&points));
    }

    #[test]
    fn mixed_variant_curves_are_rejected() {
        let pts = vec![
            ladder_point("base", 0, 0.25, 0.0),
            ladder_point("full", 1, 0.5, 0.0),
            ladder_point("base", 2, 1.0, 0.0),
        ];
        let anchor = vec![
            ladder_point("base", 0, 0.25, 0.0),
            ladder_point("base", 1, 0.5, 0.0),
            ladder_point("base", 2, 1.0, 0.0),
        ];
        assert!(bd_report(&anchor, &pts).is_err());
    }
}
