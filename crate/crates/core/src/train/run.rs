//! The training loop: noise-quantized rate, Adam, multi-step LR decay,
//! JSON-lines logging, and milestone checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::{adam_step, clip_global_norm, OptimState};
use super::loss::{rd_loss, RDLossConfig, LAMBDA_GRID};
use crate::codec::uniform_noise;
use crate::model::{decode, encode, param, stacked_coords, CoordMode, ModelConfig, ModelParams};
use crate::rawsim::{crop_plan, load_dataset, make_crop, stack_plane, Dataset};
use crate::tensor::{derive_seed, Tape, Tensor};
use crate::{Error, Result};

/// LR halves at 60% and 85% of the step budget.
pub fn default_milestones(steps: u64) -> Vec<u64> {
    vec![steps * 3 / 5, steps * 17 / 20]
}

#[derive(Clone, Debug)]
pub struct TrainRunSpec {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub lambda_index: usize,
    pub steps: u64,
    pub batch: usize,
    /// Crop side length in full RAW pixels.
    pub crop: usize,
    pub lr: f64,
    /// Steps at which the LR halves, strictly ascending, each < steps.
    pub milestones: Vec<u64>,
    pub clip_norm: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl TrainRunSpec {
    /// The default desk budget: 3000 steps, batch 8, 64x64 crops.
    pub fn desk_default(dataset: PathBuf, out_dir: PathBuf, lambda_index: usize, seed: u64) -> TrainRunSpec {
        TrainRunSpec {
            dataset,
            out_dir,
            model: ModelConfig::default(),
            lambda_index,
            steps: 3000,
            batch: 8,
            crop: 64,
            lr: 1e-4,
            milestones: default_milestones(3000),
            clip_norm: 1.0,
            seed,
            log_every: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.model.latent_dims(self.crop, self.crop)?;
        if self.lambda_index >= LAMBDA_GRID.len() {
            return Err(Error::Config(format!(
                "lambda index {} out of range 0..{}",
                self.lambda_index,
                LAMBDA_GRID.len()
            )));
        }
        if self.steps == 0 || self.batch == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, batch, and log-every must be positive".into()));
        }
        if !(self.lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config("learning rate and clip norm must be positive".into()));
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("milestones must be strictly ascending".into()));
        }
        if self.milestones.iter().any(|&m| m == 0 || m >= self.steps) {
            return Err(Error::Config("milestones must fall strictly inside (0, steps)".into()));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub distortion: f64,
    pub rate_bpp: f64,
    pub mse: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub records: Vec<LogRecord>,
    /// Parameters that never saw a nonzero gradient during the run.
    pub silent_params: Vec<String>,
}

struct StepStats {
    loss: f64,
    distortion: f64,
    rate_bpp: f64,
    mse: f64,
}

/// Forward + backward over one batch. Returns per-parameter gradients of the
/// batch-mean loss and the averaged loss components.
fn run_step(
    params: &ModelParams<f32>,
    dataset: &Dataset,
    picks: &[(u32, usize, usize)],
    spec: &TrainRunSpec,
    cfg: &RDLossConfig,
    noise_seed: u64,
) -> Result<(BTreeMap<String, Vec<f32>>, StepStats)> {
    let model = &spec.model;
    let mut tape: Tape<f32> = Tape::new();
    let leaves = params.attach(&mut tape);
    let pixels = (spec.crop * spec.crop) as f64;

    let mut batch_total: Option<Tensor<f32>> = None;
    let mut stats = StepStats { loss: 0.0, distortion: 0.0, rate_bpp: 0.0, mse: 0.0 };

    for (b, &(id, m, n)) in picks.iter().enumerate() {
        let record = dataset.record(id)?;
        let capture = record.as_capture();
        let sample = make_crop(&capture, &record.target, m, n, spec.crop, spec.crop)?;

        let coords = match model.coord_mode {
            CoordMode::Absolute => Some(stacked_coords(&sample.coord_abs)?),
            CoordMode::Relative => Some(stacked_coords(&sample.coord_rel)?),
            CoordMode::None => None,
        };
        let full = if model.use_gft { Some(stack_plane(&record.raw)?) } else { None };

        let y = encode(&mut tape, &leaves, model, &sample.x_crop, coords.as_ref(), full.as_ref())?;
        let noise = uniform_noise(y.shape(), derive_seed(noise_seed, &b.to_string()));
        let y_tilde = tape.add(&y, &noise)?;

        let bits = tape.gaussian_rate_bits(
            &y_tilde,
            param(&leaves, "entropy.mu")?,
            param(&leaves, "entropy.log_sigma")?,
        )?;
        let total_bits = tape.sum(&bits)?;
        let bpp = tape.affine_const(&total_bits, 1.0 / pixels, 0.0)?;

        let recon = decode(&mut tape, &leaves, model, &y_tilde)?;
        let terms = rd_loss(&mut tape, &recon, &sample.target, &bpp, cfg)?;

        batch_total = Some(match batch_total {
            None => terms.total.clone(),
            Some(acc) => tape.add(&acc, &terms.total)?,
        });
        stats.loss += terms.loss;
        stats.distortion += terms.distortion;
        stats.rate_bpp += terms.rate_bpp;
        stats.mse += terms.mse;
    }

    let n = picks.len() as f64;
    stats.loss /= n;
    stats.distortion /= n;
    stats.rate_bpp /= n;
    stats.mse /= n;

    let loss_t = tape.affine_const(&batch_total.expect("batch is non-empty"), 1.0 / n, 0.0)?;
    let mut grad_map = tape.backward(&loss_t)?;
    let mut grads = BTreeMap::new();
    for (name, leaf) in &leaves {
        grads.insert(name.clone(), grad_map.take(leaf)?);
    }
    Ok((grads, stats))
}

/// Train one model. Deterministic given the spec: init, crop sampling, and
/// quantization noise all derive from `spec.seed`.
pub fn train(spec: &TrainRunSpec) -> Result<TrainOutcome> {
    spec.validate()?;
    let dataset = load_dataset(&spec.dataset)?;
    if dataset.train_ids.is_empty() {
        return Err(Error::Invalid("dataset has no training captures".into()));
    }
    let (cap_h, cap_w) = (dataset.config.height as usize, dataset.config.width as usize);
    if spec.crop > cap_h || spec.crop > cap_w {
        return Err(Error::Config(format!(
            "crop {} exceeds capture {}x{}",
            spec.crop, cap_h, cap_w
        )));
    }
    fs::create_dir_all(&spec.out_dir)?;

    let cfg = RDLossConfig::for_lambda_index(spec.lambda_index)?;
    let mut params = ModelParams::<f32>::init(&spec.model, derive_seed(spec.seed, "init"))?;
    let plan = crop_plan(
        spec.seed,
        &dataset.train_ids,
        cap_h,
        cap_w,
        spec.crop,
        (spec.steps as usize) * spec.batch,
    );
    let noise_root = derive_seed(spec.seed, "train-noise");
    let mut opt = OptimState::new(&params, spec.lr);

    let log_path = spec.out_dir.join("log.jsonl");
    let mut log_file = std::io::BufWriter::new(fs::File::create(&log_path)?);
    let mut records = Vec::new();
    let mut touched: BTreeSet<String> = BTreeSet::new();
    let milestones: BTreeSet<u64> = spec.milestones.iter().copied().collect();

    for step in 0..spec.steps {
        if milestones.contains(&step) {
            opt.set_lr(opt.lr() * 0.5);
        }
        let picks = &plan[(step as usize) * spec.batch..(step as usize + 1) * spec.batch];
        let noise_seed = derive_seed(noise_root, &step.to_string());

        let stepped = run_step(&params, &dataset, picks, spec, &cfg, noise_seed).and_then(
            |(mut grads, stats)| {
                let grad_norm = clip_global_norm(&mut grads, spec.clip_norm);
                if !stats.loss.is_finite() || !grad_norm.is_finite() {
                    return Err(Error::Invalid(format!(
                        "non-finite loss {} / gradient norm {}",
                        stats.loss, grad_norm
                    )));
                }
                Ok((grads, stats, grad_norm))
            },
        );
        let (grads, stats, grad_norm) = match stepped {
            Ok(v) => v,
            Err(e) => {
                let last_good = spec.out_dir.join("checkpoint-lastgood.rcpt");
                params.save(&last_good)?;
                return Err(Error::Invalid(format!(
                    "training diverged at step {step}: {e}; last good checkpoint at {}",
                    last_good.display()
                )));
            }
        };

        for (name, g) in &grads {
            if !touched.contains(name) && g.iter().any(|&v| v != 0.0) {
                touched.insert(name.clone());
            }
        }
        adam_step(&mut params, &grads, &mut opt)?;

        if step % spec.log_every == 0 || step + 1 == spec.steps {
            let rec = LogRecord {
                step,
                loss: stats.loss,
                distortion: stats.distortion,
                rate_bpp: stats.rate_bpp,
                mse: stats.mse,
                lr: opt.lr(),
                grad_norm,
            };
            serde_json::to_writer(&mut log_file, &rec)
                .map_err(|e| Error::format("train-log", e.to_string()))?;
            log_file.write_all(b"\n")?;
            records.push(rec);
        }
        if milestones.contains(&(step + 1)) {
            params.save(&spec.out_dir.join(format!("checkpoint-step{}.rcpt", step + 1)))?;
        }
    }
    log_file.flush()?;

    let checkpoint = spec.out_dir.join("checkpoint-final.rcpt");
    params.save(&checkpoint)?;
    fs::write(spec.out_dir.join("model.cfg"), spec.model.to_text())?;

    let silent_params = params
        .tensors()
        .keys()
        .filter(|name| !touched.contains(*name))
        .cloned()
        .collect();
    Ok(TrainOutcome { params, checkpoint, log: log_path, records, silent_params })
}

/// Convenience for tests and the demo: median of a slice.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of nothing");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    }
}

#[allow(unused)]
fn path_for_docs(_: &Path) {}
