//! Component ablation: train variant configs under an identical seed and
//! budget, evaluate each through the real codec, and summarise against the
//! first variant as the anchor.

use std::fs;
use std::path::PathBuf;

use crate::metrics::{
    bd_report, evaluate_model, write_bd_csv, write_rd_csv, BdReport, RdPoint,
};
use crate::model::{CoordMode, ModelConfig};
use crate::rawsim::load_dataset;
use crate::train::{default_milestones, train, TrainRunSpec};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
}

fn variant(name: &str, config: ModelConfig) -> Variant {
    Variant { name: name.to_string(), config }
}

/// Cumulative component ladder: a bare autoencoder, then the coordinate
/// gate, attention, global priors, and local priors switched on one at a
/// time. Widths and depths come from `full`; only the toggles vary.
pub fn ablation_ladder(full: &ModelConfig) -> Vec<Variant> {
    let coord = match full.coord_mode {
        CoordMode::None => CoordMode::Absolute,
        other => other,
    };
    let base = ModelConfig {
        use_cadr: false,
        coord_mode: CoordMode::None,
        use_csa: false,
        use_gft: false,
        use_lft: false,
        ..full.clone()
    };
    vec![
        variant("base", base.clone()),
        variant("cadr", ModelConfig { use_cadr: true, coord_mode: coord, ..base.clone() }),
        variant(
            "cadr_csa",
            ModelConfig { use_cadr: true, coord_mode: coord, use_csa: true, ..base.clone() },
        ),
        variant(
            "cadr_csa_gft",
            ModelConfig {
                use_cadr: true,
                coord_mode: coord,
                use_csa: true,
                use_gft: true,
                ..base.clone()
            },
        ),
        variant("full", ModelConfig { coord_mode: coord, ..full.clone() }),
    ]
}

/// Coordinate-frame study on the gate alone: absolute capture coordinates,
/// crop-relative coordinates, and no coordinate input, with every other
/// component off.
pub fn coord_variants(full: &ModelConfig) -> Vec<Variant> {
    let stem_only = ModelConfig {
        use_cadr: true,
        use_csa: false,
        use_gft: false,
        use_lft: false,
        ..full.clone()
    };
    vec![
        variant(
            "coord_absolute",
            ModelConfig { coord_mode: CoordMode::Absolute, ..stem_only.clone() },
        ),
        variant(
            "coord_relative",
            ModelConfig { coord_mode: CoordMode::Relative, ..stem_only.clone() },
        ),
        variant("coord_none", ModelConfig { coord_mode: CoordMode::None, ..stem_only }),
    ]
}

#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub dataset: PathBuf,
    pub out_dir: PathBuf,
    /// λ grid entries to train, one model per index per variant per seed.
    pub lambda_indices: Vec<usize>,
    /// Every variant trains once per seed with identical budgets.
    pub seeds: Vec<u64>,
    pub steps: u64,
    pub batch: usize,
    pub crop: usize,
    pub eval_crop: usize,
    pub lr: f64,
    pub log_every: u64,
}

impl AblationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_indices.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("ablation needs at least one λ index and one seed".into()));
        }
        if self.lambda_indices.len() < 3 {
            return Err(Error::Config(format!(
                "ablation trains {} λ point(s) per variant; Bjontegaard summaries need 3",
                self.lambda_indices.len()
            )));
        }
        Ok(())
    }
}

/// RD curve of one (variant, seed) pair, one point per λ index.
#[derive(Clone, Debug)]
pub struct VariantCurve {
    pub variant: String,
    pub seed: u64,
    pub points: Vec<RdPoint>,
}

#[derive(Clone, Debug)]
pub struct AblationOutcome {
    /// Variant-major, then seed, matching the training order.
    pub curves: Vec<VariantCurve>,
    /// Seed-averaged deltas of every non-anchor variant against the anchor
    /// (the first variant in the list), in list order.
    pub reports: Vec<BdReport>,
}

/// Train and evaluate one variant at one seed across the λ grid.
pub fn run_variant(spec: &AblationSpec, var: &Variant, seed: u64) -> Result<VariantCurve> {
    let dataset = load_dataset(&spec.dataset)?;
    let mut points = Vec::new();
    for &k in &spec.lambda_indices {
        let run = TrainRunSpec {
            dataset: spec.dataset.clone(),
            out_dir: spec
                .out_dir
                .join(&var.name)
                .join(format!("seed{seed}"))
                .join(format!("lambda{k}")),
            model: var.config.clone(),
            lambda_index: k,
            steps: spec.steps,
            batch: spec.batch,
            crop: spec.crop,
            lr: spec.lr,
            milestones: default_milestones(spec.steps),
            clip_norm: 1.0,
            seed,
            log_every: spec.log_every,
        };
        let outcome = train(&run)?;
        points.push(evaluate_model(&var.name, k, &outcome.params, &dataset, spec.eval_crop)?);
    }
    Ok(VariantCurve { variant: var.name.clone(), seed, points })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Run the whole study and write per-seed RD tables plus a seed-averaged
/// delta summary under the output directory.
pub fn run_ablation(spec: &AblationSpec, variants: &[Variant]) -> Result<AblationOutcome> {
    spec.validate()?;
    if variants.len() < 2 {
        return Err(Error::Config("ablation needs an anchor and at least one variant".into()));
    }
    fs::create_dir_all(&spec.out_dir)?;

    let mut curves = Vec::new();
    for var in variants {
        for &seed in &spec.seeds {
            eprintln!("ablate: training {} (seed {seed})", var.name);
            curves.push(run_variant(spec, var, seed)?);
        }
    }

    for &seed in &spec.seeds {
        let rows: Vec<RdPoint> = curves
            .iter()
            .filter(|c| c.seed == seed)
            .flat_map(|c| c.points.iter().cloned())
            .collect();
        write_rd_csv(&spec.out_dir.join(format!("rd_seed{seed}.csv")), &rows)?;
    }

    let anchor = &variants[0].name;
    let mut reports = Vec::new();
    for var in &variants[1..] {
        let mut per_seed = Vec::new();
        for &seed in &spec.seeds {
            let find = |name: &str| -> &VariantCurve {
                curves
                    .iter()
                    .find(|c| c.variant == name && c.seed == seed)
                    .expect("trained above")
            };
            per_seed.push(bd_report(&find(anchor).points, &find(&var.name).points)?);
        }
        reports.push(BdReport {
            anchor: anchor.clone(),
            test: var.name.clone(),
            bd_rate_pct: mean(&per_seed.iter().map(|r| r.bd_rate_pct).collect::<Vec<_>>()),
            bd_psnr: mean(&per_seed.iter().map(|r| r.bd_psnr).collect::<Vec<_>>()),
            bd_msssim_db: mean(&per_seed.iter().map(|r| r.bd_msssim_db).collect::<Vec<_>>()),
            bd_delta_e: mean(&per_seed.iter().map(|r| r.bd_delta_e).collect::<Vec<_>>()),
        });
    }
    write_bd_csv(&spec.out_dir.join(format!("bd_vs_{anchor}.csv")), &reports)?;

    Ok(AblationOutcome { curves, reports })
}
