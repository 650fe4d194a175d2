//! One-command study: synthesize the dataset, train the component ladder
//! across the λ grid, evaluate every model through the codec, and emit the
//! RD table plus the delta report against an anchor variant.

use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::metrics::{bd_report, evaluate_model, write_bd_csv, write_rd_csv, BdReport, RdPoint};
use crate::model::{ModelConfig, ModelParams};
use crate::rawsim::{build_dataset, load_dataset, Dataset, DatasetConfig};
use crate::train::{ablation_ladder, default_milestones, train, TrainRunSpec, LAMBDA_GRID};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct DemoSpec {
    pub out_dir: PathBuf,
    /// Dataset recipe; the file is built under the output directory on first
    /// use and reused afterwards.
    pub dataset: DatasetConfig,
    /// Widths and depths for the ladder; toggles are set per variant.
    pub full_config: ModelConfig,
    pub lambda_indices: Vec<usize>,
    pub seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub crop: usize,
    pub eval_crop: usize,
    pub lr: f64,
    pub log_every: u64,
    /// Variant the delta report is anchored on.
    pub anchor: String,
    /// Maximum concurrent training jobs.
    pub jobs: usize,
}

impl DemoSpec {
    /// Desk-scale defaults: the full λ grid at the default training budget.
    pub fn desk_default(out_dir: PathBuf) -> DemoSpec {
        DemoSpec {
            out_dir,
            dataset: DatasetConfig::default(),
            full_config: ModelConfig::default(),
            lambda_indices: (0..LAMBDA_GRID.len()).collect(),
            seed: 1,
            steps: 3000,
            batch: 8,
            crop: 64,
            eval_crop: 64,
            lr: 1e-4,
            log_every: 50,
            anchor: "base".into(),
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.full_config.validate()?;
        if self.lambda_indices.len() < 3 {
            return Err(Error::Config(format!(
                "demo trains {} λ point(s); the delta report needs 3",
                self.lambda_indices.len()
            )));
        }
        for &k in &self.lambda_indices {
            if k >= LAMBDA_GRID.len() {
                return Err(Error::Config(format!(
                    "λ index {k} outside the grid of {}",
                    LAMBDA_GRID.len()
                )));
            }
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        let ladder = ablation_ladder(&self.full_config);
        if !ladder.iter().any(|v| v.name == self.anchor) {
            return Err(Error::Config(format!(
                "anchor {:?} is not a ladder variant ({:?})",
                self.anchor,
                ladder.iter().map(|v| v.name.as_str()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DemoReport {
    /// Variant-major, λ in the requested order.
    pub points: Vec<RdPoint>,
    /// One report per non-anchor ladder variant, against the anchor.
    pub reports: Vec<BdReport>,
    pub rd_csv: PathBuf,
    pub bd_csv: PathBuf,
    pub dataset: PathBuf,
}

struct Job {
    variant: String,
    config: ModelConfig,
    lambda_index: usize,
}

fn run_job(spec: &DemoSpec, job: &Job, dataset: &Dataset) -> Result<RdPoint> {
    let dir = spec
        .out_dir
        .join("runs")
        .join(&job.variant)
        .join(format!("lambda{}", job.lambda_index));
    let checkpoint = dir.join("checkpoint-final.rcpt");
    let params: ModelParams<f32> = if checkpoint.exists() {
        eprintln!("demo: reusing {} λ{}", job.variant, job.lambda_index);
        ModelParams::<f32>::load(&checkpoint, &job.config).map_err(|e| {
            Error::Config(format!(
                "{} exists but does not match the current config ({e}); \
                 use a clean output directory",
                checkpoint.display()
            ))
        })?
    } else {
        eprintln!("demo: training {} λ{}", job.variant, job.lambda_index);
        let run = TrainRunSpec {
            dataset: spec.out_dir.join("data.rcds"),
            out_dir: dir,
            model: job.config.clone(),
            lambda_index: job.lambda_index,
            steps: spec.steps,
            batch: spec.batch,
            crop: spec.crop,
            lr: spec.lr,
            milestones: default_milestones(spec.steps),
            clip_norm: 1.0,
            seed: spec.seed,
            log_every: spec.log_every,
        };
        train(&run)?.params
    };
    evaluate_model(&job.variant, job.lambda_index, &params, dataset, spec.eval_crop)
}

/// Run the full study. Rerunning with the same spec reuses finished
/// checkpoints and reproduces the CSVs byte for byte.
pub fn run_demo(spec: &DemoSpec) -> Result<DemoReport> {
    spec.validate()?;
    fs::create_dir_all(&spec.out_dir)?;

    let data_path = spec.out_dir.join("data.rcds");
    if !data_path.exists() {
        eprintln!(
            "demo: building dataset ({} captures of {}x{})",
            spec.dataset.captures, spec.dataset.height, spec.dataset.width
        );
        build_dataset(&spec.dataset, &data_path)?;
    }
    let dataset = load_dataset(&data_path)?;

    let ladder = ablation_ladder(&spec.full_config);
    let jobs: Vec<Job> = ladder
        .iter()
        .flat_map(|v| {
            spec.lambda_indices.iter().map(|&k| Job {
                variant: v.name.clone(),
                config: v.config.clone(),
                lambda_index: k,
            })
        })
        .collect();

    // Fixed-slot assembly keeps the output independent of completion order.
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<RdPoint>>>> =
        jobs.iter().map(|_| Mutex::new(None)).collect();
    let workers = spec.jobs.min(jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let result = run_job(spec, &jobs[i], &dataset);
                *slots[i].lock().expect("slot lock") = Some(result);
            });
        }
    });

    let mut points = Vec::with_capacity(jobs.len());
    for slot in slots {
        points.push(slot.into_inner().expect("slot lock").expect("worker wrote its slot")?);
    }

    let curve = |name: &str| -> Vec<RdPoint> {
        points.iter().filter(|p| p.variant == name).cloned().collect()
    };
    let anchor_points = curve(&spec.anchor);
    let mut reports = Vec::new();
    for var in &ladder {
        if var.name != spec.anchor {
            reports.push(bd_report(&anchor_points, &curve(&var.name))?);
        }
    }

    let rd_csv = spec.out_dir.join("rd_curves.csv");
    let bd_csv = spec.out_dir.join("bd_report.csv");
    write_rd_csv(&rd_csv, &points)?;
    write_bd_csv(&bd_csv, &reports)?;
    Ok(DemoReport { points, reports, rd_csv, bd_csv, dataset: data_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rawsim::ToneParams;
    use tempfile::tempdir;

    fn micro_spec(out_dir: PathBuf, jobs: usize) -> DemoSpec {
        DemoSpec {
            out_dir,
            dataset: DatasetConfig {
                captures: 4,
                height: 64,
                width: 64,
                seed: 9,
                tone: ToneParams::default(),
            },
            full_config: ModelConfig {
                base_channels: 8,
                latent_channels: 6,
                cimc_blocks: 1,
                window: 4,
                heads: 2,
                stages: 2,
                ..ModelConfig::default()
            },
            lambda_indices: vec![0, 1, 2],
            seed: 2,
            steps: 4,
            batch: 1,
            crop: 32,
            eval_crop: 64,
            lr: 1e-4,
            log_every: 2,
            anchor: "base".into(),
            jobs,
        }
    }

    #[test]
    fn rejects_bad_specs_before_touching_disk() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("demo");
        let specs = [
            DemoSpec { lambda_indices: vec![0, 1], ..micro_spec(out.clone(), 1) },
            DemoSpec { lambda_indices: vec![0, 1, 9], ..micro_spec(out.clone(), 1) },
            DemoSpec { jobs: 0, ..micro_spec(out.clone(), 1) },
            DemoSpec { anchor: "nope".into(), ..micro_spec(out.clone(), 1) },
        ];
        for spec in specs {
            assert!(run_demo(&spec).is_err());
            assert!(!out.exists(), "no partial outputs on config error");
        }
    }

    #[test]
    fn study_is_reproducible_and_order_independent() {
        let dir = tempdir().unwrap();
        let a = micro_spec(dir.path().join("a"), 3);
        let b = micro_spec(dir.path().join("b"), 1);

        let ra = run_demo(&a).unwrap();
        assert_eq!(ra.points.len(), 15, "5 variants x 3 λ");
        assert_eq!(ra.reports.len(), 4);
        let rd_a = fs::read(&ra.rd_csv).unwrap();
        let bd_a = fs::read(&ra.bd_csv).unwrap();

        // Different worker count, fresh directory: identical tables.
        let rb = run_demo(&b).unwrap();
        assert_eq!(fs::read(&rb.rd_csv).unwrap(), rd_a);
        assert_eq!(fs::read(&rb.bd_csv).unwrap(), bd_a);

        // Rerun in place reuses the checkpoints and reproduces the bytes.
        let ra2 = run_demo(&a).unwrap();
        assert_eq!(fs::read(&ra2.rd_csv).unwrap(), rd_a);
        assert_eq!(fs::read(&ra2.bd_csv).unwrap(), bd_a);
    }

    #[test]
    fn stale_checkpoints_are_refused() {
        let dir = tempdir().unwrap();
        let spec = micro_spec(dir.path().join("demo"), 2);
        run_demo(&spec).unwrap();

        // Same directory, different architecture: the stored weights no
        // longer fit and silently retraining would mix configs.
        let wider = DemoSpec {
            full_config: ModelConfig { base_channels: 16, ..spec.full_config.clone() },
            ..spec
        };
        let err = run_demo(&wider).unwrap_err().to_string();
        assert!(err.contains("clean output directory"), "{err}");
    }
}
