//! λ sweeps: one run per ℓ2 weight, sharing the data/noise seed, plus the
//! (λ, ζ) surface table and per-λ summary.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::metrics::MetricsRow;
use super::run::{load_record, run_experiment, RunOptions, RunRecord};
use super::{atomic_write, ExperimentConfig, HarnessError};

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub out_dir: PathBuf,
    pub jobs: usize,
    pub quiet: bool,
    pub deterministic: bool,
}

impl SweepOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self { out_dir: out_dir.into(), jobs: 1, quiet: false, deterministic: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepCell {
    pub lambda: f64,
    pub run_dir: PathBuf,
    pub status: String,
    pub sdd: Option<bool>,
    pub trigger_index: Option<usize>,
    pub bump_val_loss: Option<f64>,
    pub collapse_sparsity: Option<f64>,
    pub final_sparsity: Option<f64>,
    #[serde(default)]
    pub warning: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SweepRecord {
    pub out_dir: PathBuf,
    pub base_config_hash: String,
    pub lambdas: Vec<f64>,
    pub cells: Vec<SweepCell>,
}

pub const SWEEP_FILE: &str = "sweep.json";
pub const SURFACE_FILE: &str = "sweep_surface.csv";
pub const SUMMARY_FILE: &str = "sweep_summary.csv";

/// Smallest sparsity at which validation accuracy falls below 1.5× chance;
/// `None` if the curve never collapses.
pub fn collapse_sparsity(curve: &[MetricsRow], num_classes: usize) -> Option<f64> {
    let threshold = 1.5 / num_classes as f64;
    curve.iter().find(|r| r.val_acc < threshold).map(|r| r.sparsity)
}

fn cell_from_record(lambda: f64, record: &RunRecord, num_classes: usize) -> SweepCell {
    SweepCell {
        lambda,
        run_dir: record.run_dir.clone(),
        status: format!("{:?}", record.manifest.status).to_lowercase(),
        sdd: record.verdict.as_ref().map(|v| v.sdd),
        trigger_index: record.verdict.as_ref().and_then(|v| v.trigger_index),
        bump_val_loss: record.verdict.as_ref().map(|v| v.bump_val_loss),
        collapse_sparsity: collapse_sparsity(&record.curve, num_classes),
        final_sparsity: record.curve.last().map(|r| r.sparsity),
        warning: if lambda == 0.0 { Some("lambda=0: unregularized run".into()) } else { None },
    }
}

/// Run one experiment per λ (shared seed, so all cells see the identical
/// noisy-label flip record). Individual failures are recorded and the sweep
/// continues.
pub fn sweep_lambda(
    base: &ExperimentConfig,
    lambdas: &[f64],
    opts: &SweepOptions,
) -> Result<SweepRecord, HarnessError> {
    if lambdas.is_empty() {
        return Err(HarnessError::Config("sweep needs at least one lambda".into()));
    }
    if let Some(bad) = lambdas.iter().find(|&&l| l < 0.0) {
        return Err(HarnessError::Config(format!("negative lambda {bad}")));
    }
    for (i, a) in lambdas.iter().enumerate() {
        if lambdas[..i].contains(a) {
            return Err(HarnessError::Config(format!("duplicate lambda {a}")));
        }
    }
    std::fs::create_dir_all(&opts.out_dir)
        .map_err(|e| super::io_err(&opts.out_dir, e))?;

    let cells: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; lambdas.len()]);
    let next = AtomicUsize::new(0);
    let jobs = opts.jobs.max(1).min(lambdas.len());
    let num_classes = base.model.num_classes;

    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= lambdas.len() {
                    break;
                }
                let lambda = lambdas[i];
                let mut config = base.clone();
                config.train.lambda = lambda;
                config.out_dir = None;
                let run_dir = opts.out_dir.join(format!("lambda_{lambda}"));
                let run_opts = RunOptions {
                    out_dir: run_dir.clone(),
                    deterministic: opts.deterministic,
                    quiet: opts.quiet,
                    abort_after_iterations: None,
                };
                let cell = match run_experiment(&config, &run_opts) {
                    Ok(record) => cell_from_record(lambda, &record, num_classes),
                    Err(err) => {
                        // partial artifacts may still exist on disk
                        let partial = load_record(&run_dir).ok();
                        SweepCell {
                            lambda,
                            run_dir: run_dir.clone(),
                            status: format!("failed: {err}"),
                            sdd: None,
                            trigger_index: None,
                            bump_val_loss: None,
                            collapse_sparsity: partial
                                .as_ref()
                                .and_then(|r| collapse_sparsity(&r.curve, num_classes)),
                            final_sparsity: partial
                                .as_ref()
                                .and_then(|r| r.curve.last().map(|row| row.sparsity)),
                            warning: if lambda == 0.0 {
                                Some("lambda=0: unregularized run".into())
                            } else {
                                None
                            },
                        }
                    }
                };
                cells.lock().expect("no poisoned lock")[i] = Some(cell);
            });
        }
    });

    let cells: Vec<SweepCell> = cells
        .into_inner()
        .expect("threads joined")
        .into_iter()
        .map(|c| c.expect("every lambda produced a cell"))
        .collect();

    let record = SweepRecord {
        out_dir: opts.out_dir.clone(),
        base_config_hash: base.hash(),
        lambdas: lambdas.to_vec(),
        cells,
    };
    write_sweep_artifacts(&record)?;
    Ok(record)
}

fn write_sweep_artifacts(record: &SweepRecord) -> Result<(), HarnessError> {
    let json = serde_json::to_vec_pretty(record)
        .map_err(|e| HarnessError::Json { path: SWEEP_FILE.into(), source: e })?;
    atomic_write(&record.out_dir.join(SWEEP_FILE), &json)?;

    let mut surface = String::from("lambda,prune_iter,sparsity,val_acc,val_loss\n");
    for cell in &record.cells {
        if let Ok(run) = load_record(&cell.run_dir) {
            for row in &run.curve {
                surface.push_str(&format!(
                    "{},{},{},{},{}\n",
                    cell.lambda, row.prune_iter, row.sparsity, row.val_acc, row.val_loss
                ));
            }
        }
    }
    atomic_write(&record.out_dir.join(SURFACE_FILE), surface.as_bytes())?;

    let mut summary = String::from(
        "lambda,status,sdd,trigger_index,bump_val_loss,collapse_sparsity,final_sparsity,run_dir\n",
    );
    for cell in &record.cells {
        let opt = |o: &Option<f64>| o.map_or(String::new(), |v| v.to_string());
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            cell.lambda,
            cell.status,
            cell.sdd.map_or(String::new(), |b| b.to_string()),
            cell.trigger_index.map_or(String::new(), |i| i.to_string()),
            opt(&cell.bump_val_loss),
            opt(&cell.collapse_sparsity),
            opt(&cell.final_sparsity),
            cell.run_dir.display()
        ));
    }
    atomic_write(&record.out_dir.join(SUMMARY_FILE), summary.as_bytes())
}
