//! Experiment orchestration: the train → prune → retrain loop, persistence,
//! resumption, λ sweeps and analysis exports.

mod checkpoint;
mod config;
mod metrics;
mod report;
mod run;
mod sweep;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use config::{
    default_desk_config, DataConfig, DataSource, DetectConfig, ExperimentConfig, NoiseConfig,
};
pub use metrics::{read_csv_column, read_metrics, write_metrics, MetricsRow, METRICS_HEADER};
pub use report::{export_histogram, render_report, Histogram, ReportKind};
pub use run::{
    load_record, resume, run_experiment, CheckpointNote, DerivedSeeds, RunManifest, RunOptions,
    RunRecord, RunStatus, VerdictFile,
};
pub use sweep::{sweep_lambda, SweepCell, SweepOptions, SweepRecord};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::DataError;
use crate::optim::OptimError;
use crate::pruning::PruneError;
use crate::tensor::TensorError;
use crate::vit::VitError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error on {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Vit(#[from] VitError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("loss became non-finite at round {round}, step {step}; run marked failed")]
    NanLoss { round: usize, step: usize },
    #[error("{dir} has no run manifest")]
    MissingManifest { dir: String },
    #[error("metrics file {path}: line {line}: {msg}")]
    MetricsFormat { path: String, line: usize, msg: String },
    #[error("training labels drifted from the persisted flip record at round {round}")]
    LabelsDrift { round: usize },
    #[error("{0}")]
    Report(String),
}

pub(crate) fn io_err(path: &std::path::Path, source: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.display().to_string(), source }
}

/// Seed for a named stream derived from the experiment master seed.
pub fn derive_seed(master: u64, domain: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Write a file atomically: temp name in the same directory, then rename.
pub(crate) fn atomic_write(path: &std::path::Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
    Ok(())
}
