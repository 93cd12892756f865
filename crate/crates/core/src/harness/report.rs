//! Human-readable summaries and the surviving-weight histogram export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::checkpoint::load_checkpoint;
use super::run::{load_record, RunStatus, MANIFEST_FILE};
use super::sweep::{SweepRecord, SWEEP_FILE};
use super::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Run,
    Sweep,
}

/// Histogram of surviving (unmasked) weights of the prunable tensors.
/// Out-of-range values land in the edge bins so counts always sum to the
/// survivor count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub survivors: u64,
    pub mean: f64,
    pub variance: f64,
}

impl Histogram {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_lo,bin_hi,count\n");
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        for (i, c) in self.counts.iter().enumerate() {
            let lo = self.lo + width * i as f64;
            out.push_str(&format!("{},{},{}\n", lo, lo + width, c));
        }
        out
    }
}

pub fn export_histogram(
    checkpoint: &Path,
    bins: usize,
    lo: f64,
    hi: f64,
) -> Result<Histogram, HarnessError> {
    if bins == 0 {
        return Err(HarnessError::Report("histogram needs at least one bin".into()));
    }
    if !(hi > lo) {
        return Err(HarnessError::Report(format!("bad histogram range [{lo}, {hi}]")));
    }
    let (params, mask) = load_checkpoint(checkpoint)?;
    let mut counts = vec![0u64; bins];
    let width = (hi - lo) / bins as f64;
    // Welford running moments; the tests check this against a two-pass oracle
    let mut n = 0u64;
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    for (name, bits) in mask.iter() {
        let data = params
            .get(name)
            .ok_or_else(|| HarnessError::Report(format!("mask {name} has no parameter")))?
            .data();
        for (&keep, &v) in bits.iter().zip(data) {
            if keep == 0 {
                continue;
            }
            let v = v as f64;
            n += 1;
            let d = v - mean;
            mean += d / n as f64;
            m2 += d * (v - mean);
            let idx = (((v - lo) / width).floor() as i64).clamp(0, bins as i64 - 1) as usize;
            counts[idx] += 1;
        }
    }
    if n == 0 {
        return Err(HarnessError::Report("no surviving weights in checkpoint".into()));
    }
    Ok(Histogram { lo, hi, counts, survivors: n, mean, variance: m2 / n as f64 })
}

fn phase_text(phases: &crate::detector::PhaseSegmentation) -> String {
    phases
        .phases
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{}=[{},{})", i + 1, r.start, r.end))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Build a summary for a run or sweep directory. Returns the text and the
/// SDD flag (for a sweep: whether any completed cell was flagged).
pub fn render_report(dir: &Path) -> Result<(String, bool), HarnessError> {
    match classify(dir)? {
        ReportKind::Run => render_run(dir),
        ReportKind::Sweep => render_sweep(dir),
    }
}

fn classify(dir: &Path) -> Result<ReportKind, HarnessError> {
    if dir.join(MANIFEST_FILE).exists() {
        Ok(ReportKind::Run)
    } else if dir.join(SWEEP_FILE).exists() {
        Ok(ReportKind::Sweep)
    } else {
        Err(HarnessError::MissingManifest { dir: dir.display().to_string() })
    }
}

fn render_run(dir: &Path) -> Result<(String, bool), HarnessError> {
    let record = load_record(dir)?;
    let m = &record.manifest;
    let mut out = String::new();
    out.push_str(&format!("run {}\n", m.run_id));
    let status = match m.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Failed => format!("FAILED ({})", m.note.clone().unwrap_or_default()),
        RunStatus::Running => "running (incomplete)".to_string(),
        RunStatus::Interrupted => "interrupted".to_string(),
    };
    out.push_str(&format!("status: {status}\n"));
    if let Some(note) = &m.note {
        if m.status != RunStatus::Failed {
            out.push_str(&format!("note: {note}\n"));
        }
    }
    out.push_str(&format!(
        "iterations: {} of {} planned; prunable weights: {}; epsilon: {}; lambda: {}\n",
        m.iterations_done,
        m.planned_iterations + 1,
        m.prunable_total,
        m.config.noise.epsilon,
        m.config.train.lambda,
    ));
    let mut sdd = false;
    match &record.verdict {
        Some(v) => {
            sdd = v.sdd;
            let trigger = match (v.trigger_index, v.trigger_sparsity) {
                (Some(i), Some(z)) => format!(" (trigger iter {i}, sparsity {z:.4})"),
                _ => String::new(),
            };
            out.push_str(&format!(
                "sdd: {}{}\nphases: {}\nbump(val_loss): {:.6}\n",
                if v.sdd { "TRUE" } else { "false" },
                trigger,
                phase_text(&v.phases),
                v.bump_val_loss
            ));
        }
        None => out.push_str("sdd: verdict not available (run incomplete)\n"),
    }
    out.push_str("curve:\n");
    out.push_str("  iter  sparsity   train_acc  train_loss  val_acc   val_loss\n");
    for row in &record.curve {
        out.push_str(&format!(
            "  {:>4}  {:<9.6}  {:<9.4}  {:<10.4}  {:<8.4}  {:<8.4}\n",
            row.prune_iter, row.sparsity, row.train_acc, row.train_loss, row.val_acc, row.val_loss
        ));
    }
    Ok((out, sdd))
}

fn render_sweep(dir: &Path) -> Result<(String, bool), HarnessError> {
    let path = dir.join(SWEEP_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| super::io_err(&path, e))?;
    let record: SweepRecord = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Json { path: path.display().to_string(), source: e })?;
    let mut out = String::new();
    out.push_str(&format!("sweep over {} lambda values\n", record.lambdas.len()));
    out.push_str("lambda      status      sdd    bump(val_loss)  collapse_zeta\n");
    let mut any_sdd = false;
    for cell in &record.cells {
        any_sdd |= cell.sdd.unwrap_or(false);
        out.push_str(&format!(
            "{:<10}  {:<10}  {:<5}  {:<14}  {}\n",
            cell.lambda,
            cell.status,
            cell.sdd.map_or("-".into(), |b| b.to_string()),
            cell.bump_val_loss.map_or("-".into(), |b| format!("{b:.6}")),
            cell.collapse_sparsity.map_or("-".into(), |z| format!("{z:.4}")),
        ));
        if let Some(w) = &cell.warning {
            out.push_str(&format!("            warning: {w}\n"));
        }
    }
    Ok((out, any_sdd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::checkpoint::save_checkpoint;
    use crate::params::ParamSet;
    use crate::pruning::PruneMask;
    use crate::tensor::Tensor;
    use std::collections::BTreeMap;

    fn checkpoint_with(values: &[f32], mask_bits: &[u8]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::new();
        params.insert("w", Tensor::from_vec(values.to_vec()));
        let mut masks = BTreeMap::new();
        masks.insert("w".to_string(), mask_bits.to_vec());
        let mask = PruneMask::from_parts(masks);
        save_checkpoint(&dir.path().join("c.ckpt"), &params, &mask).unwrap();
        dir
    }

    #[test]
    fn zero_weights_fill_middle_bin() {
        let dir = checkpoint_with(&[0.0, 0.0, 0.0], &[1, 1, 1]);
        let h = export_histogram(&dir.path().join("c.ckpt"), 3, -1.0, 1.0).unwrap();
        assert_eq!(h.counts, vec![0, 3, 0]);
        assert_eq!(h.survivors, 3);
    }

    #[test]
    fn counts_conserve_survivors_with_out_of_range_values() {
        let dir = checkpoint_with(&[-5.0, -0.2, 0.3, 9.0, 0.1], &[1, 1, 1, 1, 0]);
        let h = export_histogram(&dir.path().join("c.ckpt"), 4, -1.0, 1.0).unwrap();
        assert_eq!(h.counts.iter().sum::<u64>(), 4);
        assert_eq!(h.counts[0] >= 1, true); // clamped -5.0
    }

    #[test]
    fn variance_matches_two_pass_oracle() {
        let values: Vec<f32> = (0..101).map(|i| ((i * 37 % 101) as f32 - 50.0) * 0.01).collect();
        let bits = vec![1u8; values.len()];
        let dir = checkpoint_with(&values, &bits);
        let h = export_histogram(&dir.path().join("c.ckpt"), 10, -1.0, 1.0).unwrap();
        // two-pass reference
        let n = values.len() as f64;
        let mean: f64 = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!((h.mean - mean).abs() < 1e-12);
        assert!((h.variance - var).abs() < 1e-12);
    }

    #[test]
    fn empty_survivors_is_an_error() {
        let dir = checkpoint_with(&[1.0, 2.0], &[0, 0]);
        assert!(export_histogram(&dir.path().join("c.ckpt"), 3, -1.0, 1.0).is_err());
    }
}
