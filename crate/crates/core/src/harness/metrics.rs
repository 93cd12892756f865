//! The per-iteration metrics table. Column order is part of the external
//! interface; floats are written with Rust's shortest-roundtrip formatting so
//! identical runs produce byte-identical files.

use std::path::Path;

use super::{atomic_write, io_err, HarnessError};
use crate::detector::CurvePoint;

pub const METRICS_HEADER: &str =
    "run_id,prune_iter,sparsity,train_acc,train_loss,val_acc,val_loss,epochs_trained,lr_final,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub prune_iter: usize,
    pub sparsity: f64,
    pub train_acc: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub val_loss: f64,
    pub epochs_trained: usize,
    pub lr_final: f64,
    pub seed: u64,
}

impl MetricsRow {
    pub fn to_curve_point(&self) -> CurvePoint {
        CurvePoint {
            prune_iter: self.prune_iter,
            sparsity: self.sparsity,
            train_acc: self.train_acc,
            train_loss: self.train_loss,
            val_acc: self.val_acc,
            val_loss: self.val_loss,
        }
    }

    fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.run_id,
            self.prune_iter,
            self.sparsity,
            self.train_acc,
            self.train_loss,
            self.val_acc,
            self.val_loss,
            self.epochs_trained,
            self.lr_final,
            self.seed
        )
    }
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), HarnessError> {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_line());
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let p = path.display().to_string();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == METRICS_HEADER => {}
        Some((_, header)) => {
            return Err(HarnessError::MetricsFormat {
                path: p,
                line: 1,
                msg: format!("unexpected header {header:?}"),
            })
        }
        None => return Err(HarnessError::MetricsFormat { path: p, line: 1, msg: "empty file".into() }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(HarnessError::MetricsFormat {
                path: p,
                line: i + 1,
                msg: format!("expected 10 fields, got {}", fields.len()),
            });
        }
        let err = |msg: String, line| HarnessError::MetricsFormat { path: p.clone(), line, msg };
        rows.push(MetricsRow {
            run_id: fields[0].to_string(),
            prune_iter: fields[1].parse().map_err(|_| err(format!("bad prune_iter {:?}", fields[1]), i + 1))?,
            sparsity: fields[2].parse().map_err(|_| err(format!("bad sparsity {:?}", fields[2]), i + 1))?,
            train_acc: fields[3].parse().map_err(|_| err(format!("bad train_acc {:?}", fields[3]), i + 1))?,
            train_loss: fields[4].parse().map_err(|_| err(format!("bad train_loss {:?}", fields[4]), i + 1))?,
            val_acc: fields[5].parse().map_err(|_| err(format!("bad val_acc {:?}", fields[5]), i + 1))?,
            val_loss: fields[6].parse().map_err(|_| err(format!("bad val_loss {:?}", fields[6]), i + 1))?,
            epochs_trained: fields[7].parse().map_err(|_| err(format!("bad epochs_trained {:?}", fields[7]), i + 1))?,
            lr_final: fields[8].parse().map_err(|_| err(format!("bad lr_final {:?}", fields[8]), i + 1))?,
            seed: fields[9].parse().map_err(|_| err(format!("bad seed {:?}", fields[9]), i + 1))?,
        });
    }
    Ok(rows)
}

/// Pull one numeric column out of a CSV with a header row; a headerless
/// single-column file of numbers is accepted too.
pub fn read_csv_column(path: &Path, column: &str) -> Result<Vec<f64>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let p = path.display().to_string();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let Some((_, first)) = lines.next() else {
        return Err(HarnessError::MetricsFormat { path: p, line: 1, msg: "empty file".into() });
    };
    let headers: Vec<&str> = first.split(',').map(str::trim).collect();
    let mut values = Vec::new();
    let col = match headers.iter().position(|&h| h == column) {
        Some(c) => c,
        None if headers.len() == 1 && headers[0].parse::<f64>().is_ok() => {
            values.push(headers[0].parse().unwrap());
            0
        }
        None => {
            return Err(HarnessError::MetricsFormat {
                path: p,
                line: 1,
                msg: format!("no column {column:?} in header {first:?}"),
            })
        }
    };
    for (i, line) in lines {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let field = fields.get(col).ok_or_else(|| HarnessError::MetricsFormat {
            path: p.clone(),
            line: i + 1,
            msg: format!("missing column {col}"),
        })?;
        values.push(field.parse().map_err(|_| HarnessError::MetricsFormat {
            path: p.clone(),
            line: i + 1,
            msg: format!("bad value {field:?}"),
        })?);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iter: usize) -> MetricsRow {
        MetricsRow {
            run_id: "abc-s1".into(),
            prune_iter: iter,
            sparsity: 1.0 - 0.8f64.powi(iter as i32),
            train_acc: 0.9,
            train_loss: 0.31,
            val_acc: 0.8123,
            val_loss: 0.57,
            epochs_trained: 6,
            lr_final: 1.2e-7,
            seed: 1,
        }
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let rows: Vec<MetricsRow> = (0..5).map(row).collect();
        write_metrics(&path, &rows).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), rows);
        // writing again produces identical bytes
        let bytes = std::fs::read(&path).unwrap();
        write_metrics(&path, &rows).unwrap();
        assert_eq!(bytes, std::fs::read(&path).unwrap());
    }

    #[test]
    fn column_reader_finds_val_acc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics(&path, &(0..3).map(row).collect::<Vec<_>>()).unwrap();
        let col = read_csv_column(&path, "val_acc").unwrap();
        assert_eq!(col, vec![0.8123; 3]);
        assert!(read_csv_column(&path, "nope").is_err());
    }

    #[test]
    fn column_reader_accepts_bare_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        std::fs::write(&path, "0.9\n0.8\n0.85\n").unwrap();
        assert_eq!(read_csv_column(&path, "val_acc").unwrap(), vec![0.9, 0.8, 0.85]);
    }
}
