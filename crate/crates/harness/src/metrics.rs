//! Per-epoch metrics: `metrics.jsonl` while training, `summary.csv` at the end.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// One line of `metrics.jsonl`. Field order is the serialised order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub task_loss: f64,
    /// Unweighted sum over the distilled levels.
    pub feat_loss: f64,
    pub total_loss: f64,
    pub pixel_accuracy: f64,
    pub mean_iou: f64,
    pub learning_rate: f64,
    pub wall_seconds: f64,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_epoch: usize,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        Self::create_named(dir, METRICS_FILE)
    }

    pub fn create_named(dir: &Path, file: &str) -> Result<Self> {
        let path = dir.join(file);
        let file = File::create(&path).map_err(|e| HarnessError::io(&path, e))?;
        Ok(MetricsWriter { path, out: BufWriter::new(file), last_epoch: 0 })
    }

    /// Appends `rows` (one epoch) and flushes.
    pub fn write_epoch(&mut self, rows: &[MetricsRow]) -> Result<()> {
        for row in rows {
            if row.epoch < self.last_epoch {
                return Err(HarnessError::Metrics {
                    path: self.path.clone(),
                    message: format!("epoch {} written after epoch {}", row.epoch, self.last_epoch),
                });
            }
            self.last_epoch = row.epoch;
            let line = serde_json::to_string(row)
                .map_err(|e| HarnessError::Metrics { path: self.path.clone(), message: e.to_string() })?;
            writeln!(self.out, "{line}").map_err(|e| HarnessError::io(&self.path, e))?;
        }
        self.out.flush().map_err(|e| HarnessError::io(&self.path, e))
    }
}

pub fn write_summary(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    let path = dir.join(SUMMARY_FILE);
    let err = |e: csv::Error| HarnessError::Metrics { path: path.clone(), message: e.to_string() };
    let mut w = csv::Writer::from_path(&path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    text.lines()
        .map(|l| {
            serde_json::from_str(l)
                .map_err(|e| HarnessError::Metrics { path: path.to_path_buf(), message: e.to_string() })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(epoch: usize, split: Split) -> MetricsRow {
        MetricsRow {
            epoch,
            split,
            task_loss: 0.5,
            feat_loss: 1.25,
            total_loss: 6.75,
            pixel_accuracy: 0.875,
            mean_iou: 0.5,
            learning_rate: 0.01,
            wall_seconds: 0.0,
        }
    }

    #[test]
    fn jsonl_field_names_and_order() {
        let line = serde_json::to_string(&row(1, Split::Val)).unwrap();
        assert_eq!(
            line,
            "{\"epoch\":1,\"split\":\"val\",\"task_loss\":0.5,\"feat_loss\":1.25,\"total_loss\":6.75,\
             \"pixel_accuracy\":0.875,\"mean_iou\":0.5,\"learning_rate\":0.01,\"wall_seconds\":0.0}"
        );
    }

    #[test]
    fn write_then_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![row(1, Split::Train), row(1, Split::Val), row(2, Split::Train)];
        let mut w = MetricsWriter::create(dir.path()).unwrap();
        w.write_epoch(&rows).unwrap();
        assert!(w.write_epoch(&[row(1, Split::Val)]).is_err());
        drop(w);
        assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), rows);
        write_summary(dir.path(), &rows[..2]).unwrap();
        let csv = std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
        let header = csv.lines().next().unwrap();
        assert_eq!(
            header,
            "epoch,split,task_loss,feat_loss,total_loss,pixel_accuracy,mean_iou,learning_rate,wall_seconds"
        );
        assert_eq!(csv.lines().count(), 3);
    }
}
