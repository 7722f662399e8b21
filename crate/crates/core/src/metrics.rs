//! Per-epoch CSV and the final JSON report.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::{CIFAR_MEAN, CIFAR_STD};
use crate::error::{Error, Result};
use crate::pruner::{ArchReport, ChannelMask};
use crate::trainer::{MetricsRow, SaturationReport, Session};

pub const CSV_HEADER: &str =
    "stage,epoch,total_loss,ce_loss,penalty,top1,top5,delta,fraction_binarized,fraction_active,flops,params";

pub fn csv_line(r: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.stage.as_str(),
        r.epoch,
        r.total_loss,
        r.ce_loss,
        r.penalty,
        r.top1,
        r.top5,
        r.delta,
        r.fraction_binarized,
        r.fraction_active,
        r.flops,
        r.params
    )
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&csv_line(r));
        s.push('\n');
    }
    s
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, to_csv(rows)).map_err(|e| Error::io(path, e))
}

/// Appends rows, writing the header first if the file is new or empty.
pub fn append_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    ensure_parent(path)?;
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(CSV_HEADER);
        text.push('\n');
    }
    for r in rows {
        text.push_str(&csv_line(r));
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub config: TrainConfig,
    /// Applied only to CIFAR-10 inputs.
    pub normalization: Normalization,
    pub stage: String,
    pub architecture: ArchReport,
    pub masks: Option<ChannelMask>,
    pub rescued_layers: Vec<usize>,
    pub equivalence_max_abs_diff: Option<f64>,
    pub final_top1: Option<f64>,
    pub final_top5: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub saturation: Option<SaturationReport>,
}

impl RunReport {
    pub fn from_session(s: &Session, saturation: Option<SaturationReport>) -> Result<Self> {
        Ok(RunReport {
            config: s.cfg.clone(),
            normalization: Normalization {
                mean: CIFAR_MEAN,
                std: CIFAR_STD,
            },
            stage: s.progress.stage.as_str().into(),
            architecture: s.arch_report()?,
            rescued_layers: s
                .masks
                .as_ref()
                .map(|m| m.rescued_layers())
                .unwrap_or_default(),
            masks: s.masks.clone(),
            equivalence_max_abs_diff: s.equivalence,
            final_top1: s.rows.last().map(|r| r.top1),
            final_top5: s.rows.last().map(|r| r.top5),
            saturation,
        })
    }
}

pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    ensure_parent(path)?;
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Stage;

    fn row(epoch: usize) -> MetricsRow {
        MetricsRow {
            stage: Stage::Arch,
            epoch,
            total_loss: 1.5,
            ce_loss: 1.25,
            penalty: 0.25,
            top1: 50.0,
            top5: 90.0,
            delta: 100.0,
            fraction_binarized: 0.5,
            fraction_active: 0.75,
            flops: 123,
            params: 45,
        }
    }

    #[test]
    fn csv_layout() {
        let text = to_csv(&[row(0)]);
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(
            lines.next(),
            Some("arch,0,1.5,1.25,0.25,50,90,100,0.5,0.75,123,45")
        );
        assert_eq!(CSV_HEADER.split(',').count(), 12);
    }

    #[test]
    fn append_writes_header_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/m.csv");
        append_csv(&p, &[row(0)]).unwrap();
        append_csv(&p, &[row(1)]).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), to_csv(&[row(0), row(1)]));
    }
}
