//! Training log as JSON Lines, one event per line.

use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ImageId;
use crate::error::{Error, Result};
use crate::evaluation::ValidationPoint;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    /// Update number `step` (0-based), taken with learning rate `lr` on a
    /// batch whose loss before the update was `loss`.
    Update { step: u64, lr: f64, loss: f64, images: Vec<ImageId> },
    /// Parameters after `step` updates.
    Checkpoint {
        step: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_auroc: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        val_ap: Option<f64>,
    },
}

pub fn validation_points(log: &[LogEvent]) -> Vec<ValidationPoint> {
    log.iter()
        .filter_map(|e| match *e {
            LogEvent::Checkpoint { step, val_auroc, val_ap } => Some(ValidationPoint { step, auroc: val_auroc, ap: val_ap }),
            LogEvent::Update { .. } => None,
        })
        .collect()
}

pub fn write_log(path: &Path, log: &[LogEvent]) -> Result<()> {
    let mut out = Vec::new();
    for event in log {
        serde_json::to_writer(&mut out, event).expect("log events serialize");
        out.push(b'\n');
    }
    super::checkpoint::write_atomic(path, &out)
}

pub fn read_log(path: &Path) -> Result<Vec<LogEvent>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::format("training log", path, format!("line {}: {e}", n + 1)))?,
        );
    }
    Ok(out)
}
