//! Append-only JSONL trial records.
//!
//! One JSON object per line. Appends take an exclusive flock and issue a
//! single write, so concurrent writers never interleave lines. Loading
//! tolerates a trailing partial line (a crashed writer) by discarding it
//! with a warning; a malformed line anywhere else is an error.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::os::unix::io::AsRawFd;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::FeatureLayer;

use super::TrialConfig;

/// One validator's value at a checkpoint. Invalid scores keep the flag and
/// a placeholder value of 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScoreEntry {
    pub value: f64,
    pub valid: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub step: u64,
    pub scores: BTreeMap<String, ScoreEntry>,
    pub src_val_acc: f64,
    pub tgt_train_acc: f64,
    pub tgt_val_acc: f64,
    pub src_val_acc_micro: f64,
    pub tgt_train_acc_micro: f64,
    pub tgt_val_acc_micro: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Completed,
    EarlyStopped,
    Failed,
}

/// One hyperparameter trial: flattened identity fields up front (the wire
/// schema), plus the full config for faithful reruns.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: u64,
    pub task: String,
    pub algorithm: String,
    pub feature_layer: FeatureLayer,
    pub hparams: BTreeMap<String, f64>,
    pub checkpoints: Vec<CheckpointEntry>,
    pub status: TrialStatus,
    pub wallclock_s: f64,
    pub config: TrialConfig,
}

/// Append one record under an exclusive file lock.
pub fn append_record(path: &Path, record: &TrialRecord) -> Result<()> {
    let mut line = serde_json::to_string(record)?;
    line.push('\n');
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let fd = file.as_raw_fd();
    let rc = unsafe { libc::flock(fd, libc::LOCK_EX) };
    if rc != 0 {
        return Err(Error::Io(std::io::Error::last_os_error()));
    }
    let mut f = &file;
    let result = f.write_all(line.as_bytes()).and_then(|_| f.flush());
    unsafe { libc::flock(fd, libc::LOCK_UN) };
    result?;
    Ok(())
}

/// Load every record. A parse failure on the final line is treated as a
/// crashed partial write: the line is dropped and reported in the returned
/// warning. A failure on any earlier line is an error naming the line.
pub fn load_records(path: &Path) -> Result<(Vec<TrialRecord>, Option<String>)> {
    let text = std::fs::read_to_string(path)?;
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    let mut warning = None;
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TrialRecord>(line) {
            Ok(r) => out.push(r),
            Err(e) => {
                if i + 1 == lines.len() {
                    let msg = format!(
                        "discarded partial trailing line {} of {}: {e}",
                        i + 1,
                        path.display()
                    );
                    log::warn!("{msg}");
                    warning = Some(msg);
                } else {
                    return Err(Error::MalformedLine { line: i + 1, msg: e.to_string() });
                }
            }
        }
    }
    Ok((out, warning))
}
