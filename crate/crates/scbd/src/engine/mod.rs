//! Training: AdamW, the SCBD and ERM loops, validation-based checkpoint
//! selection, and bit-exact resumable checkpoints.
//!
//! Determinism contract: every source of randomness is a named substream of
//! the run seed keyed by step (or epoch) index, parameters live in sorted
//! maps, and kernels are single-threaded — so a fixed seed gives
//! bit-identical parameter trajectories and metric logs, and resuming from a
//! checkpoint at step `s` replays exactly the run that never stopped.

mod adamw;
mod checkpoint;
mod train;

pub use adamw::{AdamW, StepOutcome};
pub use checkpoint::{
    arch_from_kv, arch_to_kv, load_checkpoint, objective_from_kv, objective_to_kv,
    save_checkpoint, Checkpoint, OptimSnapshot, CKPT_MAGIC, CKPT_VERSION,
};
pub use train::{
    erm_accuracy, train_erm, train_scbd, BatchSpec, ErmTrainOutcome, TrainConfig, TrainOutcome,
};

use std::path::PathBuf;

use crate::contrastive::LossError;
use crate::datagen::DataError;
use crate::ndcore::NdError;
use crate::nets::NetError;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic at byte 0: expected {expected}, got {got}")]
    BadMagic {
        path: PathBuf,
        expected: String,
        got: String,
    },
    #[error("{path}: unsupported checkpoint version {got}")]
    Version { path: PathBuf, got: u32 },
    #[error("{path}: truncated at byte {offset}: needed {needed} more bytes, file has {len} total")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
        len: usize,
    },
    #[error("{path}: {reason} (at byte {offset})")]
    Malformed {
        path: PathBuf,
        reason: String,
        offset: usize,
    },
    #[error("config: {0}")]
    BadConfig(String),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

/// A table of metric rows with a fixed header, rendered as CSV. Cells are
/// pre-formatted strings so the rendering (and therefore the on-disk bytes)
/// is a pure function of the values logged.
#[derive(Debug, Clone, Default)]
pub struct MetricsLog {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsLog {
    pub fn new(header: &[&str]) -> Self {
        MetricsLog {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// Canonical cell formatting for metric values: shortest round-trip float
/// form, `""` for absent.
pub(crate) fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout() {
        let mut log = MetricsLog::new(&["step", "loss"]);
        log.push(vec!["0".into(), fmt_cell(Some(0.5))]);
        log.push(vec!["1".into(), fmt_cell(None)]);
        assert_eq!(log.to_csv(), "step,loss\n0,0.5\n1,\n");
    }
}
