//! Grid protocols: the α-sweep and the ERM hyperparameter scan.

use crate::datagen::Dataset;
use crate::engine::{erm_accuracy, train_erm, train_scbd, BatchSpec, TrainConfig};
use crate::nets::{ArchConfig, ErmArchConfig};

use super::probe::ProbeConfig;
use super::stats::{mean_sd, pearson};
use super::{embed_dataset, EvalError};

/// One trained (α, seed) cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub alpha: f32,
    pub seed: u64,
    /// Probe accuracy on the in-distribution validation split.
    pub val_accuracy: f64,
    /// Probe accuracy on the out-of-distribution test split.
    pub test_accuracy: f64,
}

/// All (α, seed) cells of a sweep, in grid order.
#[derive(Debug, Clone, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,seed,val_accuracy,test_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.alpha, r.seed, r.val_accuracy, r.test_accuracy
            ));
        }
        out
    }

    /// Per-α aggregate: (α, val mean, val sd, test mean, test sd), in first
    /// appearance order.
    pub fn summary(&self) -> Vec<(f32, f64, f64, f64, f64)> {
        let mut alphas: Vec<f32> = Vec::new();
        for r in &self.rows {
            if !alphas.contains(&r.alpha) {
                alphas.push(r.alpha);
            }
        }
        alphas
            .into_iter()
            .map(|alpha| {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.alpha == alpha)
                    .map(|r| r.val_accuracy)
                    .collect();
                let tests: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.alpha == alpha)
                    .map(|r| r.test_accuracy)
                    .collect();
                let (vm, vs) = mean_sd(&vals);
                let (tm, ts) = mean_sd(&tests);
                (alpha, vm, vs, tm, ts)
            })
            .collect()
    }
}

/// Trains one SCBD model per (α, seed), probes the content representation
/// `r_c`, and tabulates in-distribution validation accuracy against
/// out-of-distribution test accuracy. The table is a pure function of the
/// datasets, the grid, and the seeds.
pub fn sweep_alpha(
    alphas: &[f32],
    seeds: &[u64],
    arch: &ArchConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    base: &TrainConfig,
    probe: &ProbeConfig,
) -> Result<SweepTable, EvalError> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(EvalError::BadInput(
            "the α grid and seed list must be non-empty".into(),
        ));
    }
    let mut table = SweepTable::default();
    for &alpha in alphas {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.objective.alpha = alpha;
            cfg.seed = seed;
            let out = train_scbd(arch, train, val, &cfg, None)?;
            let params = &out.best.params;
            let emb_train = embed_dataset(params, train)?;
            let emb_val = embed_dataset(params, val)?;
            let emb_test = embed_dataset(params, test)?;
            let head = super::LogReg::fit(&emb_train.r_c, emb_train.d_r, &train.y, probe)?;
            table.rows.push(SweepRow {
                alpha,
                seed,
                val_accuracy: head.accuracy(&emb_val.r_c, &val.y),
                test_accuracy: head.accuracy(&emb_test.r_c, &test.y),
            });
        }
    }
    Ok(table)
}

/// The ERM hyperparameter grid: every (lr, weight decay, epochs) cell.
#[derive(Debug, Clone)]
pub struct ErmGrid {
    pub lrs: Vec<f64>,
    pub weight_decays: Vec<f64>,
    pub epochs: Vec<u64>,
    pub batch_size: usize,
}

impl Default for ErmGrid {
    fn default() -> Self {
        ErmGrid {
            lrs: vec![1e-4, 1e-3, 1e-2],
            weight_decays: vec![0.0, 1e-3, 1e-2],
            epochs: vec![1, 20, 100],
            batch_size: 32,
        }
    }
}

/// One trained grid cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErmScanRow {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub seed: u64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

/// ERM scan results plus the headline correlation.
#[derive(Debug, Clone, Default)]
pub struct ErmScanTable {
    pub rows: Vec<ErmScanRow>,
}

impl ErmScanTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("lr,weight_decay,epochs,seed,val_accuracy,test_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.lr, r.weight_decay, r.epochs, r.seed, r.val_accuracy, r.test_accuracy
            ));
        }
        out
    }

    /// Pearson correlation of (val, test) accuracy across cells; `None`
    /// when the grid is degenerate (fewer than two points or zero variance).
    pub fn correlation(&self) -> Option<f64> {
        let val: Vec<f64> = self.rows.iter().map(|r| r.val_accuracy).collect();
        let test: Vec<f64> = self.rows.iter().map(|r| r.test_accuracy).collect();
        pearson(&val, &test)
    }
}

/// Trains the ERM baseline at every grid cell and records validation-best
/// accuracy against the matching test accuracy. Epochs are converted to
/// steps with the drop-last convention, so one epoch is `n / batch` steps.
pub fn erm_scan(
    grid: &ErmGrid,
    seeds: &[u64],
    arch: &ErmArchConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<ErmScanTable, EvalError> {
    if grid.lrs.is_empty() || grid.weight_decays.is_empty() || grid.epochs.is_empty() {
        return Err(EvalError::BadInput("the ERM grid must be non-empty".into()));
    }
    if seeds.is_empty() {
        return Err(EvalError::BadInput("the seed list must be non-empty".into()));
    }
    let steps_per_epoch = (train.len() / grid.batch_size).max(1) as u64;
    let mut table = ErmScanTable::default();
    for &lr in &grid.lrs {
        for &wd in &grid.weight_decays {
            for &epochs in &grid.epochs {
                for &seed in seeds {
                    let cfg = TrainConfig {
                        batch: BatchSpec::Shuffle {
                            batch_size: grid.batch_size,
                        },
                        max_steps: epochs * steps_per_epoch,
                        eval_every: steps_per_epoch,
                        lr,
                        weight_decay: wd,
                        seed,
                        ..TrainConfig::default()
                    };
                    let out = train_erm(arch, train, val, &cfg)?;
                    table.rows.push(ErmScanRow {
                        lr,
                        weight_decay: wd,
                        epochs,
                        seed,
                        val_accuracy: out.best_val_acc,
                        test_accuracy: erm_accuracy(&out.best.params, test)?,
                    });
                }
            }
        }
    }
    Ok(table)
}
