//! Measurement protocols: linear probes, α-sweeps, ERM hyperparameter
//! scans, gene-embedding aggregation, complex-recovery AUPRC, batch-label
//! probing, and counterfactual swaps, plus the CSV/SVG/PPM report writers.
//!
//! Everything here is deterministic given its seeds, so any table or plot is
//! a pure function of (data seed, train seeds, grid).

mod batchf1;
mod genes;
mod pr;
mod probe;
mod report;
mod stats;
mod swap;
mod sweep;

pub use batchf1::batch_f1;
pub use genes::{aggregate_gene_embeddings, GeneEmbeddingTable};
pub use pr::{corum_style_auprc, PrCurve, PrPoint, Tail};
pub use probe::{probe_accuracy, LogReg, ProbeConfig};
pub use report::{svg_line_plot, svg_scatter, write_ppm, write_text, PlotSeries};
pub use stats::{macro_f1, mean_sd, pearson, percentile, spearman};
pub use swap::{counterfactual_swap, SwapReport};
pub use sweep::{erm_scan, sweep_alpha, ErmGrid, ErmScanRow, ErmScanTable, SweepRow, SweepTable};

use std::path::PathBuf;

use crate::datagen::{DataError, Dataset};
use crate::engine::EngineError;
use crate::ndcore::NdError;
use crate::nets::{encode_with, ModelParams, NetError};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("probe needs at least two classes, found {0}")]
    SingleClass(usize),
    #[error("well {well} has no examples in the training split")]
    MissingWell { well: i32 },
    #[error("control gene {0} is missing from the data")]
    MissingControl(i32),
    #[error("{0}")]
    BadInput(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Per-example embeddings of a whole dataset, encoded in fixed-size chunks
/// so memory stays flat. Only the content block is run.
#[derive(Debug, Clone)]
pub struct Embedded {
    /// `n × d_r` pre-projection representations.
    pub r_c: Vec<f32>,
    /// `n × d_zc` unit-norm projections.
    pub z_c: Vec<f32>,
    pub d_r: usize,
    pub d_zc: usize,
}

/// Encodes every example of `ds` with the content encoder.
pub fn embed_dataset(params: &ModelParams, ds: &Dataset) -> Result<Embedded, EvalError> {
    let arch = params.scbd_arch()?;
    let (d_r, d_zc) = (arch.d_r(), arch.d_zc);
    let mut r_c = Vec::with_capacity(ds.len() * d_r);
    let mut z_c = Vec::with_capacity(ds.len() * d_zc);
    let mut at = 0;
    while at < ds.len() {
        let hi = (at + 256).min(ds.len());
        let indices: Vec<usize> = (at..hi).collect();
        let batch = ds.batch(&indices)?;
        let emb = encode_with(params, &batch.x, true)?;
        r_c.extend_from_slice(emb.r_c.data());
        z_c.extend_from_slice(emb.z_c.data());
        at = hi;
    }
    Ok(Embedded { r_c, z_c, d_r, d_zc })
}
