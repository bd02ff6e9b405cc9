//! Supervised contrastive block disentanglement (SCBD).
//!
//! The library splits an encoder's representation into two blocks: a content
//! block `z_c` that is pushed to carry the target label `y` while being made
//! invariant to a nuisance variable `e` (environment, experimental batch), and
//! a style block `z_s` that is pushed to absorb that nuisance. The pressure in
//! both directions comes from supervised contrastive matching probabilities
//! over an embedding minibatch, plus an invariance penalty weighted by `alpha`
//! and an optional reconstruction term whose gradients only reach the decoder.
//!
//! Everything is self contained: [`ndcore`] is a small reverse-mode autodiff
//! engine over dense 32-bit arrays, [`contrastive`] implements the objective,
//! [`nets`] the encoders/projections/decoder, [`datagen`] two procedural
//! dataset families (colored digits with environment-dependent palettes, and a
//! pooled-screen simulator with well batch effects), [`engine`] AdamW training
//! with deterministic checkpointing, and [`evalsuite`] the evaluation
//! protocols (linear probes, alpha sweeps, model-selection scans, recall of
//! annotated complexes, counterfactual swaps).
//!
//! Determinism is a design requirement throughout: a run is a pure function of
//! its seed and configuration, and all randomness flows through named
//! [`util::rng`] substreams.

pub mod contrastive;
pub mod datagen;
pub mod engine;
pub mod evalsuite;
pub mod ndcore;
pub mod nets;
pub mod util;

use ndcore::Array;

/// A minibatch of examples with the two label columns every objective needs.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    /// Features, shape `[n, ...]` (images `[n, c, h, w]`, vectors `[n, d]`).
    pub x: Array,
    /// Class / target labels, one per row.
    pub y: Vec<i32>,
    /// Environment / batch labels, one per row.
    pub e: Vec<i32>,
}

impl LabeledBatch {
    /// Number of examples in the batch.
    pub fn len(&self) -> usize {
        self.y.len()
    }

    /// True when the batch holds no examples.
    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}
