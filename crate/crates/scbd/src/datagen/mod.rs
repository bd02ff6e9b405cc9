//! Procedural datasets and dataset plumbing.
//!
//! Two families are generated here, both with a designed tension between a
//! target label `y` and a nuisance label `e`:
//!
//! * [`cmnist`]: 32×32 RGB digit images whose foreground palette depends on
//!   the training environment and (through it) on the label, so color is an
//!   attractive shortcut that breaks on the held-out split.
//! * [`opssim`]: feature vectors mimicking a pooled perturbation screen —
//!   genes grouped into complexes with shared effect directions, guides
//!   jittered around their gene, and well batch effects (shift + per-feature
//!   gain) confounded with guides.
//!
//! [`Dataset`] is the common carrier; [`container`] serialises it; [`idx`]
//! ingests external digit bitmaps as an alternative glyph source.

pub mod cmnist;
pub mod container;
mod font;
pub mod idx;
pub mod opssim;

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::ndcore::{Array, NdError};
use crate::util::rng::substream;
use crate::LabeledBatch;

pub use opssim::ComplexGraph;

/// Errors from generation, sampling and dataset IO.
#[derive(Debug, thiserror::Error)]
pub enum DataError {
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
    #[error("{path}: unsupported format version {got}")]
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
    #[error("class {class} has {available} examples, need {needed}")]
    InsufficientClass {
        class: i32,
        available: usize,
        needed: usize,
    },
    #[error("dataset is missing {0} labels")]
    MissingLabels(&'static str),
    #[error(transparent)]
    Nd(#[from] NdError),
}

/// Which generator produced a dataset (drives container tagging and model
/// input kinds).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Colored digit images, features `[3, 32, 32]`.
    ColoredDigits,
    /// Screen simulator vectors.
    Screen,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::ColoredDigits => "cmnist",
            DatasetKind::Screen => "ops-sim",
        }
    }
}

/// Extra per-example labels carried by screen datasets.
#[derive(Debug, Clone, PartialEq)]
pub struct ScreenLabels {
    pub gene: Vec<i32>,
    pub guide: Vec<i32>,
    pub well: Vec<i32>,
}

/// An in-memory dataset: flat features plus aligned label columns.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// Per-example feature shape (`[3, 32, 32]` or `[dim]`).
    pub feature_shape: Vec<usize>,
    /// `n × prod(feature_shape)`, row-major.
    pub features: Vec<f32>,
    /// Target label per example.
    pub y: Vec<i32>,
    /// Environment / batch label per example.
    pub e: Vec<i32>,
    /// Screen datasets carry gene/guide/well columns.
    pub screen: Option<ScreenLabels>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Elements per example.
    pub fn feature_len(&self) -> usize {
        self.feature_shape.iter().product()
    }

    /// The feature row of example `i`.
    pub fn features_of(&self, i: usize) -> &[f32] {
        let f = self.feature_len();
        &self.features[i * f..(i + 1) * f]
    }

    /// Checks the column lengths agree; used after deserialisation.
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.y.len();
        let f = self.feature_len();
        if self.features.len() != n * f || self.e.len() != n {
            return Err(DataError::BadConfig(format!(
                "inconsistent dataset: {} feature values for {} examples of {} elements",
                self.features.len(),
                n,
                f
            )));
        }
        if let Some(s) = &self.screen {
            if s.gene.len() != n || s.guide.len() != n || s.well.len() != n {
                return Err(DataError::BadConfig(
                    "screen label columns do not match example count".into(),
                ));
            }
        }
        Ok(())
    }

    /// Gathers `indices` into a training batch (features copied).
    pub fn batch(&self, indices: &[usize]) -> Result<LabeledBatch, DataError> {
        let f = self.feature_len();
        let mut x = Vec::with_capacity(indices.len() * f);
        let mut y = Vec::with_capacity(indices.len());
        let mut e = Vec::with_capacity(indices.len());
        for &i in indices {
            x.extend_from_slice(self.features_of(i));
            y.push(self.y[i]);
            e.push(self.e[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.feature_shape);
        Ok(LabeledBatch {
            x: Array::new(shape, x)?,
            y,
            e,
        })
    }

    /// A new dataset holding the given examples (labels re-gathered too).
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let f = self.feature_len();
        let mut features = Vec::with_capacity(indices.len() * f);
        for &i in indices {
            features.extend_from_slice(self.features_of(i));
        }
        Dataset {
            kind: self.kind,
            feature_shape: self.feature_shape.clone(),
            features,
            y: indices.iter().map(|&i| self.y[i]).collect(),
            e: indices.iter().map(|&i| self.e[i]).collect(),
            screen: self.screen.as_ref().map(|s| ScreenLabels {
                gene: indices.iter().map(|&i| s.gene[i]).collect(),
                guide: indices.iter().map(|&i| s.guide[i]).collect(),
                well: indices.iter().map(|&i| s.well[i]).collect(),
            }),
        }
    }

    /// Distinct values of `y`, ascending.
    pub fn classes(&self) -> Vec<i32> {
        let mut c = self.y.clone();
        c.sort_unstable();
        c.dedup();
        c
    }
}

/// Label-balanced minibatch sampling: draw `k` distinct classes, then `m`
/// distinct examples of each, giving `k·m` indices.
pub fn balanced_batch<R: Rng>(
    y: &[i32],
    k: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<usize>, DataError> {
    let mut by_class: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for (i, &label) in y.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let classes: Vec<i32> = by_class.keys().copied().collect();
    if classes.len() < k {
        return Err(DataError::BadConfig(format!(
            "balanced batch wants {k} distinct classes, dataset has {}",
            classes.len()
        )));
    }
    let chosen: Vec<i32> = classes
        .choose_multiple(rng, k)
        .copied()
        .collect();
    let mut out = Vec::with_capacity(k * m);
    for class in chosen {
        let pool = &by_class[&class];
        if pool.len() < m {
            return Err(DataError::InsufficientClass {
                class,
                available: pool.len(),
                needed: m,
            });
        }
        out.extend(pool.choose_multiple(rng, m).copied());
    }
    Ok(out)
}

/// Concatenates datasets in order. All parts must agree on kind, feature
/// shape, and the presence of screen columns.
pub fn concat(parts: &[Dataset]) -> Result<Dataset, DataError> {
    let first = parts
        .first()
        .ok_or_else(|| DataError::BadConfig("concat needs at least one dataset".into()))?;
    let mut out = first.clone();
    for part in &parts[1..] {
        if part.kind != first.kind || part.feature_shape != first.feature_shape {
            return Err(DataError::BadConfig(format!(
                "concat parts disagree: {:?} {:?} vs {:?} {:?}",
                first.kind, first.feature_shape, part.kind, part.feature_shape
            )));
        }
        if part.screen.is_some() != first.screen.is_some() {
            return Err(DataError::BadConfig(
                "concat parts disagree on screen columns".into(),
            ));
        }
        out.features.extend_from_slice(&part.features);
        out.y.extend_from_slice(&part.y);
        out.e.extend_from_slice(&part.e);
        if let (Some(acc), Some(s)) = (&mut out.screen, &part.screen) {
            acc.gene.extend_from_slice(&s.gene);
            acc.guide.extend_from_slice(&s.guide);
            acc.well.extend_from_slice(&s.well);
        }
    }
    Ok(out)
}

/// Splits off a stratified fraction (per class of `y`) as a second dataset.
/// Returns `(rest, held_out)`; the held-out share of each class is
/// `floor(count · frac)`.
pub fn stratified_split(ds: &Dataset, frac: f64, seed: u64) -> (Dataset, Dataset) {
    let mut by_class: std::collections::BTreeMap<i32, Vec<usize>> = Default::default();
    for (i, &label) in ds.y.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut held = Vec::new();
    let mut rest = Vec::new();
    for (class, indices) in by_class {
        let take = (indices.len() as f64 * frac).floor() as usize;
        let mut rng = substream(seed, "stratified-split", class as u64);
        let chosen: std::collections::BTreeSet<usize> = rand::seq::index::sample(
            &mut rng,
            indices.len(),
            take.min(indices.len()),
        )
        .into_iter()
        .collect();
        for (pos, idx) in indices.into_iter().enumerate() {
            if chosen.contains(&pos) {
                held.push(idx);
            } else {
                rest.push(idx);
            }
        }
    }
    rest.sort_unstable();
    held.sort_unstable();
    (ds.subset(&rest), ds.subset(&held))
}
