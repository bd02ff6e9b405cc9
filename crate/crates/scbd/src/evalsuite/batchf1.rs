//! Batch-label probing: how much well identity leaks into an embedding.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::util::rng::substream;

use super::probe::{LogReg, ProbeConfig};
use super::stats::macro_f1;
use super::EvalError;

/// Trains a logistic-regression probe to predict the well `e` from the
/// embeddings on a random 60% of the rows and reports the macro-averaged F1
/// on the held-out 40%. If the plain split leaves some well without
/// training examples, the split is redrawn stratified by well; a well too
/// small even for that is an error.
pub fn batch_f1(
    x: &[f32],
    dim: usize,
    e: &[i32],
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<f64, EvalError> {
    assert!(dim > 0 && x.len() == e.len() * dim, "embeddings must be n × dim");
    let n = e.len();
    let mut wells: Vec<i32> = e.to_vec();
    wells.sort_unstable();
    wells.dedup();
    if wells.len() < 2 {
        return Err(EvalError::BadInput(format!(
            "batch probing needs at least two wells, found {}",
            wells.len()
        )));
    }
    let train_n = n * 3 / 5;
    if train_n == 0 || train_n == n {
        return Err(EvalError::BadInput(format!(
            "{n} examples cannot be split 60/40"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, "batch-f1-split", 0));
    let (mut train_idx, mut test_idx) = (order[..train_n].to_vec(), order[train_n..].to_vec());

    if let Some(&missing) = wells
        .iter()
        .find(|&&w| !train_idx.iter().any(|&i| e[i] == w))
    {
        // Retry once with a per-well stratified split.
        let _ = missing;
        let mut by_well: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (i, &w) in e.iter().enumerate() {
            by_well.entry(w).or_default().push(i);
        }
        train_idx.clear();
        test_idx.clear();
        for (k, members) in by_well.values_mut().enumerate() {
            members.shuffle(&mut substream(seed, "batch-f1-strat", k as u64));
            let take = members.len() * 3 / 5;
            train_idx.extend_from_slice(&members[..take]);
            test_idx.extend_from_slice(&members[take..]);
        }
        if let Some(&w) = wells
            .iter()
            .find(|&&w| !train_idx.iter().any(|&i| e[i] == w))
        {
            return Err(EvalError::MissingWell { well: w });
        }
    }

    let gather = |idx: &[usize]| -> (Vec<f32>, Vec<i32>) {
        let mut xs = Vec::with_capacity(idx.len() * dim);
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            xs.extend_from_slice(&x[i * dim..(i + 1) * dim]);
            ys.push(e[i]);
        }
        (xs, ys)
    };
    let (train_x, train_y) = gather(&train_idx);
    let (test_x, test_y) = gather(&test_idx);
    let probe = LogReg::fit(&train_x, dim, &train_y, cfg)?;
    let pred = probe.predict(&test_x);
    Ok(macro_f1(&test_y, &pred, &wells))
}
