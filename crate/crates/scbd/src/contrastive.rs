//! The SCBD objective and its pieces.
//!
//! All three loss terms are defined through one quantity: the matching
//! probability matrix. For a minibatch of unit-norm embeddings `z` (rows),
//! `q = log_softmax(z zᵀ / τ)` row-wise, i.e. `q[i][j]` is the log-probability
//! that anchor `i` "matches" row `j` under a softmax over the batch.
//!
//! * `supcon_loss` pulls same-label rows together: the mean over anchors of
//!   `-(1/|P(i)|) Σ_{j∈P(i)} q[i][j]`, where `P(i)` are the other rows sharing
//!   anchor `i`'s label. Anchors with no positive contribute zero but stay in
//!   the mean's denominator.
//! * `invariance_loss` makes same-environment and other-environment rows
//!   equally matchable: with `lp_i = (1/N) Σ_{same env} q[i][j]` and
//!   `ln_i = (1/N) Σ_{other env} q[i][j]` (self excluded, `N` the batch size),
//!   the loss is `mean_i |lp_i - ln_i|`.
//! * `recon_loss` is mean squared error, the log-likelihood of a unit-variance
//!   Gaussian decoder up to an additive constant.
//!
//! `diag_mode` picks the convention for an anchor matching itself:
//! [`DiagMode::MaskDiagonal`] pins the diagonal logit to -1e9 so self-matches
//! carry no probability mass, while [`DiagMode::AppendixVerbatim`] leaves the
//! diagonal inside the softmax normalisation, matching the reference
//! implementation this crate reproduces. Loss values differ by a constant
//! offset between the two; gradients of `supcon_loss` are very close.
//!
//! [`scbd_objective`] combines the terms:
//! `L = supcon(z_c, y) + supcon(z_s, key) + α·invariance(z_c, e) [+ recon]`,
//! where `key` is `e` or the joint `(y, e)` and the reconstruction input
//! embeddings are wrapped in `stop_gradient` so only decoder parameters feel
//! that term.

use crate::ndcore::{Array, NdError, NodeId, Tape};
use crate::LabeledBatch;

/// Logit assigned to the diagonal under [`DiagMode::MaskDiagonal`].
pub const DIAG_MASK_LOGIT: f32 = -1e9;

/// Tolerance for the unit-norm precondition on embedding rows.
pub const UNIT_NORM_TOL: f32 = 1e-3;

/// Errors from loss construction.
#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("{op}: needs at least 2 rows, got {n}")]
    BatchTooSmall { op: &'static str, n: usize },
    #[error("{op}: {labels} labels for {rows} embedding rows")]
    LabelLengthMismatch {
        op: &'static str,
        labels: usize,
        rows: usize,
    },
    #[error("match_log_probs: row {row} has norm {norm}, expected unit (tolerance {UNIT_NORM_TOL})")]
    NotUnitNorm { row: usize, norm: f32 },
    #[error("invariance_loss: needs at least 2 distinct environments, got {got}")]
    SingleEnvironment { got: usize },
    #[error("{op}: temperature must be positive and finite, got {tau}")]
    BadTemperature { op: &'static str, tau: f32 },
    #[error("scbd_objective: alpha must be finite and >= 0, got {alpha}")]
    BadAlpha { alpha: f32 },
}

/// How the self-match logit is treated inside the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagMode {
    /// Diagonal logit forced to -1e9; normalisation runs over the other rows.
    MaskDiagonal,
    /// Diagonal left in place, so the denominator includes the self-match.
    AppendixVerbatim,
}

impl DiagMode {
    /// Config-file spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            DiagMode::MaskDiagonal => "mask_diagonal",
            DiagMode::AppendixVerbatim => "appendix_verbatim",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "mask_diagonal" => Some(DiagMode::MaskDiagonal),
            "appendix_verbatim" => Some(DiagMode::AppendixVerbatim),
            _ => None,
        }
    }
}

/// Which labels supervise the style block `z_s`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZsKey {
    /// Environment label alone.
    Environment,
    /// Joint `(y, e)` pair, so style clusters stay label-pure.
    LabelEnvironmentPair,
}

impl ZsKey {
    /// Config-file spelling.
    pub fn as_str(self) -> &'static str {
        match self {
            ZsKey::Environment => "e",
            ZsKey::LabelEnvironmentPair => "(y,e)",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        match s {
            "e" => Some(ZsKey::Environment),
            "(y,e)" | "y,e" | "ye" => Some(ZsKey::LabelEnvironmentPair),
            _ => None,
        }
    }
}

/// Weights and switches for [`scbd_objective`].
#[derive(Debug, Clone)]
pub struct ObjectiveConfig {
    /// Softmax temperature τ.
    pub tau: f32,
    /// Invariance weight α; zero disables the term.
    pub alpha: f32,
    /// Supervision key for the style block.
    pub zs_key: ZsKey,
    /// Whether the reconstruction term is active.
    pub recon: bool,
    /// Self-match convention.
    pub diag_mode: DiagMode,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            alpha: 0.0,
            zs_key: ZsKey::Environment,
            recon: false,
            diag_mode: DiagMode::MaskDiagonal,
        }
    }
}

/// Positive/negative pair masks for a label vector (diagonal excluded).
#[derive(Debug, Clone)]
pub struct PairMasks {
    pub n: usize,
    /// `positive[i*n + j]`: `i != j` and labels equal.
    pub positive: Vec<bool>,
    /// `negative[i*n + j]`: labels differ (never on the diagonal).
    pub negative: Vec<bool>,
}

/// Builds the pair masks for `labels`.
pub fn pair_masks(labels: &[i32]) -> PairMasks {
    let n = labels.len();
    let mut positive = vec![false; n * n];
    let mut negative = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            if labels[i] == labels[j] {
                positive[i * n + j] = true;
            } else {
                negative[i * n + j] = true;
            }
        }
    }
    PairMasks {
        n,
        positive,
        negative,
    }
}

/// Collapses `(y, e)` pairs to compact injective labels (first-seen order).
pub fn pair_key(y: &[i32], e: &[i32]) -> Vec<i32> {
    debug_assert_eq!(y.len(), e.len());
    let mut ids = std::collections::BTreeMap::new();
    let mut out = Vec::with_capacity(y.len());
    for (&yi, &ei) in y.iter().zip(e) {
        let next = ids.len() as i32;
        out.push(*ids.entry((yi, ei)).or_insert(next));
    }
    out
}

fn validate_embeddings(
    tape: &Tape,
    z: NodeId,
    tau: f32,
    op: &'static str,
) -> Result<(usize, usize), LossError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(LossError::BadTemperature { op, tau });
    }
    let value = tape.value(z);
    if value.shape().len() != 2 {
        return Err(LossError::Nd(NdError::InvalidShape {
            op,
            shape: value.shape().to_vec(),
            reason: "embeddings must be a 2-d matrix".into(),
        }));
    }
    let (n, d) = (value.dim(0), value.dim(1));
    if n < 2 {
        return Err(LossError::BatchTooSmall { op, n });
    }
    let data = value.data();
    for r in 0..n {
        let mut q = 0.0f64;
        for &v in &data[r * d..(r + 1) * d] {
            q += v as f64 * v as f64;
        }
        let norm = q.sqrt() as f32;
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(LossError::NotUnitNorm { row: r, norm });
        }
    }
    Ok((n, d))
}

/// Records the matching log-probability matrix `q` for embeddings `z`.
///
/// Rows of `z` must be unit norm. `q[i][j] = log softmax_j(z_i · z_j / τ)`
/// with the diagonal handled per `diag_mode`.
pub fn match_log_probs_node(
    tape: &mut Tape,
    z: NodeId,
    tau: f32,
    diag_mode: DiagMode,
) -> Result<NodeId, LossError> {
    let (n, _) = validate_embeddings(tape, z, tau, "match_log_probs")?;
    let zt = tape.transpose2d(z)?;
    let sims = tape.matmul(z, zt)?;
    let logits = tape.mul_scalar(sims, 1.0 / tau)?;
    let logits = match diag_mode {
        DiagMode::AppendixVerbatim => logits,
        DiagMode::MaskDiagonal => {
            let mut mask = Array::zeros(&[n, n]);
            for i in 0..n {
                mask.data_mut()[i * n + i] = DIAG_MASK_LOGIT;
            }
            let mask = tape.leaf(mask);
            tape.add(logits, mask)?
        }
    };
    Ok(tape.row_log_softmax(logits)?)
}

/// Value-level [`match_log_probs_node`]: returns the `n×n` matrix `q`.
pub fn match_log_probs(z: &Array, tau: f32, diag_mode: DiagMode) -> Result<Array, LossError> {
    let mut tape = Tape::new();
    let zn = tape.leaf(z.clone());
    let q = match_log_probs_node(&mut tape, zn, tau, diag_mode)?;
    Ok(tape.value(q).clone())
}

/// Records the supervised contrastive loss of `z` under `labels`.
pub fn supcon_loss_node(
    tape: &mut Tape,
    z: NodeId,
    labels: &[i32],
    tau: f32,
    diag_mode: DiagMode,
) -> Result<NodeId, LossError> {
    let n = tape.value(z).shape().first().copied().unwrap_or(0);
    if labels.len() != n {
        return Err(LossError::LabelLengthMismatch {
            op: "supcon_loss",
            labels: labels.len(),
            rows: n,
        });
    }
    let q = match_log_probs_node(tape, z, tau, diag_mode)?;
    let masks = pair_masks(labels);
    // One constant weight matrix folds the positive average and the mean over
    // anchors: loss = sum(W ⊙ q) with W[i][j] = -1/(N·max(|P(i)|,1)) on positives.
    let mut weights = Array::zeros(&[n, n]);
    for i in 0..n {
        let p_count = masks.positive[i * n..(i + 1) * n]
            .iter()
            .filter(|&&b| b)
            .count();
        let w = -1.0 / (n as f64 * p_count.max(1) as f64);
        for j in 0..n {
            if masks.positive[i * n + j] {
                weights.data_mut()[i * n + j] = w as f32;
            }
        }
    }
    let w = tape.leaf(weights);
    let weighted = tape.mul(q, w)?;
    Ok(tape.sum(weighted)?)
}

/// Value-level [`supcon_loss_node`].
pub fn supcon_loss(
    z: &Array,
    labels: &[i32],
    tau: f32,
    diag_mode: DiagMode,
) -> Result<f32, LossError> {
    let mut tape = Tape::new();
    let zn = tape.leaf(z.clone());
    let loss = supcon_loss_node(&mut tape, zn, labels, tau, diag_mode)?;
    Ok(tape.value(loss).scalar_value())
}

/// Records the environment-invariance penalty on `z`.
pub fn invariance_loss_node(
    tape: &mut Tape,
    z: NodeId,
    e: &[i32],
    tau: f32,
    diag_mode: DiagMode,
) -> Result<NodeId, LossError> {
    let n = tape.value(z).shape().first().copied().unwrap_or(0);
    if e.len() != n {
        return Err(LossError::LabelLengthMismatch {
            op: "invariance_loss",
            labels: e.len(),
            rows: n,
        });
    }
    let distinct = {
        let mut envs: Vec<i32> = e.to_vec();
        envs.sort_unstable();
        envs.dedup();
        envs.len()
    };
    if distinct < 2 {
        return Err(LossError::SingleEnvironment { got: distinct });
    }
    let q = match_log_probs_node(tape, z, tau, diag_mode)?;
    let masks = pair_masks(e);
    // Signed weights: +1/N on same-env pairs, -1/N on other-env pairs; a row
    // sum then yields lp_i - ln_i directly.
    let mut weights = Array::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            if masks.positive[i * n + j] {
                weights.data_mut()[i * n + j] = 1.0 / n as f32;
            } else if masks.negative[i * n + j] {
                weights.data_mut()[i * n + j] = -1.0 / n as f32;
            }
        }
    }
    let w = tape.leaf(weights);
    let signed = tape.mul(q, w)?;
    let row_gap = tape.sum_axis(signed, 1)?;
    let gap2 = tape.reshape(row_gap, &[n, 1])?;
    let abs_gap = tape.abs(gap2)?;
    Ok(tape.mean(abs_gap)?)
}

/// Value-level [`invariance_loss_node`].
pub fn invariance_loss(
    z: &Array,
    e: &[i32],
    tau: f32,
    diag_mode: DiagMode,
) -> Result<f32, LossError> {
    let mut tape = Tape::new();
    let zn = tape.leaf(z.clone());
    let loss = invariance_loss_node(&mut tape, zn, e, tau, diag_mode)?;
    Ok(tape.value(loss).scalar_value())
}

/// Records mean squared error between `x` and `x_hat`.
pub fn recon_loss_node(tape: &mut Tape, x: NodeId, x_hat: NodeId) -> Result<NodeId, LossError> {
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq)?)
}

/// Value-level [`recon_loss_node`].
pub fn recon_loss(x: &Array, x_hat: &Array) -> Result<f32, LossError> {
    let mut tape = Tape::new();
    let a = tape.leaf(x.clone());
    let b = tape.leaf(x_hat.clone());
    let loss = recon_loss_node(&mut tape, a, b)?;
    Ok(tape.value(loss).scalar_value())
}

/// Embedding nodes feeding the objective.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingNodes {
    pub z_c: NodeId,
    /// Absent in single-block mode; drops the style term.
    pub z_s: Option<NodeId>,
}

/// The objective's loss nodes; optional terms are `None` when disabled.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub total: NodeId,
    pub supcon_zc_y: NodeId,
    pub supcon_zs: Option<NodeId>,
    pub invariance: Option<NodeId>,
    pub recon: Option<NodeId>,
}

/// Loss values extracted from [`ObjectiveNodes`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValues {
    pub total: f32,
    pub supcon_zc_y: f32,
    pub supcon_zs: Option<f32>,
    pub invariance: Option<f32>,
    pub recon: Option<f32>,
}

impl ObjectiveNodes {
    /// Reads the scalar values off the tape.
    pub fn values(&self, tape: &Tape) -> ObjectiveValues {
        let take = |id: NodeId| tape.value(id).scalar_value();
        ObjectiveValues {
            total: take(self.total),
            supcon_zc_y: take(self.supcon_zc_y),
            supcon_zs: self.supcon_zs.map(take),
            invariance: self.invariance.map(take),
            recon: self.recon.map(take),
        }
    }
}

/// Records the full SCBD objective for one minibatch.
///
/// `decode` is only invoked when `cfg.recon` is set; it receives
/// `stop_gradient`-wrapped embedding nodes and must return `x_hat` with the
/// shape of `batch.x`, so reconstruction trains the decoder alone.
pub fn scbd_objective<D>(
    tape: &mut Tape,
    batch: &LabeledBatch,
    emb: &EmbeddingNodes,
    decode: D,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveNodes, LossError>
where
    D: FnOnce(&mut Tape, NodeId, Option<NodeId>) -> Result<NodeId, LossError>,
{
    if !(cfg.alpha.is_finite() && cfg.alpha >= 0.0) {
        return Err(LossError::BadAlpha { alpha: cfg.alpha });
    }
    let rows = tape.value(emb.z_c).shape().first().copied().unwrap_or(0);
    if batch.len() != rows {
        return Err(LossError::LabelLengthMismatch {
            op: "scbd_objective",
            labels: batch.len(),
            rows,
        });
    }

    let supcon_zc_y = supcon_loss_node(tape, emb.z_c, &batch.y, cfg.tau, cfg.diag_mode)?;
    let mut total = supcon_zc_y;

    let supcon_zs = match emb.z_s {
        None => None,
        Some(z_s) => {
            let labels = match cfg.zs_key {
                ZsKey::Environment => batch.e.clone(),
                ZsKey::LabelEnvironmentPair => pair_key(&batch.y, &batch.e),
            };
            let term = supcon_loss_node(tape, z_s, &labels, cfg.tau, cfg.diag_mode)?;
            total = tape.add(total, term)?;
            Some(term)
        }
    };

    let invariance = if cfg.alpha > 0.0 {
        let term = invariance_loss_node(tape, emb.z_c, &batch.e, cfg.tau, cfg.diag_mode)?;
        let weighted = tape.mul_scalar(term, cfg.alpha)?;
        total = tape.add(total, weighted)?;
        Some(term)
    } else {
        None
    };

    let recon = if cfg.recon {
        let x = tape.leaf(batch.x.clone());
        let zc_sg = tape.stop_gradient(emb.z_c);
        let zs_sg = emb.z_s.map(|z| tape.stop_gradient(z));
        let x_hat = decode(tape, zc_sg, zs_sg)?;
        let term = recon_loss_node(tape, x, x_hat)?;
        total = tape.add(total, term)?;
        Some(term)
    } else {
        None
    };

    Ok(ObjectiveNodes {
        total,
        supcon_zc_y,
        supcon_zs,
        invariance,
        recon,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// n copies of the same unit vector.
    fn identical_rows(n: usize, d: usize) -> Array {
        let mut data = vec![0.0f32; n * d];
        for r in 0..n {
            data[r * d] = 1.0;
        }
        Array::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn identical_rows_mask_diagonal_gives_log_n_minus_1() {
        let z = identical_rows(4, 8);
        let loss = supcon_loss(&z, &[0, 0, 1, 1], 0.1, DiagMode::MaskDiagonal).unwrap();
        let expect = (3.0f64).ln() as f32;
        assert!((loss - expect).abs() < 1e-5, "{loss} vs {expect}");
    }

    #[test]
    fn identical_rows_verbatim_gives_log_n() {
        let z = identical_rows(4, 8);
        let loss = supcon_loss(&z, &[0, 0, 1, 1], 0.1, DiagMode::AppendixVerbatim).unwrap();
        let expect = (4.0f64).ln() as f32;
        assert!((loss - expect).abs() < 1e-5, "{loss} vs {expect}");
    }

    #[test]
    fn all_distinct_labels_cost_nothing() {
        let z = identical_rows(4, 8);
        let loss = supcon_loss(&z, &[0, 1, 2, 3], 0.1, DiagMode::MaskDiagonal).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn balanced_identical_invariance_is_quarter_log_3() {
        let z = identical_rows(4, 8);
        let loss = invariance_loss(&z, &[0, 0, 1, 1], 0.1, DiagMode::MaskDiagonal).unwrap();
        let expect = ((3.0f64).ln() / 4.0) as f32;
        assert!((loss - expect).abs() < 1e-5, "{loss} vs {expect}");
    }

    #[test]
    fn single_environment_is_an_error() {
        let z = identical_rows(4, 8);
        let err = invariance_loss(&z, &[2, 2, 2, 2], 0.1, DiagMode::MaskDiagonal).unwrap_err();
        assert!(matches!(err, LossError::SingleEnvironment { got: 1 }));
    }

    #[test]
    fn non_unit_rows_are_rejected_with_row_index() {
        let mut z = identical_rows(3, 4);
        z.data_mut()[4] = 2.0; // row 1 now has norm sqrt(5)
        let err = supcon_loss(&z, &[0, 0, 1], 0.1, DiagMode::MaskDiagonal).unwrap_err();
        match err {
            LossError::NotUnitNorm { row, .. } => assert_eq!(row, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn match_log_probs_rows_normalise() {
        let z = Array::new(
            vec![3, 2],
            vec![1.0, 0.0, 0.6, 0.8, 0.0, 1.0],
        )
        .unwrap();
        for diag in [DiagMode::MaskDiagonal, DiagMode::AppendixVerbatim] {
            let q = match_log_probs(&z, 0.1, diag).unwrap();
            for r in 0..3 {
                let s: f64 = q.data()[r * 3..(r + 1) * 3]
                    .iter()
                    .map(|&v| (v as f64).exp())
                    .sum();
                assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn pair_key_is_injective_on_pairs() {
        let y = [0, 0, 1, 1, 0];
        let e = [0, 1, 0, 1, 0];
        let k = pair_key(&y, &e);
        assert_eq!(k[0], k[4]);
        let mut uniq = k.clone();
        uniq.sort_unstable();
        uniq.dedup();
        assert_eq!(uniq.len(), 4);
    }

    #[test]
    fn recon_term_trains_only_the_decoder() {
        // z_c feeds both supcon and (through stop_gradient) a linear decoder;
        // the embedding gradient must be identical with recon on and off,
        // while the decoder weight only gets a gradient from recon.
        let z = identical_rows(4, 3);
        let x = Array::new(vec![4, 2], (0..8).map(|v| v as f32 * 0.1).collect()).unwrap();
        let dec_w = Array::new(vec![3, 2], vec![0.1; 6]).unwrap();
        let batch = crate::LabeledBatch {
            x: x.clone(),
            y: vec![0, 0, 1, 1],
            e: vec![0, 1, 0, 1],
        };
        let run = |recon: bool| {
            let mut tape = Tape::new();
            let zc = tape.leaf(z.clone().with_grad());
            let w = tape.leaf(dec_w.clone().with_grad());
            let cfg = ObjectiveConfig {
                recon,
                ..ObjectiveConfig::default()
            };
            let obj = scbd_objective(
                &mut tape,
                &batch,
                &EmbeddingNodes { z_c: zc, z_s: None },
                |t, zc_sg, _| Ok(t.matmul(zc_sg, w)?),
                &cfg,
            )
            .unwrap();
            let grads = tape.backward(obj.total).unwrap();
            (
                grads.get(zc).unwrap().data().to_vec(),
                grads.get(w).unwrap().data().to_vec(),
            )
        };
        let (gz_off, gw_off) = run(false);
        let (gz_on, gw_on) = run(true);
        assert_eq!(gz_off, gz_on);
        assert!(gw_off.iter().all(|&v| v == 0.0));
        assert!(gw_on.iter().any(|&v| v != 0.0));
    }
}
