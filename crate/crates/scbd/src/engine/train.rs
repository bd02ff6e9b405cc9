//! The SCBD and ERM training loops.
//!
//! Both loops draw every batch from a named substream of `(seed, step)`, so
//! a run is a pure function of its config and resuming from a checkpoint at
//! step `s` continues the exact trajectory of the run that never stopped.
//! Wall-clock time is reported on the outcome but never enters the metrics
//! table, which therefore has bit-identical bytes across config-identical
//! runs.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::contrastive::{
    scbd_objective, EmbeddingNodes, LossError, ObjectiveConfig, ObjectiveValues,
};
use crate::datagen::{balanced_batch, Dataset};
use crate::ndcore::{Gradients, NdError, Tape};
use crate::nets::{
    decode_nodes, encode_nodes, erm_logits, erm_logits_nodes, init_params, insert_params,
    ArchConfig, ErmArchConfig, ModelArch, ModelParams, NetError, ParamNodes,
};
use crate::util::rng::substream;
use crate::LabeledBatch;

use super::checkpoint::{arch_to_kv, objective_to_kv, save_checkpoint, Checkpoint, OptimSnapshot};
use super::{fmt_cell, AdamW, EngineError, MetricsLog};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

/// How training batches are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSpec {
    /// `classes` distinct classes with `per_class` distinct examples each.
    Balanced { classes: usize, per_class: usize },
    /// Epoch-shuffled fixed-size batches (last partial batch dropped).
    Shuffle { batch_size: usize },
}

impl BatchSpec {
    /// Rows per batch.
    pub fn batch_size(&self) -> usize {
        match *self {
            BatchSpec::Balanced { classes, per_class } => classes * per_class,
            BatchSpec::Shuffle { batch_size } => batch_size,
        }
    }

    fn render(&self) -> String {
        match *self {
            BatchSpec::Balanced { classes, per_class } => format!("balanced:{classes}x{per_class}"),
            BatchSpec::Shuffle { batch_size } => format!("shuffle:{batch_size}"),
        }
    }
}

impl std::fmt::Display for BatchSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.render())
    }
}

impl std::str::FromStr for BatchSpec {
    type Err = String;

    /// Inverse of [`Display`]: `balanced:KxM` or `shuffle:N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad batch spec {s:?}: expected balanced:KxM or shuffle:N");
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "balanced" => {
                let (k, m) = rest.split_once('x').ok_or_else(bad)?;
                Ok(BatchSpec::Balanced {
                    classes: k.parse().map_err(|_| bad())?,
                    per_class: m.parse().map_err(|_| bad())?,
                })
            }
            "shuffle" => Ok(BatchSpec::Shuffle {
                batch_size: rest.parse().map_err(|_| bad())?,
            }),
            _ => Err(bad()),
        }
    }
}

/// Settings shared by both training loops. `objective`,
/// `val_excludes_invariance` and `paranoid_checks` only apply to the SCBD
/// loop; the ERM loop ignores them.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub batch: BatchSpec,
    pub max_steps: u64,
    /// Validation cadence in steps; the final step always evaluates.
    pub eval_every: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Score validation batches with α forced to zero.
    pub val_excludes_invariance: bool,
    /// Re-derive each step's encoder gradients on a tape without the
    /// reconstruction term and require them to match bit for bit.
    pub paranoid_checks: bool,
    /// Where to write `latest.scbk` / `best.scbk` at eval points.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveConfig::default(),
            batch: BatchSpec::Shuffle { batch_size: 256 },
            max_steps: 3000,
            eval_every: 100,
            lr: 1e-4,
            weight_decay: 0.01,
            seed: 0,
            val_excludes_invariance: false,
            paranoid_checks: false,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    /// Config echo stored inside checkpoints (paths excluded on purpose so
    /// the bytes do not depend on where a run happens to live).
    fn to_kv(&self, map: &mut BTreeMap<String, String>) {
        objective_to_kv(&self.objective, map);
        map.insert("train.batch".into(), self.batch.render());
        map.insert("train.max_steps".into(), self.max_steps.to_string());
        map.insert("train.eval_every".into(), self.eval_every.to_string());
        map.insert("train.lr".into(), format!("{}", self.lr));
        map.insert("train.weight_decay".into(), format!("{}", self.weight_decay));
        map.insert("train.seed".into(), self.seed.to_string());
        map.insert(
            "train.val_excludes_invariance".into(),
            self.val_excludes_invariance.to_string(),
        );
        map.insert(
            "train.paranoid_checks".into(),
            self.paranoid_checks.to_string(),
        );
    }
}

// ---------------------------------------------------------------------------
// Outcomes
// ---------------------------------------------------------------------------

/// Result of an SCBD training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// State at the best validation objective. When no eval in this run
    /// improved on the (possibly resumed) best, this echoes `last`, whose
    /// `best_step`/`best_val` metadata still point at the true winner.
    pub best: Checkpoint,
    /// State after the final completed step.
    pub last: Checkpoint,
    /// Columns: step, supcon_zc_y, supcon_zs, invariance, recon, total,
    /// val_objective. Inactive terms and off-eval validation cells are blank.
    pub metrics: MetricsLog,
    /// Step whose forward pass produced a non-finite value, if any; the run
    /// aborts there and `last` holds the final finite state.
    pub diverged_at: Option<u64>,
    /// Optimizer steps skipped because a gradient was non-finite.
    pub skipped_steps: u64,
    /// Wall-clock duration; kept out of `metrics`.
    pub seconds: f64,
}

/// Result of an ERM training run.
#[derive(Debug, Clone)]
pub struct ErmTrainOutcome {
    /// State at the best validation accuracy (first step on ties).
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub best_val_acc: f64,
    /// Columns: step, ce, val_acc.
    pub metrics: MetricsLog,
    pub diverged_at: Option<u64>,
    pub skipped_steps: u64,
    pub seconds: f64,
}

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

/// A non-finite forward value is divergence (abort), not a config error.
fn is_divergence(err: &EngineError) -> bool {
    matches!(
        err,
        EngineError::Nd(NdError::NonFinite { .. })
            | EngineError::Net(NetError::Nd(NdError::NonFinite { .. }))
            | EngineError::Loss(LossError::Nd(NdError::NonFinite { .. }))
    )
}

fn net_to_loss(err: NetError) -> LossError {
    match err {
        NetError::Nd(e) => LossError::Nd(e),
        other => LossError::Nd(NdError::InvalidShape {
            op: "decode",
            shape: vec![],
            reason: other.to_string(),
        }),
    }
}

/// Indices for the batch of `step`, as a pure function of `(seed, step)`.
fn batch_indices(
    spec: &BatchSpec,
    ds: &Dataset,
    seed: u64,
    step: u64,
) -> Result<Vec<usize>, EngineError> {
    match *spec {
        BatchSpec::Balanced { classes, per_class } => {
            let mut rng = substream(seed, "batch", step);
            Ok(balanced_batch(&ds.y, classes, per_class, &mut rng)?)
        }
        BatchSpec::Shuffle { batch_size } => {
            let n = ds.len();
            let b = batch_size.min(n);
            let per_epoch = (n / b).max(1) as u64;
            let epoch = step / per_epoch;
            let slot = (step % per_epoch) as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut substream(seed, "epoch", epoch));
            Ok(order[slot * b..slot * b + b].to_vec())
        }
    }
}

fn collect_grads(
    nodes: &ParamNodes,
    grads: &Gradients,
    params: &ModelParams,
) -> BTreeMap<String, Vec<f32>> {
    nodes
        .iter()
        .map(|(name, &id)| {
            let g = match grads.get(id) {
                Some(a) => a.data().to_vec(),
                // Parameters not reached by the loss (e.g. the decoder when
                // reconstruction is off) still get a gradient entry.
                None => vec![0.0; params.arrays()[name].len()],
            };
            (name.clone(), g)
        })
        .collect()
}

/// One SCBD forward (and optionally backward) pass on a fresh tape.
fn objective_forward(
    params: &ModelParams,
    arch: &ArchConfig,
    batch: &LabeledBatch,
    obj: &ObjectiveConfig,
    want_grads: bool,
) -> Result<(ObjectiveValues, Option<BTreeMap<String, Vec<f32>>>), EngineError> {
    let mut tape = Tape::new();
    let nodes = insert_params(&mut tape, params, want_grads);
    let x = tape.leaf(batch.x.clone());
    let enc = encode_nodes(&mut tape, &nodes, arch, x, false)?;
    let emb = EmbeddingNodes {
        z_c: enc.z_c,
        z_s: enc.z_s,
    };
    let objective = scbd_objective(
        &mut tape,
        batch,
        &emb,
        |t, z_c, z_s| decode_nodes(t, &nodes, arch, z_c, z_s).map_err(net_to_loss),
        obj,
    )?;
    let values = objective.values(&tape);
    let grads = if want_grads {
        let g = tape.backward(objective.total)?;
        Some(collect_grads(&nodes, &g, params))
    } else {
        None
    };
    Ok((values, grads))
}

/// Recomputes the step's gradients without the reconstruction term; any
/// bitwise difference outside the decoder means reconstruction gradients
/// leaked through the stop-gradient and the run must not continue.
fn paranoid_check(
    params: &ModelParams,
    arch: &ArchConfig,
    batch: &LabeledBatch,
    obj: &ObjectiveConfig,
    grads: &BTreeMap<String, Vec<f32>>,
) -> Result<(), EngineError> {
    let mut alt = obj.clone();
    alt.recon = false;
    let (_, alt_grads) = objective_forward(params, arch, batch, &alt, true)?;
    let alt_grads = alt_grads.expect("gradients were requested");
    for (name, g) in grads {
        if name.starts_with("dec_") {
            continue;
        }
        let a = &alt_grads[name];
        let same = g.len() == a.len() && g.iter().zip(a).all(|(x, y)| x.to_bits() == y.to_bits());
        if !same {
            return Err(EngineError::Invariant(format!(
                "reconstruction term changed the gradient of {name}"
            )));
        }
    }
    Ok(())
}

/// Validation rows grouped by environment, shuffled once, and interleaved
/// round-robin so every batch spans the available environments. The same
/// batches score every eval point, making the validation curve comparable
/// across steps.
fn val_order(ds: &Dataset, seed: u64) -> Vec<usize> {
    let mut by_env: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, &e) in ds.e.iter().enumerate() {
        by_env.entry(e).or_default().push(i);
    }
    let streams: Vec<Vec<usize>> = by_env
        .into_values()
        .enumerate()
        .map(|(k, mut v)| {
            v.shuffle(&mut substream(seed, "val-order", k as u64));
            v
        })
        .collect();
    let mut out = Vec::with_capacity(ds.len());
    let mut pos = 0;
    loop {
        let mut any = false;
        for s in &streams {
            if pos < s.len() {
                out.push(s[pos]);
                any = true;
            }
        }
        if !any {
            return out;
        }
        pos += 1;
    }
}

/// At most four fixed batches off the interleaved validation order.
fn val_batches(ds: &Dataset, cfg: &TrainConfig) -> Result<Vec<LabeledBatch>, EngineError> {
    let order = val_order(ds, cfg.seed);
    let b = cfg.batch.batch_size().min(order.len());
    let count = (order.len() / b).clamp(1, 4);
    (0..count)
        .map(|i| Ok(ds.batch(&order[i * b..(i + 1) * b])?))
        .collect()
}

fn distinct_envs(ds: &Dataset) -> usize {
    ds.e.iter().collect::<BTreeSet<_>>().len()
}

fn validate_loop_config(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(), EngineError> {
    if cfg.max_steps == 0 {
        return Err(EngineError::BadConfig("max_steps must be >= 1".into()));
    }
    if cfg.eval_every == 0 {
        return Err(EngineError::BadConfig("eval_every must be >= 1".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr > 0.0) {
        return Err(EngineError::BadConfig(format!(
            "learning rate must be finite and positive, got {}",
            cfg.lr
        )));
    }
    if !(cfg.weight_decay.is_finite() && cfg.weight_decay >= 0.0) {
        return Err(EngineError::BadConfig(format!(
            "weight decay must be finite and non-negative, got {}",
            cfg.weight_decay
        )));
    }
    if cfg.batch.batch_size() < 2 {
        return Err(EngineError::BadConfig(
            "batches need at least two rows".into(),
        ));
    }
    if train.len() < 2 || val.len() < 2 {
        return Err(EngineError::BadConfig(
            "train and validation sets need at least two examples".into(),
        ));
    }
    if train.feature_shape != val.feature_shape {
        return Err(EngineError::BadConfig(format!(
            "train features {:?} but validation features {:?}",
            train.feature_shape, val.feature_shape
        )));
    }
    Ok(())
}

fn check_input_shape(input: &crate::nets::InputKind, ds: &Dataset) -> Result<(), EngineError> {
    if input.feature_shape() != ds.feature_shape {
        return Err(EngineError::BadConfig(format!(
            "architecture expects features {:?} but the dataset has {:?}",
            input.feature_shape(),
            ds.feature_shape
        )));
    }
    Ok(())
}

fn cell32(v: Option<f32>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

struct BestTracker {
    step: u64,
    val: Option<f64>,
    /// Weights are only held once an eval in *this* run wins; a resumed
    /// best lives in the checkpoint directory, not in memory.
    state: Option<(ModelParams, OptimSnapshot)>,
}

impl BestTracker {
    fn new(resume: Option<&Checkpoint>) -> Self {
        BestTracker {
            step: resume.map(|c| c.best_step).unwrap_or(0),
            val: resume.and_then(|c| c.best_val),
            state: None,
        }
    }

    fn observe(&mut self, step: u64, val: f64, params: &ModelParams, opt: &AdamW) -> bool {
        let improved = match self.val {
            Some(best) => val < best,
            None => true,
        };
        if improved {
            self.step = step;
            self.val = Some(val);
            self.state = Some((params.clone(), OptimSnapshot::of(opt)));
        }
        improved
    }
}

fn make_checkpoint(
    step: u64,
    seed: u64,
    best: &BestTracker,
    config: &BTreeMap<String, String>,
    params: &ModelParams,
    optim: OptimSnapshot,
) -> Checkpoint {
    Checkpoint {
        step,
        seed,
        best_step: best.step,
        best_val: best.val,
        config: config.clone(),
        params: params.clone(),
        optim,
    }
}

fn write_checkpoint(dir: &PathBuf, name: &str, ckpt: &Checkpoint) -> Result<(), EngineError> {
    save_checkpoint(ckpt, &dir.join(name))
}

// ---------------------------------------------------------------------------
// SCBD loop
// ---------------------------------------------------------------------------

/// Trains the two-block model on `train`, scoring `val` every
/// `cfg.eval_every` steps. Pass `resume` to continue a checkpointed run
/// under the same seed and architecture: the parameter trajectory and metric
/// rows are bit-identical to the run that never stopped.
pub fn train_scbd(
    arch: &ArchConfig,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutcome, EngineError> {
    let started = Instant::now();
    validate_loop_config(train, val, cfg)?;
    check_input_shape(&arch.input, train)?;
    if cfg.objective.recon && !arch.with_decoder {
        return Err(EngineError::BadConfig(
            "objective has a reconstruction term but the architecture has no decoder".into(),
        ));
    }
    if cfg.objective.alpha > 0.0 {
        if distinct_envs(train) < 2 {
            return Err(EngineError::BadConfig(
                "invariance needs at least two environments in the training set".into(),
            ));
        }
        if !cfg.val_excludes_invariance && distinct_envs(val) < 2 {
            return Err(EngineError::BadConfig(
                "invariance needs at least two environments in the validation set".into(),
            ));
        }
    }

    let march = ModelArch::Scbd(arch.clone());
    let (mut params, mut opt, start_step) = match resume {
        Some(ck) => {
            if ck.params.arch() != &march {
                return Err(EngineError::BadConfig(
                    "checkpoint was trained with a different architecture".into(),
                ));
            }
            if ck.seed != cfg.seed {
                return Err(EngineError::BadConfig(format!(
                    "checkpoint seed {} does not match configured seed {}",
                    ck.seed, cfg.seed
                )));
            }
            if ck.step >= cfg.max_steps {
                return Err(EngineError::BadConfig(format!(
                    "checkpoint is already at step {} of {}",
                    ck.step, cfg.max_steps
                )));
            }
            (ck.params.clone(), ck.optim.clone().into_adamw(), ck.step)
        }
        None => (
            init_params(cfg.seed, &march)?,
            AdamW::new(cfg.lr, cfg.weight_decay),
            0,
        ),
    };
    opt.lr = cfg.lr;
    opt.weight_decay = cfg.weight_decay;

    let mut config = BTreeMap::new();
    arch_to_kv(&march, &mut config);
    cfg.to_kv(&mut config);

    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|source| EngineError::Io {
            path: dir.clone(),
            source,
        })?;
    }

    let held_out = val_batches(val, cfg)?;
    let mut metrics = MetricsLog::new(&[
        "step",
        "supcon_zc_y",
        "supcon_zs",
        "invariance",
        "recon",
        "total",
        "val_objective",
    ]);
    let mut best = BestTracker::new(resume);
    let mut diverged_at = None;
    let mut completed = start_step;

    for step in start_step..cfg.max_steps {
        let indices = batch_indices(&cfg.batch, train, cfg.seed, step)?;
        let batch = train.batch(&indices)?;
        let (values, grads) = match objective_forward(&params, arch, &batch, &cfg.objective, true)
        {
            Ok((v, g)) => (v, g.expect("gradients were requested")),
            Err(e) if is_divergence(&e) => {
                diverged_at = Some(step + 1);
                break;
            }
            Err(e) => return Err(e),
        };
        if cfg.paranoid_checks && cfg.objective.recon {
            paranoid_check(&params, arch, &batch, &cfg.objective, &grads)?;
        }
        opt.apply(params.arrays_mut(), &grads)?;
        let done = step + 1;
        completed = done;

        let mut val_cell = None;
        if done % cfg.eval_every == 0 || done == cfg.max_steps {
            let mut score = cfg.objective.clone();
            if cfg.val_excludes_invariance {
                score.alpha = 0.0;
            }
            let mut sum = 0.0f64;
            let mut failed = false;
            for b in &held_out {
                match objective_forward(&params, arch, b, &score, false) {
                    Ok((v, _)) => sum += f64::from(v.total),
                    Err(e) if is_divergence(&e) => {
                        failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
            if failed {
                diverged_at = Some(done);
                break;
            }
            let val = sum / held_out.len() as f64;
            val_cell = Some(val);
            let improved = best.observe(done, val, &params, &opt);
            if let Some(dir) = &cfg.checkpoint_dir {
                let latest = make_checkpoint(
                    done,
                    cfg.seed,
                    &best,
                    &config,
                    &params,
                    OptimSnapshot::of(&opt),
                );
                write_checkpoint(dir, "latest.scbk", &latest)?;
                if improved {
                    write_checkpoint(dir, "best.scbk", &latest)?;
                }
            }
        }

        metrics.push(vec![
            done.to_string(),
            cell32(Some(values.supcon_zc_y)),
            cell32(values.supcon_zs),
            cell32(values.invariance),
            cell32(values.recon),
            cell32(Some(values.total)),
            fmt_cell(val_cell),
        ]);
    }

    let last = make_checkpoint(
        completed,
        cfg.seed,
        &best,
        &config,
        &params,
        OptimSnapshot::of(&opt),
    );
    if diverged_at.is_some() {
        if let Some(dir) = &cfg.checkpoint_dir {
            write_checkpoint(dir, "latest.scbk", &last)?;
        }
    }
    let best_ckpt = match &best.state {
        Some((p, o)) => make_checkpoint(best.step, cfg.seed, &best, &config, p, o.clone()),
        None => last.clone(),
    };
    Ok(TrainOutcome {
        best: best_ckpt,
        last,
        metrics,
        diverged_at,
        skipped_steps: opt.skipped(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------
// ERM loop
// ---------------------------------------------------------------------------

/// Mean cross-entropy of `logits` against integer labels.
fn cross_entropy(
    tape: &mut Tape,
    logits: crate::ndcore::NodeId,
    y: &[i32],
    classes: usize,
) -> Result<crate::ndcore::NodeId, EngineError> {
    let n = y.len();
    let mut onehot = vec![0.0f32; n * classes];
    for (i, &label) in y.iter().enumerate() {
        onehot[i * classes + label as usize] = 1.0;
    }
    let mask = tape.leaf(crate::ndcore::Array::new(vec![n, classes], onehot)?);
    let logp = tape.row_log_softmax(logits)?;
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    Ok(tape.mul_scalar(total, -1.0 / n as f32)?)
}

/// Fraction of rows whose argmax logit equals the label, computed in fixed
/// chunks so the result does not depend on available memory.
pub fn erm_accuracy(params: &ModelParams, ds: &Dataset) -> Result<f64, EngineError> {
    let mut hits = 0usize;
    let mut at = 0usize;
    while at < ds.len() {
        let hi = (at + 512).min(ds.len());
        let indices: Vec<usize> = (at..hi).collect();
        let batch = ds.batch(&indices)?;
        let logits = erm_logits(params, &batch.x)?;
        let classes = logits.dim(1);
        for (row, &label) in batch.y.iter().enumerate() {
            let scores = &logits.data()[row * classes..(row + 1) * classes];
            let mut arg = 0usize;
            for (j, &s) in scores.iter().enumerate() {
                if s > scores[arg] {
                    arg = j;
                }
            }
            if arg as i32 == label {
                hits += 1;
            }
        }
        at = hi;
    }
    Ok(hits as f64 / ds.len() as f64)
}

fn check_labels(ds: &Dataset, classes: usize, which: &str) -> Result<(), EngineError> {
    for &label in &ds.y {
        if label < 0 || label as usize >= classes {
            return Err(EngineError::BadConfig(format!(
                "{which} label {label} outside 0..{classes}"
            )));
        }
    }
    Ok(())
}

/// Trains the ERM baseline classifier with mean cross-entropy, selecting the
/// checkpoint with the highest validation accuracy (earliest step on ties).
/// Only the loop fields of `cfg` apply; the objective settings are ignored.
pub fn train_erm(
    arch: &ErmArchConfig,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<ErmTrainOutcome, EngineError> {
    let started = Instant::now();
    validate_loop_config(train, val, cfg)?;
    check_input_shape(&arch.input, train)?;
    check_labels(train, arch.classes, "training")?;
    check_labels(val, arch.classes, "validation")?;

    let march = ModelArch::Erm(arch.clone());
    let mut params = init_params(cfg.seed, &march)?;
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut config = BTreeMap::new();
    arch_to_kv(&march, &mut config);
    cfg.to_kv(&mut config);
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|source| EngineError::Io {
            path: dir.clone(),
            source,
        })?;
    }

    let mut metrics = MetricsLog::new(&["step", "ce", "val_acc"]);
    // Reuses the tracker with the sign flipped so "lower is better" holds.
    let mut best = BestTracker::new(None);
    let mut diverged_at = None;
    let mut completed = 0;

    for step in 0..cfg.max_steps {
        let indices = batch_indices(&cfg.batch, train, cfg.seed, step)?;
        let batch = train.batch(&indices)?;
        let step_result = (|| -> Result<(f32, BTreeMap<String, Vec<f32>>), EngineError> {
            let mut tape = Tape::new();
            let nodes = insert_params(&mut tape, &params, true);
            let x = tape.leaf(batch.x.clone());
            let logits = erm_logits_nodes(&mut tape, &nodes, arch, x)?;
            let loss = cross_entropy(&mut tape, logits, &batch.y, arch.classes)?;
            let value = tape.value(loss).scalar_value();
            let grads = tape.backward(loss)?;
            Ok((value, collect_grads(&nodes, &grads, &params)))
        })();
        let (ce, grads) = match step_result {
            Ok(out) => out,
            Err(e) if is_divergence(&e) => {
                diverged_at = Some(step + 1);
                break;
            }
            Err(e) => return Err(e),
        };
        opt.apply(params.arrays_mut(), &grads)?;
        let done = step + 1;
        completed = done;

        let mut val_cell = None;
        if done % cfg.eval_every == 0 || done == cfg.max_steps {
            let acc = match erm_accuracy(&params, val) {
                Ok(a) => a,
                Err(e) if is_divergence(&e) => {
                    diverged_at = Some(done);
                    break;
                }
                Err(e) => return Err(e),
            };
            val_cell = Some(acc);
            let improved = best.observe(done, -acc, &params, &opt);
            if let Some(dir) = &cfg.checkpoint_dir {
                let latest = make_checkpoint(
                    done,
                    cfg.seed,
                    &best,
                    &config,
                    &params,
                    OptimSnapshot::of(&opt),
                );
                write_checkpoint(dir, "latest.scbk", &latest)?;
                if improved {
                    write_checkpoint(dir, "best.scbk", &latest)?;
                }
            }
        }
        metrics.push(vec![
            done.to_string(),
            cell32(Some(ce)),
            fmt_cell(val_cell),
        ]);
    }

    let last = make_checkpoint(
        completed,
        cfg.seed,
        &best,
        &config,
        &params,
        OptimSnapshot::of(&opt),
    );
    if diverged_at.is_some() {
        if let Some(dir) = &cfg.checkpoint_dir {
            write_checkpoint(dir, "latest.scbk", &last)?;
        }
    }
    let best_ckpt = match &best.state {
        Some((p, o)) => make_checkpoint(best.step, cfg.seed, &best, &config, p, o.clone()),
        None => last.clone(),
    };
    Ok(ErmTrainOutcome {
        best: best_ckpt,
        last,
        best_val_acc: best.val.map(|v| -v).unwrap_or(0.0),
        metrics,
        diverged_at,
        skipped_steps: opt.skipped(),
        seconds: started.elapsed().as_secs_f64(),
    })
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DatasetKind;
    use crate::nets::InputKind;
    use rand_distr::{Distribution, Normal};

    /// Four well-separated Gaussian blobs in `dim` dimensions, environments
    /// assigned independently of class.
    fn toy_blobs(n: usize, classes: usize, dim: usize, seed: u64) -> Dataset {
        let noise = Normal::new(0.0f64, 0.25).unwrap();
        let mut rng = substream(seed, "blobs", 0);
        let mut features = Vec::with_capacity(n * dim);
        let mut y = Vec::with_capacity(n);
        let mut e = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % classes;
            for d in 0..dim {
                let center = if d == class { 3.0 } else { 0.0 };
                features.push(center + noise.sample(&mut rng) as f32);
            }
            y.push(class as i32);
            e.push(((i / classes) % 2) as i32);
        }
        Dataset {
            kind: DatasetKind::Screen,
            feature_shape: vec![dim],
            features,
            y,
            e,
            screen: None,
        }
    }

    fn vector_arch(dim: usize, single_block: bool, with_decoder: bool) -> ArchConfig {
        ArchConfig {
            input: InputKind::Vector { dim },
            d_zc: 16,
            d_zs: 8,
            single_block,
            with_decoder,
        }
    }

    fn quick_config(max_steps: u64, eval_every: u64) -> TrainConfig {
        TrainConfig {
            batch: BatchSpec::Balanced {
                classes: 4,
                per_class: 4,
            },
            max_steps,
            eval_every,
            lr: 1e-3,
            weight_decay: 0.0,
            ..TrainConfig::default()
        }
    }

    fn param_bits(p: &ModelParams) -> Vec<u32> {
        p.arrays()
            .values()
            .flat_map(|a| a.data().iter().map(|v| v.to_bits()))
            .collect()
    }

    #[test]
    fn supcon_drops_on_toy_blobs() {
        let train = toy_blobs(256, 4, 8, 17);
        let val = toy_blobs(64, 4, 8, 18);
        let arch = vector_arch(8, true, false);
        let cfg = quick_config(200, 50);
        let out = train_scbd(&arch, &train, &val, &cfg, None).unwrap();
        assert_eq!(out.metrics.rows.len(), 200);
        assert!(out.diverged_at.is_none());
        let first: f32 = out.metrics.rows[0][1].parse().unwrap();
        let last: f32 = out.metrics.rows[199][1].parse().unwrap();
        assert!(
            last < first - 0.1,
            "supcon did not improve: {first} -> {last}"
        );
        // Single block, no invariance, no recon: those cells stay blank, and
        // the validation column is only filled on eval steps.
        assert_eq!(out.metrics.rows[0][2], "");
        assert_eq!(out.metrics.rows[0][3], "");
        assert_eq!(out.metrics.rows[0][4], "");
        assert_eq!(out.metrics.rows[0][6], "");
        assert_ne!(out.metrics.rows[49][6], "");
        assert!(out.best.best_val.is_some());
        assert_eq!(out.last.step, 200);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let train = toy_blobs(128, 4, 8, 3);
        let val = toy_blobs(32, 4, 8, 4);
        let arch = vector_arch(8, false, false);
        let mut cfg = quick_config(40, 20);
        cfg.objective.alpha = 1.0;
        let a = train_scbd(&arch, &train, &val, &cfg, None).unwrap();
        let b = train_scbd(&arch, &train, &val, &cfg, None).unwrap();
        assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
        assert_eq!(param_bits(&a.last.params), param_bits(&b.last.params));
        assert_eq!(a.last.best_val, b.last.best_val);
    }

    #[test]
    fn resume_matches_the_straight_run() {
        let train = toy_blobs(128, 4, 8, 5);
        let val = toy_blobs(32, 4, 8, 6);
        let arch = vector_arch(8, false, false);
        let cfg_full = quick_config(40, 10);
        let straight = train_scbd(&arch, &train, &val, &cfg_full, None).unwrap();

        let cfg_half = TrainConfig {
            max_steps: 20,
            ..cfg_full.clone()
        };
        let half = train_scbd(&arch, &train, &val, &cfg_half, None).unwrap();
        let resumed = train_scbd(&arch, &train, &val, &cfg_full, Some(&half.last)).unwrap();

        assert_eq!(
            param_bits(&resumed.last.params),
            param_bits(&straight.last.params)
        );
        assert_eq!(resumed.metrics.rows.len(), 20);
        assert_eq!(resumed.metrics.rows[..], straight.metrics.rows[20..]);
    }

    #[test]
    fn divergence_aborts_with_the_last_finite_state() {
        let train = toy_blobs(128, 4, 8, 7);
        let val = toy_blobs(32, 4, 8, 8);
        let arch = vector_arch(8, true, false);
        let mut cfg = quick_config(50, 10);
        cfg.lr = 1e10;
        let out = train_scbd(&arch, &train, &val, &cfg, None).unwrap();
        let at = out.diverged_at.expect("expected the run to diverge");
        assert!(at <= 10, "diverged later than expected: step {at}");
        assert!(out.metrics.rows.len() < 50);
        assert_eq!(out.last.step + 1, at);
        for arr in out.last.params.arrays().values() {
            assert!(arr.data().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn checkpoints_land_at_eval_points() {
        let dir = tempfile::tempdir().unwrap();
        let train = toy_blobs(128, 4, 8, 9);
        let val = toy_blobs(32, 4, 8, 10);
        let arch = vector_arch(8, true, false);
        let mut cfg = quick_config(20, 10);
        cfg.checkpoint_dir = Some(dir.path().to_path_buf());
        let out = train_scbd(&arch, &train, &val, &cfg, None).unwrap();

        let latest = super::super::load_checkpoint(&dir.path().join("latest.scbk")).unwrap();
        let best = super::super::load_checkpoint(&dir.path().join("best.scbk")).unwrap();
        assert_eq!(latest.step, 20);
        assert_eq!(best.step, out.best.step);
        assert_eq!(best.best_val, out.best.best_val);
        // The selected checkpoint is no worse than any logged eval point.
        let best_val = out.best.best_val.unwrap();
        for row in &out.metrics.rows {
            if !row[6].is_empty() {
                assert!(best_val <= row[6].parse::<f64>().unwrap() + 1e-12);
            }
        }
    }

    #[test]
    fn paranoid_checks_accept_a_reconstruction_run() {
        let train = toy_blobs(128, 4, 8, 11);
        let val = toy_blobs(32, 4, 8, 12);
        let arch = vector_arch(8, false, true);
        let mut cfg = quick_config(5, 5);
        cfg.objective.alpha = 0.5;
        cfg.objective.recon = true;
        cfg.paranoid_checks = true;
        let out = train_scbd(&arch, &train, &val, &cfg, None).unwrap();
        assert!(out.diverged_at.is_none());
        let recon_cell = &out.metrics.rows[0][4];
        assert!(!recon_cell.is_empty());
    }

    #[test]
    fn batch_spec_round_trips_through_its_text_form() {
        for spec in [
            BatchSpec::Balanced {
                classes: 32,
                per_class: 8,
            },
            BatchSpec::Shuffle { batch_size: 256 },
        ] {
            let text = spec.to_string();
            assert_eq!(text.parse::<BatchSpec>().unwrap(), spec);
        }
        assert!("balanced:32".parse::<BatchSpec>().is_err());
        assert!("epoch:4".parse::<BatchSpec>().is_err());
    }

    #[test]
    fn rejects_inconsistent_configs() {
        let train = toy_blobs(64, 4, 8, 13);
        let val = toy_blobs(32, 4, 8, 14);
        let arch = vector_arch(8, false, false);

        let mut recon = quick_config(10, 5);
        recon.objective.recon = true;
        assert!(train_scbd(&arch, &train, &val, &recon, None).is_err());

        let mut single_env = train.clone();
        single_env.e.iter_mut().for_each(|e| *e = 0);
        let mut inv = quick_config(10, 5);
        inv.objective.alpha = 1.0;
        assert!(train_scbd(&arch, &single_env, &val, &inv, None).is_err());

        let mut tiny = quick_config(10, 5);
        tiny.batch = BatchSpec::Shuffle { batch_size: 1 };
        assert!(train_scbd(&arch, &train, &val, &tiny, None).is_err());

        let ok = train_scbd(&arch, &train, &val, &quick_config(2, 2), None).unwrap();
        let other_arch = vector_arch(8, true, false);
        let err = train_scbd(&other_arch, &train, &val, &quick_config(4, 2), Some(&ok.last));
        assert!(err.is_err());
    }

    #[test]
    fn erm_learns_separable_blobs() {
        let train = toy_blobs(256, 4, 8, 15);
        let val = toy_blobs(64, 4, 8, 16);
        let arch = ErmArchConfig {
            input: InputKind::Vector { dim: 8 },
            classes: 4,
        };
        let cfg = TrainConfig {
            batch: BatchSpec::Shuffle { batch_size: 32 },
            max_steps: 150,
            eval_every: 25,
            lr: 1e-3,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let out = train_erm(&arch, &train, &val, &cfg).unwrap();
        assert!(out.diverged_at.is_none());
        assert!(
            out.best_val_acc >= 0.9,
            "accuracy stayed at {}",
            out.best_val_acc
        );
        assert_eq!(out.metrics.header, vec!["step", "ce", "val_acc"]);
        let first: f32 = out.metrics.rows[0][1].parse().unwrap();
        let last: f32 = out.metrics.rows[149][1].parse().unwrap();
        assert!(last < first);
    }
}
