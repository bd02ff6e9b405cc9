//! Checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic b"SCBK" | version u32
//! step u64 | seed u64 | best_step u64 | best_val f64 (NaN = none yet)
//! optim: step u64 | skipped u64 | lr f64 | weight_decay f64
//! config: len u32 + key=value text (architecture + objective + loop echo)
//! params:  count u32, then name_len u32, name, ndim u32, dims u32×, f32 data
//! moments: count u32, then name_len u32, name, len u32, m f32×len, v f32×len
//! ```
//!
//! The config block carries the architecture under `arch.*`, so a loaded
//! checkpoint rebuilds its model without outside information, and training
//! can resume bit-exactly: batches are a pure function of (seed, step), so
//! seed + step + parameters + moments is the complete loop state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{AdamW, EngineError};
use crate::contrastive::{DiagMode, ObjectiveConfig, ZsKey};
use crate::ndcore::Array;
use crate::nets::{ArchConfig, ErmArchConfig, InputKind, ModelArch, ModelParams};
use crate::util::{fsio, kv};

pub const CKPT_MAGIC: &[u8; 4] = b"SCBK";
pub const CKPT_VERSION: u32 = 1;

/// Serializable optimizer state.
#[derive(Debug, Clone)]
pub struct OptimSnapshot {
    pub lr: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub skipped: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl OptimSnapshot {
    pub fn of(opt: &AdamW) -> Self {
        OptimSnapshot {
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            step: opt.step_count(),
            skipped: opt.skipped(),
            moments: opt.moments().clone(),
        }
    }

    pub fn into_adamw(self) -> AdamW {
        AdamW::from_parts(
            self.lr,
            self.weight_decay,
            self.step,
            self.skipped,
            self.moments,
        )
    }
}

/// Complete training state at some step.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub seed: u64,
    /// Step of the best validation point seen so far.
    pub best_step: u64,
    /// Best validation objective seen so far (`None` before the first eval).
    pub best_val: Option<f64>,
    /// Config echo: `arch.*` plus whatever the training loop records.
    pub config: BTreeMap<String, String>,
    pub params: ModelParams,
    pub optim: OptimSnapshot,
}

// ---------------------------------------------------------------------------
// Config codecs
// ---------------------------------------------------------------------------

fn input_to_str(input: InputKind) -> String {
    match input {
        InputKind::Image { c, h, w } => format!("image:{c}x{h}x{w}"),
        InputKind::Vector { dim } => format!("vector:{dim}"),
    }
}

fn input_from_str(s: &str) -> Result<InputKind, EngineError> {
    let bad = || EngineError::BadConfig(format!("bad input kind {s:?}"));
    let (kind, dims) = s.split_once(':').ok_or_else(bad)?;
    match kind {
        "image" => {
            let parts: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| bad()))
                .collect::<Result<_, _>>()?;
            if parts.len() != 3 {
                return Err(bad());
            }
            Ok(InputKind::Image {
                c: parts[0],
                h: parts[1],
                w: parts[2],
            })
        }
        "vector" => Ok(InputKind::Vector {
            dim: dims.parse().map_err(|_| bad())?,
        }),
        _ => Err(bad()),
    }
}

/// Writes the architecture into a config map under `arch.*`.
pub fn arch_to_kv(arch: &ModelArch, map: &mut BTreeMap<String, String>) {
    let mut put = |k: &str, v: String| map.insert(format!("arch.{k}"), v);
    put("input", input_to_str(arch.input()));
    match arch {
        ModelArch::Scbd(a) => {
            put("model", "scbd".into());
            put("d_zc", a.d_zc.to_string());
            put("d_zs", a.d_zs.to_string());
            put("single_block", a.single_block.to_string());
            put("with_decoder", a.with_decoder.to_string());
        }
        ModelArch::Erm(a) => {
            put("model", "erm".into());
            put("classes", a.classes.to_string());
        }
    }
}

/// Reads an architecture back out of a config map.
pub fn arch_from_kv(map: &BTreeMap<String, String>) -> Result<ModelArch, EngineError> {
    let get = |k: &str| -> Result<&str, EngineError> {
        map.get(&format!("arch.{k}"))
            .map(String::as_str)
            .ok_or_else(|| EngineError::BadConfig(format!("config is missing arch.{k}")))
    };
    let parse = |k: &str, v: &str| EngineError::BadConfig(format!("bad arch.{k} value {v:?}"));
    let input = input_from_str(get("input")?)?;
    match get("model")? {
        "scbd" => {
            let num = |k: &str| -> Result<usize, EngineError> {
                let v = get(k)?;
                v.parse().map_err(|_| parse(k, v))
            };
            let flag = |k: &str| -> Result<bool, EngineError> {
                let v = get(k)?;
                v.parse().map_err(|_| parse(k, v))
            };
            Ok(ModelArch::Scbd(ArchConfig {
                input,
                d_zc: num("d_zc")?,
                d_zs: num("d_zs")?,
                single_block: flag("single_block")?,
                with_decoder: flag("with_decoder")?,
            }))
        }
        "erm" => {
            let v = get("classes")?;
            Ok(ModelArch::Erm(ErmArchConfig {
                input,
                classes: v.parse().map_err(|_| parse("classes", v))?,
            }))
        }
        other => Err(EngineError::BadConfig(format!(
            "unknown arch.model {other:?}"
        ))),
    }
}

/// Writes the objective into a config map under `objective.*`.
pub fn objective_to_kv(cfg: &ObjectiveConfig, map: &mut BTreeMap<String, String>) {
    let mut put = |k: &str, v: String| map.insert(format!("objective.{k}"), v);
    put("tau", cfg.tau.to_string());
    put("alpha", cfg.alpha.to_string());
    put("zs_key", cfg.zs_key.as_str().to_string());
    put("recon", cfg.recon.to_string());
    put("diag_mode", cfg.diag_mode.as_str().to_string());
}

/// Reads an objective back out of a config map; absent keys keep defaults.
pub fn objective_from_kv(map: &BTreeMap<String, String>) -> Result<ObjectiveConfig, EngineError> {
    let mut cfg = ObjectiveConfig::default();
    let bad = |k: &str, v: &str| EngineError::BadConfig(format!("bad objective.{k} value {v:?}"));
    if let Some(v) = map.get("objective.tau") {
        cfg.tau = v.parse().map_err(|_| bad("tau", v))?;
    }
    if let Some(v) = map.get("objective.alpha") {
        cfg.alpha = v.parse().map_err(|_| bad("alpha", v))?;
    }
    if let Some(v) = map.get("objective.zs_key") {
        cfg.zs_key = ZsKey::from_str(v).ok_or_else(|| bad("zs_key", v))?;
    }
    if let Some(v) = map.get("objective.recon") {
        cfg.recon = v.parse().map_err(|_| bad("recon", v))?;
    }
    if let Some(v) = map.get("objective.diag_mode") {
        cfg.diag_mode = DiagMode::from_str(v).ok_or_else(|| bad("diag_mode", v))?;
    }
    Ok(cfg)
}

// ---------------------------------------------------------------------------
// Binary encode/decode
// ---------------------------------------------------------------------------

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_name(out: &mut Vec<u8>, name: &str) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
}

/// Serializes a checkpoint.
pub fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    push_u32(&mut out, CKPT_VERSION);
    push_u64(&mut out, ckpt.step);
    push_u64(&mut out, ckpt.seed);
    push_u64(&mut out, ckpt.best_step);
    push_f64(&mut out, ckpt.best_val.unwrap_or(f64::NAN));
    push_u64(&mut out, ckpt.optim.step);
    push_u64(&mut out, ckpt.optim.skipped);
    push_f64(&mut out, ckpt.optim.lr);
    push_f64(&mut out, ckpt.optim.weight_decay);

    let mut config = ckpt.config.clone();
    arch_to_kv(ckpt.params.arch(), &mut config);
    let text = kv::render(&config);
    push_u32(&mut out, text.len() as u32);
    out.extend_from_slice(text.as_bytes());

    push_u32(&mut out, ckpt.params.arrays().len() as u32);
    for (name, arr) in ckpt.params.arrays() {
        push_name(&mut out, name);
        push_u32(&mut out, arr.shape().len() as u32);
        for &d in arr.shape() {
            push_u32(&mut out, d as u32);
        }
        for &v in arr.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    push_u32(&mut out, ckpt.optim.moments.len() as u32);
    for (name, (m, v)) in &ckpt.optim.moments {
        push_name(&mut out, name);
        push_u32(&mut out, m.len() as u32);
        for &x in m {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], EngineError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(EngineError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos,
                needed: n - remaining,
                len: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, EngineError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, EngineError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, EngineError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, EngineError> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn name(&mut self) -> Result<String, EngineError> {
        let at = self.pos;
        let len = self.u32()? as usize;
        if len == 0 || len > 256 {
            return Err(self.malformed(at, format!("implausible name length {len}")));
        }
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec())
            .map_err(|_| self.malformed(at + 4, "name is not UTF-8".to_string()))
    }

    fn malformed(&self, at: usize, reason: String) -> EngineError {
        EngineError::Malformed {
            path: self.path.to_path_buf(),
            reason,
            offset: at,
        }
    }
}

/// Parses checkpoint bytes (path is used in error messages only).
pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Checkpoint, EngineError> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(EngineError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(CKPT_MAGIC).into_owned(),
            got: magic.escape_ascii().to_string(),
        });
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(EngineError::Version {
            path: path.to_path_buf(),
            got: version,
        });
    }
    let step = cur.u64()?;
    let seed = cur.u64()?;
    let best_step = cur.u64()?;
    let best_val_raw = cur.f64()?;
    let best_val = if best_val_raw.is_nan() {
        None
    } else {
        Some(best_val_raw)
    };
    let optim_step = cur.u64()?;
    let skipped = cur.u64()?;
    let lr = cur.f64()?;
    let weight_decay = cur.f64()?;

    let config_at = cur.pos;
    let config_len = cur.u32()? as usize;
    let text = std::str::from_utf8(cur.take(config_len)?)
        .map_err(|_| cur.malformed(config_at, "config block is not UTF-8".into()))?;
    let config = kv::parse(text)
        .map_err(|e| cur.malformed(config_at, format!("config block: {e}")))?;

    let n_params = cur.u32()? as usize;
    let mut arrays = BTreeMap::new();
    for _ in 0..n_params {
        let name = cur.name()?;
        let ndim_at = cur.pos;
        let ndim = cur.u32()? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(cur.malformed(ndim_at, format!("implausible rank {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut len = 1usize;
        for _ in 0..ndim {
            let at = cur.pos;
            let d = cur.u32()? as usize;
            if d == 0 {
                return Err(cur.malformed(at, format!("zero dimension in {name}")));
            }
            len = len
                .checked_mul(d)
                .ok_or_else(|| cur.malformed(at, format!("size overflow in {name}")))?;
            shape.push(d);
        }
        let data = cur.f32s(len)?;
        let arr = Array::new(shape, data)
            .map_err(|e| cur.malformed(ndim_at, format!("array {name}: {e}")))?;
        arrays.insert(name, arr);
    }

    let n_moments = cur.u32()? as usize;
    let mut moments = BTreeMap::new();
    for _ in 0..n_moments {
        let name = cur.name()?;
        let at = cur.pos;
        let len = cur.u32()? as usize;
        match arrays.get(&name) {
            Some(arr) if arr.len() == len => {}
            Some(arr) => {
                return Err(cur.malformed(
                    at,
                    format!("moments for {name} have {len} values, parameter has {}", arr.len()),
                ))
            }
            None => {
                return Err(cur.malformed(at, format!("moments for unknown parameter {name}")))
            }
        }
        let m = cur.f32s(len)?;
        let v = cur.f32s(len)?;
        moments.insert(name, (m, v));
    }
    if cur.pos != bytes.len() {
        return Err(cur.malformed(
            cur.pos,
            format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        ));
    }

    let arch = arch_from_kv(&config)?;
    let params = ModelParams::from_arrays(arch, arrays)?;
    Ok(Checkpoint {
        step,
        seed,
        best_step,
        best_val,
        config,
        params,
        optim: OptimSnapshot {
            lr,
            weight_decay,
            step: optim_step,
            skipped,
            moments,
        },
    })
}

/// Writes a checkpoint atomically.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), EngineError> {
    fsio::atomic_write(path, &to_bytes(ckpt)).map_err(|source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a checkpoint from disk.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, EngineError> {
    let bytes = fs::read(path).map_err(|source| EngineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_params;

    fn sample() -> Checkpoint {
        let arch = ModelArch::Scbd(ArchConfig {
            input: InputKind::Vector { dim: 6 },
            d_zc: 4,
            d_zs: 3,
            single_block: false,
            with_decoder: true,
        });
        let params = init_params(9, &arch).unwrap();
        let mut opt = AdamW::new(1e-3, 0.01);
        let grads: BTreeMap<String, Vec<f32>> = params
            .arrays()
            .iter()
            .map(|(n, a)| (n.clone(), vec![0.1; a.len()]))
            .collect();
        let mut arrays = params.arrays().clone();
        opt.apply(&mut arrays, &grads).unwrap();
        let params = ModelParams::from_arrays(params.arch().clone(), arrays).unwrap();
        let mut config = BTreeMap::new();
        config.insert("train.max_steps".to_string(), "100".to_string());
        objective_to_kv(&ObjectiveConfig::default(), &mut config);
        Checkpoint {
            step: 17,
            seed: 9,
            best_step: 10,
            best_val: Some(1.25),
            config,
            params,
            optim: OptimSnapshot::of(&opt),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample();
        let bytes = to_bytes(&ckpt);
        let back = from_bytes(Path::new("x"), &bytes).unwrap();
        assert_eq!(back.step, 17);
        assert_eq!(back.seed, 9);
        assert_eq!(back.best_step, 10);
        assert_eq!(back.best_val, Some(1.25));
        assert_eq!(back.config.get("train.max_steps").unwrap(), "100");
        assert_eq!(back.params.arrays().len(), ckpt.params.arrays().len());
        for (name, arr) in ckpt.params.arrays() {
            assert_eq!(back.params.arrays()[name].data(), arr.data(), "{name}");
        }
        assert_eq!(back.optim.moments, ckpt.optim.moments);
        // save→load→save produces identical bytes.
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn save_and_load_via_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.scbk");
        let ckpt = sample();
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(to_bytes(&back), to_bytes(&ckpt));
    }

    #[test]
    fn corrupt_magic_names_the_expected_one() {
        let mut bytes = to_bytes(&sample());
        bytes[0] = b'X';
        match from_bytes(Path::new("x"), &bytes).unwrap_err() {
            EngineError::BadMagic { expected, got, .. } => {
                assert_eq!(expected, "SCBK");
                assert_eq!(got, "XCBK");
            }
            other => panic!("expected BadMagic, got {other}"),
        }
    }

    #[test]
    fn version_and_truncation_errors() {
        let bytes = to_bytes(&sample());
        let mut bad = bytes.clone();
        bad[4..8].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(
            from_bytes(Path::new("x"), &bad).unwrap_err(),
            EngineError::Version { got: 3, .. }
        ));
        match from_bytes(Path::new("x"), &bytes[..bytes.len() - 10]).unwrap_err() {
            EngineError::Truncated { needed, .. } => assert!(needed >= 10),
            other => panic!("expected Truncated, got {other}"),
        }
    }

    #[test]
    fn objective_kv_round_trip() {
        let cfg = ObjectiveConfig {
            tau: 0.25,
            alpha: 64.0,
            zs_key: ZsKey::LabelEnvironmentPair,
            recon: true,
            diag_mode: DiagMode::AppendixVerbatim,
        };
        let mut map = BTreeMap::new();
        objective_to_kv(&cfg, &mut map);
        let back = objective_from_kv(&map).unwrap();
        assert_eq!(back.tau, cfg.tau);
        assert_eq!(back.alpha, cfg.alpha);
        assert_eq!(back.zs_key, cfg.zs_key);
        assert_eq!(back.recon, cfg.recon);
        assert_eq!(back.diag_mode, cfg.diag_mode);
    }

    #[test]
    fn arch_kv_round_trip() {
        for arch in [
            ModelArch::Scbd(ArchConfig {
                input: InputKind::Image { c: 3, h: 32, w: 32 },
                d_zc: 32,
                d_zs: 16,
                single_block: false,
                with_decoder: true,
            }),
            ModelArch::Erm(ErmArchConfig {
                input: InputKind::Vector { dim: 32 },
                classes: 10,
            }),
        ] {
            let mut map = BTreeMap::new();
            arch_to_kv(&arch, &mut map);
            assert_eq!(arch_from_kv(&map).unwrap(), arch);
        }
    }
}
