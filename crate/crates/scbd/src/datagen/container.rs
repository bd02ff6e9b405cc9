//! Binary dataset container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic  b"SCBD"
//! offset 4   version u32            (currently 1)
//! offset 8   kind    u32            (0 = colored digits, 1 = screen)
//! offset 12  n       u32            examples
//! offset 16  ndim    u32            feature dimensions per example
//! offset 20  dims    ndim × u32
//! then       n_cols  u32            label columns
//! per column         name_len u32, name bytes, n × i32 values
//! then       features n·∏dims × f32
//! ```
//!
//! Label columns are written in a fixed order (`y`, `e`, then screen
//! columns), so saving the same dataset twice produces identical bytes.
//! Writes go through a temp-file rename and never leave partial files.

use std::fs;
use std::path::{Path, PathBuf};

use super::{DataError, Dataset, DatasetKind, ScreenLabels};
use crate::util::fsio;

pub const MAGIC: &[u8; 4] = b"SCBD";
pub const VERSION: u32 = 1;

/// Conventional path of the key=value sidecar describing how a container
/// was generated: the container path with `.kv` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".kv");
    path.with_file_name(name)
}

fn kind_code(kind: DatasetKind) -> u32 {
    match kind {
        DatasetKind::ColoredDigits => 0,
        DatasetKind::Screen => 1,
    }
}

fn push_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn push_column(out: &mut Vec<u8>, name: &str, values: &[i32]) {
    push_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    for &v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes `ds` into container bytes.
pub fn to_bytes(ds: &Dataset) -> Result<Vec<u8>, DataError> {
    ds.validate()?;
    let mut out = Vec::with_capacity(64 + ds.features.len() * 4 + ds.len() * 8);
    out.extend_from_slice(MAGIC);
    push_u32(&mut out, VERSION);
    push_u32(&mut out, kind_code(ds.kind));
    push_u32(&mut out, ds.len() as u32);
    push_u32(&mut out, ds.feature_shape.len() as u32);
    for &d in &ds.feature_shape {
        push_u32(&mut out, d as u32);
    }
    let mut columns: Vec<(&str, &[i32])> = vec![("y", &ds.y), ("e", &ds.e)];
    if let Some(screen) = &ds.screen {
        columns.push(("gene", &screen.gene));
        columns.push(("guide", &screen.guide));
        columns.push(("well", &screen.well));
    }
    push_u32(&mut out, columns.len() as u32);
    for (name, values) in columns {
        push_column(&mut out, name, values);
    }
    for &v in &ds.features {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Writes `ds` to `path` atomically.
pub fn save(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let bytes = to_bytes(ds)?;
    fsio::atomic_write(path, &bytes).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(DataError::Truncated {
                path: self.path.to_path_buf(),
                offset: self.pos,
                needed: n - remaining,
                len: self.bytes.len(),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn malformed(&self, at: usize, reason: impl Into<String>) -> DataError {
        DataError::Malformed {
            path: self.path.to_path_buf(),
            reason: reason.into(),
            offset: at,
        }
    }
}

/// Parses container bytes read from `path` (the path is only used in error
/// messages).
pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Dataset, DataError> {
    let mut cur = Cursor { path, bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            got: magic.escape_ascii().to_string(),
        });
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(DataError::Version {
            path: path.to_path_buf(),
            got: version,
        });
    }
    let kind_at = cur.pos;
    let kind = match cur.u32()? {
        0 => DatasetKind::ColoredDigits,
        1 => DatasetKind::Screen,
        other => return Err(cur.malformed(kind_at, format!("unknown dataset kind code {other}"))),
    };
    let n = cur.u32()? as usize;
    let ndim_at = cur.pos;
    let ndim = cur.u32()? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(cur.malformed(ndim_at, format!("implausible dimension count {ndim}")));
    }
    let mut feature_shape = Vec::with_capacity(ndim);
    let mut per_example = 1usize;
    for _ in 0..ndim {
        let dim_at = cur.pos;
        let d = cur.u32()? as usize;
        if d == 0 {
            return Err(cur.malformed(dim_at, "zero-sized feature dimension"));
        }
        per_example = per_example
            .checked_mul(d)
            .ok_or_else(|| cur.malformed(dim_at, "feature size overflows"))?;
        feature_shape.push(d);
    }
    let n_cols = cur.u32()? as usize;
    let mut columns: Vec<(String, Vec<i32>)> = Vec::with_capacity(n_cols);
    for _ in 0..n_cols {
        let name_at = cur.pos;
        let name_len = cur.u32()? as usize;
        if name_len == 0 || name_len > 64 {
            return Err(cur.malformed(name_at, format!("implausible column name length {name_len}")));
        }
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| cur.malformed(name_at + 4, "column name is not UTF-8"))?
            .to_string();
        let mut values = Vec::with_capacity(n);
        for chunk in cur.take(n * 4)?.chunks_exact(4) {
            values.push(i32::from_le_bytes(chunk.try_into().unwrap()));
        }
        columns.push((name, values));
    }
    let features_at = cur.pos;
    let feature_bytes = n
        .checked_mul(per_example)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| cur.malformed(features_at, "feature size overflows"))?;
    let mut features = Vec::with_capacity(n * per_example);
    for chunk in cur.take(feature_bytes)?.chunks_exact(4) {
        features.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    if cur.pos != bytes.len() {
        return Err(cur.malformed(
            cur.pos,
            format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        ));
    }

    let mut take_col = |name: &str| -> Result<Vec<i32>, DataError> {
        columns
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| columns.remove(i).1)
            .ok_or(DataError::MissingLabels(match name {
                "y" => "y",
                "e" => "e",
                _ => "screen",
            }))
    };
    let y = take_col("y")?;
    let e = take_col("e")?;
    let screen = match kind {
        DatasetKind::ColoredDigits => None,
        DatasetKind::Screen => Some(ScreenLabels {
            gene: take_col("gene")?,
            guide: take_col("guide")?,
            well: take_col("well")?,
        }),
    };
    if let Some((name, _)) = columns.first() {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            reason: format!("unexpected label column {name:?}"),
            offset: features_at,
        });
    }

    let ds = Dataset {
        kind,
        feature_shape,
        features,
        y,
        e,
        screen,
    };
    ds.validate()?;
    Ok(ds)
}

/// Reads a dataset from `path`.
pub fn load(path: &Path) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_dataset() -> Dataset {
        Dataset {
            kind: DatasetKind::ColoredDigits,
            feature_shape: vec![3, 4, 4],
            features: (0..5 * 48).map(|i| i as f32 * 0.25).collect(),
            y: vec![0, 1, 2, 3, 4],
            e: vec![0, 1, 0, 1, 2],
            screen: None,
        }
    }

    fn screen_dataset() -> Dataset {
        Dataset {
            kind: DatasetKind::Screen,
            feature_shape: vec![6],
            features: (0..4 * 6).map(|i| (i as f32).sin()).collect(),
            y: vec![0, 0, 1, 1],
            e: vec![0, 1, 0, 1],
            screen: Some(ScreenLabels {
                gene: vec![0, 0, 1, 1],
                guide: vec![0, 1, 2, 3],
                well: vec![0, 1, 0, 1],
            }),
        }
    }

    #[test]
    fn round_trips_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        for ds in [image_dataset(), screen_dataset()] {
            let path = dir.path().join("ds.scbd");
            save(&ds, &path).unwrap();
            let back = load(&path).unwrap();
            assert_eq!(back.kind, ds.kind);
            assert_eq!(back.feature_shape, ds.feature_shape);
            assert_eq!(back.features, ds.features);
            assert_eq!(back.y, ds.y);
            assert_eq!(back.e, ds.e);
            assert_eq!(back.screen, ds.screen);
        }
    }

    #[test]
    fn serialization_is_byte_deterministic() {
        let a = to_bytes(&screen_dataset()).unwrap();
        let b = to_bytes(&screen_dataset()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_bad_magic_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.scbd");
        save(&image_dataset(), &path).unwrap();
        let good = fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0..4].copy_from_slice(b"SCBX");
        match from_bytes(&path, &bad).unwrap_err() {
            DataError::BadMagic { expected, got, .. } => {
                assert_eq!(expected, "SCBD");
                assert_eq!(got, "SCBX");
            }
            other => panic!("expected BadMagic, got {other}"),
        }

        let mut bad = good.clone();
        bad[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&path, &bad).unwrap_err(),
            DataError::Version { got: 7, .. }
        ));

        let mut bad = good;
        bad[8..12].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&path, &bad).unwrap_err(),
            DataError::Malformed { offset: 8, .. }
        ));
    }

    #[test]
    fn reports_truncation_offset() {
        let bytes = to_bytes(&image_dataset()).unwrap();
        // Cut inside the dims block: header is 20 bytes, dims run to 32.
        match from_bytes(Path::new("x"), &bytes[..22]).unwrap_err() {
            DataError::Truncated {
                offset, needed, len, ..
            } => {
                assert_eq!(offset, 20);
                assert_eq!(needed, 2);
                assert_eq!(len, 22);
            }
            other => panic!("expected Truncated, got {other}"),
        }
        // Cut inside the feature payload.
        match from_bytes(Path::new("x"), &bytes[..bytes.len() - 3]).unwrap_err() {
            DataError::Truncated { needed: 3, .. } => {}
            other => panic!("expected Truncated, got {other}"),
        }
    }

    #[test]
    fn rejects_trailing_bytes_and_missing_columns() {
        let mut bytes = to_bytes(&image_dataset()).unwrap();
        bytes.push(0);
        assert!(matches!(
            from_bytes(Path::new("x"), &bytes).unwrap_err(),
            DataError::Malformed { .. }
        ));

        // A screen container whose label table lost the well column.
        let mut ds = screen_dataset();
        ds.screen = None;
        ds.kind = DatasetKind::Screen;
        let err = from_bytes(Path::new("x"), &to_bytes_unchecked(&ds)).unwrap_err();
        assert!(matches!(err, DataError::MissingLabels("screen")));
    }

    // Serializes without validate(), for building corrupt fixtures.
    fn to_bytes_unchecked(ds: &Dataset) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        push_u32(&mut out, VERSION);
        push_u32(&mut out, kind_code(ds.kind));
        push_u32(&mut out, ds.len() as u32);
        push_u32(&mut out, ds.feature_shape.len() as u32);
        for &d in &ds.feature_shape {
            push_u32(&mut out, d as u32);
        }
        push_u32(&mut out, 2);
        push_column(&mut out, "y", &ds.y);
        push_column(&mut out, "e", &ds.e);
        for &v in &ds.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    #[test]
    fn sidecar_path_appends_kv() {
        assert_eq!(
            sidecar_path(Path::new("/tmp/train.scbd")),
            Path::new("/tmp/train.scbd.kv")
        );
    }
}
