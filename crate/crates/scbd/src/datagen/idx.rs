//! Reader for the classic IDX image/label file pair.
//!
//! Only the unsigned-byte layouts used by digit datasets are supported:
//! images are `magic 0x00000803` followed by three big-endian u32 dimensions
//! (count, rows, cols), labels are `magic 0x00000801` followed by one. All
//! parse errors carry the byte offset at which the file stopped making sense.

use std::fs;
use std::path::Path;

use super::DataError;

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

/// Digit bitmaps bucketed by label, ready to serve as a glyph source.
#[derive(Debug)]
pub struct DigitBitmaps {
    /// Bitmap height in pixels.
    pub h: usize,
    /// Bitmap width in pixels.
    pub w: usize,
    pixels: Vec<u8>,
    by_digit: [Vec<usize>; 10],
}

impl DigitBitmaps {
    /// Loads an images/labels file pair.
    pub fn from_idx(images: &Path, labels: &Path) -> Result<Self, DataError> {
        let (h, w, pixels) = read_images(images)?;
        let y = read_labels(labels)?;
        let n = pixels.len() / (h * w);
        if y.len() != n {
            return Err(DataError::Malformed {
                path: labels.to_path_buf(),
                reason: format!("label count {} does not match image count {n}", y.len()),
                offset: 4,
            });
        }
        let mut by_digit: [Vec<usize>; 10] = Default::default();
        for (i, &label) in y.iter().enumerate() {
            if label > 9 {
                return Err(DataError::Malformed {
                    path: labels.to_path_buf(),
                    reason: format!("label {label} out of range 0..=9"),
                    offset: 8 + i,
                });
            }
            by_digit[label as usize].push(i);
        }
        Ok(Self {
            h,
            w,
            pixels,
            by_digit,
        })
    }

    /// Indices of all bitmaps labeled `digit`.
    pub fn of_digit(&self, digit: u8) -> &[usize] {
        &self.by_digit[digit as usize]
    }

    /// Row-major pixels of bitmap `i`.
    pub fn pixels_of(&self, i: usize) -> &[u8] {
        let px = self.h * self.w;
        &self.pixels[i * px..(i + 1) * px]
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32, DataError> {
    let end = offset + 4;
    if bytes.len() < end {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset,
            needed: end - bytes.len(),
            len: bytes.len(),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

fn read_images(path: &Path) -> Result<(usize, usize, Vec<u8>), DataError> {
    let bytes = read_file(path)?;
    let magic = read_u32(path, &bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: format!("{IMAGE_MAGIC:#010x}"),
            got: format!("{magic:#010x}"),
        });
    }
    let n = read_u32(path, &bytes, 4)? as usize;
    let h = read_u32(path, &bytes, 8)? as usize;
    let w = read_u32(path, &bytes, 12)? as usize;
    if n == 0 || h == 0 || w == 0 {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            reason: format!("degenerate dimensions {n}x{h}x{w}"),
            offset: 4,
        });
    }
    if h > super::cmnist::CANVAS || w > super::cmnist::CANVAS {
        return Err(DataError::Malformed {
            path: path.to_path_buf(),
            reason: format!(
                "{h}x{w} bitmaps do not fit the {0}x{0} canvas",
                super::cmnist::CANVAS
            ),
            offset: 8,
        });
    }
    let needed = n * h * w;
    if bytes.len() < 16 + needed {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: 16 + needed - bytes.len(),
            len: bytes.len(),
        });
    }
    Ok((h, w, bytes[16..16 + needed].to_vec()))
}

fn read_labels(path: &Path) -> Result<Vec<u8>, DataError> {
    let bytes = read_file(path)?;
    let magic = read_u32(path, &bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: format!("{LABEL_MAGIC:#010x}"),
            got: format!("{magic:#010x}"),
        });
    }
    let n = read_u32(path, &bytes, 4)? as usize;
    if bytes.len() < 8 + n {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
            needed: 8 + n - bytes.len(),
            len: bytes.len(),
        });
    }
    Ok(bytes[8..8 + n].to_vec())
}
