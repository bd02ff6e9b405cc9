//! Counterfactual swaps: decode mixed (z_c, z_s) pairs and measure whether
//! the style block really carries the environment color.

use crate::datagen::cmnist::foreground;
use crate::nets::{decode, encode_with, InputKind, ModelParams};
use crate::LabeledBatch;

use super::probe::LogReg;
use super::EvalError;

/// Outcome of a batch of swaps plus the tiled image grid.
#[derive(Debug, Clone)]
pub struct SwapReport {
    pub pairs: usize,
    /// Swapped reconstructions whose mean foreground hue lies on the donor's
    /// side of the red/green boundary.
    pub hue_crossed: usize,
    /// Swapped reconstructions whose hue is closer to the donor's than to
    /// the original's.
    pub hue_closer: usize,
    /// Swapped reconstructions whose re-encoded z_c keeps the probe's digit
    /// prediction for the original.
    pub digit_kept: usize,
    /// Per pair: hue of a's input, hue of b's input, hue of the swap.
    pub hues: Vec<(f32, f32, f32)>,
    /// Tile grid: `decode(z_c^a, z_s^a) | decode(z_c^b, z_s^a) |
    /// decode(z_c^a, z_s^b)` per row, RGB planes per tile.
    pub grid_width: usize,
    pub grid_height: usize,
    pub grid: Vec<f32>,
}

impl SwapReport {
    pub fn hue_crossed_rate(&self) -> f64 {
        self.hue_crossed as f64 / self.pairs as f64
    }

    pub fn digit_kept_rate(&self) -> f64 {
        self.digit_kept as f64 / self.pairs as f64
    }
}

/// Mean of R−G over foreground pixels of one `[3, h, w]` image; positive
/// means the red side of the boundary.
fn mean_hue(image: &[f32], h: usize, w: usize) -> f32 {
    let mask = foreground(image);
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (p, &fg) in mask.iter().enumerate() {
        if fg {
            sum += f64::from(image[p]) - f64::from(image[h * w + p]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        (sum / count as f64) as f32
    }
}

/// For each pair `(a[k], b[k])`: decodes the original, the content swap and
/// the style swap, tiles them into one image row, and scores how the style
/// swap `decode(z_c^a, z_s^b)` moved the foreground hue and whether a probe
/// on the re-encoded content embedding keeps its digit prediction.
pub fn counterfactual_swap(
    params: &ModelParams,
    a: &LabeledBatch,
    b: &LabeledBatch,
    probe: &LogReg,
) -> Result<SwapReport, EvalError> {
    let arch = params.scbd_arch()?;
    let (c, h, w) = match arch.input {
        InputKind::Image { c, h, w } => (c, h, w),
        InputKind::Vector { .. } => {
            return Err(EvalError::BadInput(
                "counterfactual swaps need an image model".into(),
            ))
        }
    };
    if !arch.with_decoder {
        return Err(EvalError::BadInput(
            "counterfactual swaps need a trained decoder".into(),
        ));
    }
    if arch.single_block {
        return Err(EvalError::BadInput(
            "counterfactual swaps need a style block".into(),
        ));
    }
    let n = a.len();
    if n == 0 || b.len() != n {
        return Err(EvalError::BadInput(format!(
            "swap batches must pair up, got {} and {}",
            n,
            b.len()
        )));
    }

    let enc_a = encode_with(params, &a.x, false)?;
    let enc_b = encode_with(params, &b.x, false)?;
    let zs_a = enc_a.z_s.as_ref().expect("two-block model");
    let zs_b = enc_b.z_s.as_ref().expect("two-block model");

    let own = decode(params, &enc_a.z_c, Some(zs_a))?;
    let content_swap = decode(params, &enc_b.z_c, Some(zs_a))?;
    let style_swap = decode(params, &enc_a.z_c, Some(zs_b))?;

    let reencoded = encode_with(params, &style_swap, true)?;
    let pred_orig = probe.predict(enc_a.z_c.data());
    let pred_swap = probe.predict(reencoded.z_c.data());

    let tile = c * h * w;
    let mut hues = Vec::with_capacity(n);
    let mut hue_crossed = 0;
    let mut hue_closer = 0;
    let mut digit_kept = 0;
    for k in 0..n {
        let hue_a = mean_hue(&a.x.data()[k * tile..(k + 1) * tile], h, w);
        let hue_b = mean_hue(&b.x.data()[k * tile..(k + 1) * tile], h, w);
        let hue_s = mean_hue(&style_swap.data()[k * tile..(k + 1) * tile], h, w);
        hues.push((hue_a, hue_b, hue_s));
        if (hue_s > 0.0) == (hue_b > 0.0) {
            hue_crossed += 1;
        }
        if (hue_s - hue_b).abs() < (hue_s - hue_a).abs() {
            hue_closer += 1;
        }
        if pred_swap[k] == pred_orig[k] {
            digit_kept += 1;
        }
    }

    // One row per pair, three tiles per row, pixels interleaved to RGB rows.
    let grid_width = 3 * w;
    let grid_height = n * h;
    let mut grid = vec![0.0f32; grid_width * grid_height * c];
    let sources = [&own, &content_swap, &style_swap];
    for k in 0..n {
        for (t, source) in sources.iter().enumerate() {
            let image = &source.data()[k * tile..(k + 1) * tile];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let gy = k * h + y;
                        let gx = t * w + x;
                        grid[(gy * grid_width + gx) * c + ch] =
                            image[ch * h * w + y * w + x].clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    Ok(SwapReport {
        pairs: n,
        hue_crossed,
        hue_closer,
        digit_kept,
        hues,
        grid_width,
        grid_height,
        grid,
    })
}
