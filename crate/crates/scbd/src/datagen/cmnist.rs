//! Colored digit images with environment-dependent palettes.
//!
//! Each example is a 32×32 RGB canvas with a single digit glyph on a black
//! background. The foreground color carries the environment/label shortcut:
//!
//! * environment 0: `R = 1.0`, `G = B = y/10`
//! * environment 1: `G = 1.0`, `R = B = (9-y)/10`
//! * held-out split: `R = G = B = 1.0` (no color signal at all)
//!
//! so color alone solves the training environments jointly but carries
//! nothing on the held-out split — only glyph shape transfers. Glyphs come
//! from the built-in 8×8 font, nearest-neighbor upscaled by a factor drawn
//! uniformly from [1.0, 1.5], placed with integer translation jitter of up to
//! ±4 px, and eroded by per-pixel Bernoulli(0.02) dropout; externally
//! ingested digit bitmaps are placed with jitter limited to the canvas
//! margin instead of being rescaled.
//!
//! Labels cycle 0..9 within every split so classes are exactly balanced.
//! The held-out split stores `e = 2` as a sentinel: its palette belongs to
//! neither training environment, and a distinct value keeps anything
//! environment-conditioned from silently treating it as seen data.

use rand::Rng;

use super::font;
use super::idx::DigitBitmaps;
use super::{DataError, Dataset, DatasetKind};
use crate::util::rng::substream;

/// Canvas side length.
pub const CANVAS: usize = 32;
/// Sentinel environment value used by the held-out split.
pub const TEST_ENV: i32 = 2;

/// Where digit glyphs come from.
pub enum GlyphSource {
    /// The embedded 8×8 font.
    Builtin,
    /// Externally ingested bitmaps (e.g. parsed from IDX files).
    External(DigitBitmaps),
}

/// Generator settings.
#[derive(Debug, Clone)]
pub struct CmnistConfig {
    /// Training examples per environment (two environments).
    pub n_per_env: usize,
    /// Held-out examples.
    pub n_test: usize,
    /// Master seed; the generator is a pure function of config.
    pub seed: u64,
}

impl Default for CmnistConfig {
    fn default() -> Self {
        Self {
            n_per_env: 2000,
            n_test: 1000,
            seed: 0,
        }
    }
}

/// The three generated splits. Validation is 10% of each training
/// environment, stratified by label.
pub struct CmnistSplits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Foreground color for a digit in an environment.
fn palette(env: i32, y: i32) -> (f32, f32, f32) {
    let shade = y as f32 / 10.0;
    let inv = (9 - y) as f32 / 10.0;
    match env {
        0 => (1.0, shade, shade),
        1 => (inv, 1.0, inv),
        _ => (1.0, 1.0, 1.0),
    }
}

fn render_builtin<R: Rng>(mask: &mut [bool], y: i32, rng: &mut R) {
    let glyph = font::glyph(y as u8);
    let scale: f64 = rng.gen_range(1.0..=1.5);
    let side = ((8.0 * scale).round() as usize).clamp(8, 12);
    let base = (CANVAS - side) / 2;
    let dy = rng.gen_range(-4i32..=4);
    let dx = rng.gen_range(-4i32..=4);
    for r in 0..side {
        for c in 0..side {
            if glyph[r * 8 / side][c * 8 / side] {
                let py = (base + r) as i32 + dy;
                let px = (base + c) as i32 + dx;
                mask[py as usize * CANVAS + px as usize] = true;
            }
        }
    }
}

fn render_external<R: Rng>(
    mask: &mut [bool],
    bitmaps: &DigitBitmaps,
    y: i32,
    rng: &mut R,
) -> Result<(), DataError> {
    let pool = bitmaps.of_digit(y as u8);
    if pool.is_empty() {
        return Err(DataError::BadConfig(format!(
            "external glyphs have no examples of digit {y}"
        )));
    }
    let pick = pool[rng.gen_range(0..pool.len())];
    let (h, w) = (bitmaps.h, bitmaps.w);
    let (base_y, base_x) = ((CANVAS - h) / 2, (CANVAS - w) / 2);
    let jitter_y = base_y.min(4) as i32;
    let jitter_x = base_x.min(4) as i32;
    let dy = rng.gen_range(-jitter_y..=jitter_y);
    let dx = rng.gen_range(-jitter_x..=jitter_x);
    let pixels = bitmaps.pixels_of(pick);
    for r in 0..h {
        for c in 0..w {
            if pixels[r * w + c] >= 128 {
                let py = (base_y + r) as i32 + dy;
                let px = (base_x + c) as i32 + dx;
                mask[py as usize * CANVAS + px as usize] = true;
            }
        }
    }
    Ok(())
}

fn render_example<R: Rng>(
    features: &mut Vec<f32>,
    glyphs: &GlyphSource,
    y: i32,
    env: i32,
    rng: &mut R,
) -> Result<(), DataError> {
    let mut mask = vec![false; CANVAS * CANVAS];
    match glyphs {
        GlyphSource::Builtin => render_builtin(&mut mask, y, rng),
        GlyphSource::External(bitmaps) => render_external(&mut mask, bitmaps, y, rng)?,
    }
    for on in mask.iter_mut() {
        if *on && rng.gen::<f64>() < 0.02 {
            *on = false;
        }
    }
    let (cr, cg, cb) = palette(env, y);
    let base = features.len();
    features.resize(base + 3 * CANVAS * CANVAS, 0.0);
    let img = &mut features[base..];
    for (i, &on) in mask.iter().enumerate() {
        if on {
            img[i] = cr;
            img[CANVAS * CANVAS + i] = cg;
            img[2 * CANVAS * CANVAS + i] = cb;
        }
    }
    Ok(())
}

fn generate_split(
    glyphs: &GlyphSource,
    n: usize,
    env: i32,
    stream: &str,
    seed: u64,
) -> Result<Dataset, DataError> {
    let mut features = Vec::with_capacity(n * 3 * CANVAS * CANVAS);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as i32;
        let mut rng = substream(seed, stream, i as u64);
        render_example(&mut features, glyphs, label, env, &mut rng)?;
        y.push(label);
    }
    Ok(Dataset {
        kind: DatasetKind::ColoredDigits,
        feature_shape: vec![3, CANVAS, CANVAS],
        features,
        y,
        e: vec![env; n],
        screen: None,
    })
}

fn concat(parts: Vec<Dataset>) -> Dataset {
    let mut iter = parts.into_iter();
    let mut out = iter.next().expect("at least one part");
    for part in iter {
        out.features.extend_from_slice(&part.features);
        out.y.extend_from_slice(&part.y);
        out.e.extend_from_slice(&part.e);
    }
    out
}

/// Generates the three splits for `cfg`.
pub fn generate(cfg: &CmnistConfig, glyphs: &GlyphSource) -> Result<CmnistSplits, DataError> {
    if cfg.n_per_env < 10 || cfg.n_test == 0 {
        return Err(DataError::BadConfig(
            "colored digits need n_per_env >= 10 and n_test >= 1".into(),
        ));
    }
    let mut train_parts = Vec::new();
    let mut val_parts = Vec::new();
    for env in 0..2 {
        let full = generate_split(
            glyphs,
            cfg.n_per_env,
            env,
            &format!("cmnist-train-e{env}"),
            cfg.seed,
        )?;
        let (rest, held) = super::stratified_split(&full, 0.1, cfg.seed ^ (env as u64 + 1));
        train_parts.push(rest);
        val_parts.push(held);
    }
    let test = generate_split(glyphs, cfg.n_test, TEST_ENV, "cmnist-test", cfg.seed)?;
    Ok(CmnistSplits {
        train: concat(train_parts),
        val: concat(val_parts),
        test,
    })
}

/// Foreground mask of a rendered example (any channel lit).
pub fn foreground(image: &[f32]) -> Vec<bool> {
    let hw = CANVAS * CANVAS;
    debug_assert_eq!(image.len(), 3 * hw);
    (0..hw)
        .map(|i| image[i] > 0.05 || image[hw + i] > 0.05 || image[2 * hw + i] > 0.05)
        .collect()
}
