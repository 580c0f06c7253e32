//! Contrast Limited Adaptive Histogram Equalization over a fixed 256-bin
//! quantization, with deterministic excess redistribution so output is
//! bit-reproducible.

use super::{lerp_clamped, ImageGray};
use serde::{Deserialize, Serialize};

pub const CLAHE_BINS: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ClaheParams {
    /// Tile grid as (rows, cols); clamped to the image dims when larger.
    pub tiles: (usize, usize),
    /// Histogram clip limit as a multiple of the uniform bin count.
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        Self {
            tiles: (8, 8),
            clip_limit: 2.0,
        }
    }
}

#[inline]
fn quantize(v: f32) -> usize {
    ((v * CLAHE_BINS as f32).floor() as i64).clamp(0, CLAHE_BINS as i64 - 1) as usize
}

/// Per-tile equalization mapping: clipped histogram CDF scaled to [0,1].
fn tile_mapping(hist: &mut [u64; CLAHE_BINS], tile_pixels: u64, clip_limit: f64) -> [f32; CLAHE_BINS] {
    let clip = (clip_limit * tile_pixels as f64 / CLAHE_BINS as f64).ceil() as u64;
    let mut excess = 0u64;
    for count in hist.iter_mut() {
        if *count > clip {
            excess += *count - clip;
            *count = clip;
        }
    }
    // Single-pass redistribution: uniform share to every bin, remainder one
    // unit per bin from bin 0 upward.
    let share = excess / CLAHE_BINS as u64;
    let remainder = (excess % CLAHE_BINS as u64) as usize;
    for (b, count) in hist.iter_mut().enumerate() {
        *count += share + u64::from(b < remainder);
    }
    let mut mapping = [0.0f32; CLAHE_BINS];
    let mut cdf = 0u64;
    for b in 0..CLAHE_BINS {
        cdf += hist[b];
        mapping[b] = (cdf as f64 / tile_pixels as f64) as f32;
    }
    mapping
}

/// Applies CLAHE to an image with values in [0, 1]; output stays in [0, 1].
///
/// Each pixel is mapped by bilinear interpolation between the equalization
/// mappings of the four surrounding tile centers, clamped at the borders.
pub fn clahe(img: &ImageGray, params: &ClaheParams) -> ImageGray {
    let (h, w) = (img.height, img.width);
    if h == 0 || w == 0 {
        return img.clone();
    }
    let tile_rows = params.tiles.0.clamp(1, h);
    let tile_cols = params.tiles.1.clamp(1, w);

    // Tile boundaries by integer rounding; tile (ti, tj) covers
    // rows [row_b[ti], row_b[ti+1]) x cols [col_b[tj], col_b[tj+1]).
    let row_b: Vec<usize> = (0..=tile_rows).map(|i| i * h / tile_rows).collect();
    let col_b: Vec<usize> = (0..=tile_cols).map(|j| j * w / tile_cols).collect();

    let mut mappings = vec![[0.0f32; CLAHE_BINS]; tile_rows * tile_cols];
    for ti in 0..tile_rows {
        for tj in 0..tile_cols {
            let mut hist = [0u64; CLAHE_BINS];
            for r in row_b[ti]..row_b[ti + 1] {
                for c in col_b[tj]..col_b[tj + 1] {
                    hist[quantize(img.get(r, c))] += 1;
                }
            }
            let tile_pixels =
                ((row_b[ti + 1] - row_b[ti]) * (col_b[tj + 1] - col_b[tj])) as u64;
            mappings[ti * tile_cols + tj] = tile_mapping(&mut hist, tile_pixels, params.clip_limit);
        }
    }

    // Tile centers in pixel coordinates.
    let center_r: Vec<f32> = (0..tile_rows)
        .map(|i| (row_b[i] + row_b[i + 1] - 1) as f32 / 2.0)
        .collect();
    let center_c: Vec<f32> = (0..tile_cols)
        .map(|j| (col_b[j] + col_b[j + 1] - 1) as f32 / 2.0)
        .collect();

    // For a coordinate, find the bracketing tile pair and interpolation weight.
    let bracket = |centers: &[f32], x: f32| -> (usize, usize, f32) {
        if x <= centers[0] {
            return (0, 0, 0.0);
        }
        let last = centers.len() - 1;
        if x >= centers[last] {
            return (last, last, 0.0);
        }
        let mut i = 0;
        while x >= centers[i + 1] {
            i += 1;
        }
        let t = (x - centers[i]) / (centers[i + 1] - centers[i]);
        (i, i + 1, t)
    };

    let mut out = ImageGray::zeros(h, w);
    for r in 0..h {
        let (tr0, tr1, fr) = bracket(&center_r, r as f32);
        for c in 0..w {
            let (tc0, tc1, fc) = bracket(&center_c, c as f32);
            let b = quantize(img.get(r, c));
            let m00 = mappings[tr0 * tile_cols + tc0][b];
            let m01 = mappings[tr0 * tile_cols + tc1][b];
            let m10 = mappings[tr1 * tile_cols + tc0][b];
            let m11 = mappings[tr1 * tile_cols + tc1][b];
            let top = lerp_clamped(m00, m01, fc);
            let bot = lerp_clamped(m10, m11, fc);
            out.set(r, c, lerp_clamped(top, bot, fr));
        }
    }
    out
}
