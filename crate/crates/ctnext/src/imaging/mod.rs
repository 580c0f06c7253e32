//! Deterministic CT slice preprocessing: slice-window selection, orientation,
//! bilinear resize, min-max normalization, CLAHE, lung masking and two-lung
//! ROI cropping into the 250x250 model input.

mod clahe;
mod regions;

pub use clahe::{clahe, ClaheParams};
pub use regions::{
    connected_components, extract_lung_roi, lung_mask, BinaryMask, Region, RoiFallback, RoiResult,
};

use crate::dataio::Volume;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ROI_HEIGHT: usize = 250;
pub const ROI_WIDTH: usize = 250;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("empty slice selection: lo={lo}, hi={hi}, nz={nz}")]
    EmptySelection { lo: f64, hi: f64, nz: usize },
    #[error("quarter turns must be in 0..=3, got {0}")]
    BadQuarterTurns(u32),
}

/// Single-channel image with intensities stored row-major as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl ImageGray {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count must match dims");
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        self.pixels[row * self.width + col] = value;
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.pixels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Selects the axial slice window `[floor(lo*nz), ceil(hi*nz))` from a volume.
///
/// The window drops the uninformative top and bottom of the scan; defaults
/// keep the central 20%..80%.
pub fn select_slices(volume: &Volume, lo: f64, hi: f64) -> Result<Vec<ImageGray>, ImagingError> {
    let nz = volume.dims.2;
    if !(0.0..1.0).contains(&lo) || hi <= lo || hi > 1.0 || nz == 0 {
        return Err(ImagingError::EmptySelection { lo, hi, nz });
    }
    let start = (lo * nz as f64).floor() as usize;
    let end = (hi * nz as f64).ceil() as usize;
    if start >= end {
        return Err(ImagingError::EmptySelection { lo, hi, nz });
    }
    Ok((start..end).map(|z| volume.slice(z)).collect())
}

/// Expected slice count for `select_slices` with the same arguments.
pub fn selected_slice_count(nz: usize, lo: f64, hi: f64) -> usize {
    let start = (lo * nz as f64).floor() as usize;
    let end = (hi * nz as f64).ceil() as usize;
    end.saturating_sub(start)
}

/// Rotates counter-clockwise by `quarter_turns * 90` degrees.
///
/// One turn maps pixel `(r, c)` to `(width - 1 - c, r)`; dims swap on odd
/// turns.
pub fn orient(img: &ImageGray, quarter_turns: u32) -> Result<ImageGray, ImagingError> {
    if quarter_turns > 3 {
        return Err(ImagingError::BadQuarterTurns(quarter_turns));
    }
    let (h, w) = (img.height, img.width);
    let out = match quarter_turns {
        0 => img.clone(),
        1 => {
            let mut out = ImageGray::zeros(w, h);
            for r in 0..h {
                for c in 0..w {
                    out.set(w - 1 - c, r, img.get(r, c));
                }
            }
            out
        }
        2 => {
            let mut out = ImageGray::zeros(h, w);
            for r in 0..h {
                for c in 0..w {
                    out.set(h - 1 - r, w - 1 - c, img.get(r, c));
                }
            }
            out
        }
        _ => {
            let mut out = ImageGray::zeros(w, h);
            for r in 0..h {
                for c in 0..w {
                    out.set(c, h - 1 - r, img.get(r, c));
                }
            }
            out
        }
    };
    Ok(out)
}

/// Linear interpolation in the `a + t*(b-a)` form, clamped to the endpoint
/// interval so rounding can never escape `[min(a,b), max(a,b)]`.
#[inline]
fn lerp_clamped(a: f32, b: f32, t: f32) -> f32 {
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

/// Bilinear resize with half-pixel-center sampling.
///
/// Source coordinates are `src = (dst + 0.5) * (in / out) - 0.5`, clamped to
/// the border. Output values stay within the input's value range.
pub fn resize_bilinear(img: &ImageGray, out_h: usize, out_w: usize) -> ImageGray {
    assert!(out_h >= 1 && out_w >= 1, "output dims must be positive");
    let (h, w) = (img.height, img.width);
    let scale_r = h as f32 / out_h as f32;
    let scale_c = w as f32 / out_w as f32;
    let mut out = ImageGray::zeros(out_h, out_w);
    for dr in 0..out_h {
        let src_r = ((dr as f32 + 0.5) * scale_r - 0.5).clamp(0.0, (h - 1) as f32);
        let r0 = src_r.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        let fr = src_r - r0 as f32;
        for dc in 0..out_w {
            let src_c = ((dc as f32 + 0.5) * scale_c - 0.5).clamp(0.0, (w - 1) as f32);
            let c0 = src_c.floor() as usize;
            let c1 = (c0 + 1).min(w - 1);
            let fc = src_c - c0 as f32;
            let top = lerp_clamped(img.get(r0, c0), img.get(r0, c1), fc);
            let bot = lerp_clamped(img.get(r1, c0), img.get(r1, c1), fc);
            out.set(dr, dc, lerp_clamped(top, bot, fr));
        }
    }
    out
}

/// Rescales to `[0, 1]` via `(v - min) / (max - min)`; constant images map to
/// all zeros.
pub fn normalize_minmax(img: &ImageGray) -> ImageGray {
    let (lo, hi) = img.min_max();
    normalize_with_range(img, lo, hi)
}

/// Min-max normalization against an externally supplied range (used for
/// per-volume normalization where the range spans all slices).
pub fn normalize_with_range(img: &ImageGray, lo: f32, hi: f32) -> ImageGray {
    let span = hi - lo;
    if span <= 0.0 {
        return ImageGray::zeros(img.height, img.width);
    }
    let pixels = img.pixels.iter().map(|&v| (v - lo) / span).collect();
    ImageGray::new(img.height, img.width, pixels)
}

/// Pipeline configuration for turning a raw volume into 250x250 model inputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    pub slice_lo: f64,
    pub slice_hi: f64,
    pub quarter_turns: u32,
    pub resize_to: usize,
    pub clahe: ClaheParams,
    pub lung_threshold: f32,
    /// Normalize against the volume-wide range instead of per slice.
    pub per_volume_normalize: bool,
    /// Run CLAHE before ROI extraction (on the resized slice) rather than
    /// after (on the 250x250 crop).
    pub clahe_before_roi: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            slice_lo: 0.2,
            slice_hi: 0.8,
            quarter_turns: 1,
            resize_to: 512,
            clahe: ClaheParams::default(),
            lung_threshold: 0.4,
            per_volume_normalize: false,
            clahe_before_roi: true,
        }
    }
}

/// One preprocessed slice plus the ROI bookkeeping for provenance logs.
#[derive(Debug, Clone)]
pub struct PreprocessedSlice {
    pub slice_index: usize,
    pub roi: RoiResult,
}

/// Runs the slice pipeline on a single already-selected slice:
/// orient -> resize -> normalize -> CLAHE -> mask -> ROI.
pub fn preprocess_slice(
    slice: &ImageGray,
    cfg: &PreprocessConfig,
    volume_range: Option<(f32, f32)>,
) -> Result<RoiResult, ImagingError> {
    let oriented = orient(slice, cfg.quarter_turns)?;
    let resized = resize_bilinear(&oriented, cfg.resize_to, cfg.resize_to);
    let normalized = match volume_range {
        Some((lo, hi)) => normalize_with_range(&resized, lo, hi),
        None => normalize_minmax(&resized),
    };
    let roi = if cfg.clahe_before_roi {
        let enhanced = clahe(&normalized, &cfg.clahe);
        let mask = lung_mask(&enhanced, cfg.lung_threshold);
        extract_lung_roi(&enhanced, &mask)
    } else {
        let mask = lung_mask(&normalized, cfg.lung_threshold);
        let mut roi = extract_lung_roi(&normalized, &mask);
        roi.image = clahe(&roi.image, &cfg.clahe);
        roi
    };
    Ok(roi)
}

/// Applies `preprocess_slice` to every slice in the configured window.
pub fn preprocess_volume(
    volume: &Volume,
    cfg: &PreprocessConfig,
) -> Result<Vec<PreprocessedSlice>, ImagingError> {
    let slices = select_slices(volume, cfg.slice_lo, cfg.slice_hi)?;
    let start = (cfg.slice_lo * volume.dims.2 as f64).floor() as usize;
    let volume_range = if cfg.per_volume_normalize {
        Some(volume.min_max())
    } else {
        None
    };
    slices
        .iter()
        .enumerate()
        .map(|(i, slice)| {
            Ok(PreprocessedSlice {
                slice_index: start + i,
                roi: preprocess_slice(slice, cfg, volume_range)?,
            })
        })
        .collect()
}
