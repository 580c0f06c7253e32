//! Seeded label-preserving augmentation, the class-balancing expansion that
//! equalizes class counts, and the stratified train/validation split.
//!
//! Determinism contract: every augmented item draws from its own RNG stream
//! keyed by `hash(seed, item id)`, so results are independent of iteration
//! order and safe to parallelize.

use crate::dataio::{SliceDataset, SliceRecord};
use crate::imaging::ImageGray;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("class {0} has no samples")]
    EmptyClass(u8),
    #[error("class {label} has only {count} samples; at least 2 required for a split")]
    ClassTooSmall { label: u8, count: usize },
    #[error("target {target} below class {label} count {count}")]
    TargetBelowCount {
        label: u8,
        count: usize,
        target: usize,
    },
    #[error("invalid policy: {0}")]
    BadPolicy(String),
}

/// One sampled transform; fields apply in the order rotate, flips, shift,
/// gamma, noise.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformSpec {
    pub rotate_deg: f64,
    pub flip_h: bool,
    pub flip_v: bool,
    /// (dx, dy) as fractions of width/height; positive moves content
    /// right/down.
    pub shift_frac: (f64, f64),
    pub gamma: f64,
    pub noise_sigma: f64,
}

impl TransformSpec {
    pub fn identity() -> Self {
        Self {
            rotate_deg: 0.0,
            flip_h: false,
            flip_v: false,
            shift_frac: (0.0, 0.0),
            gamma: 1.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub rotate_deg: (f64, f64),
    pub shift_frac: (f64, f64),
    pub gamma: (f64, f64),
    pub noise_sigma: (f64, f64),
    pub flip_h_prob: f64,
    pub flip_v_prob: f64,
    pub target_per_class: usize,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            rotate_deg: (-15.0, 15.0),
            shift_frac: (-0.1, 0.1),
            gamma: (0.8, 1.2),
            noise_sigma: (0.0, 0.02),
            flip_h_prob: 0.5,
            flip_v_prob: 0.5,
            target_per_class: 2500,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let ranges = [
            ("rotate_deg", self.rotate_deg),
            ("shift_frac", self.shift_frac),
            ("gamma", self.gamma),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(AugmentError::BadPolicy(format!("{name} range ({lo}, {hi})")));
            }
        }
        for (name, p) in [("flip_h_prob", self.flip_h_prob), ("flip_v_prob", self.flip_v_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::BadPolicy(format!("{name} = {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// FNV-1a over the seed and a tag; used to derive independent RNG streams.
pub(crate) fn stream_seed(seed: u64, tag: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in seed.to_le_bytes() {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    for &b in tag {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

/// Bilinear sample with zero fill outside the image.
fn sample_zero_fill(img: &ImageGray, r: f32, c: f32) -> f32 {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let at = |ri: f32, ci: f32| -> f32 {
        if ri < 0.0 || ci < 0.0 || ri >= img.height as f32 || ci >= img.width as f32 {
            0.0
        } else {
            img.get(ri as usize, ci as usize)
        }
    };
    let top = {
        let a = at(r0, c0);
        let b = at(r0, c0 + 1.0);
        a + fc * (b - a)
    };
    let bot = {
        let a = at(r0 + 1.0, c0);
        let b = at(r0 + 1.0, c0 + 1.0);
        a + fc * (b - a)
    };
    top + fr * (bot - top)
}

fn rotate_bilinear(img: &ImageGray, degrees: f64) -> ImageGray {
    let (h, w) = (img.height, img.width);
    let theta = degrees.to_radians();
    let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
    let cr = (h as f32 - 1.0) / 2.0;
    let cc = (w as f32 - 1.0) / 2.0;
    let mut out = ImageGray::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            // Inverse rotation of the destination coordinate.
            let dr = r as f32 - cr;
            let dc = c as f32 - cc;
            let src_r = cos * dr + sin * dc + cr;
            let src_c = -sin * dr + cos * dc + cc;
            out.set(r, c, sample_zero_fill(img, src_r, src_c));
        }
    }
    out
}

fn shift_bilinear(img: &ImageGray, dx_frac: f64, dy_frac: f64) -> ImageGray {
    let (h, w) = (img.height, img.width);
    let dy = dy_frac as f32 * h as f32;
    let dx = dx_frac as f32 * w as f32;
    let mut out = ImageGray::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            out.set(r, c, sample_zero_fill(img, r as f32 - dy, c as f32 - dx));
        }
    }
    out
}

fn flip(img: &ImageGray, horizontal: bool, vertical: bool) -> ImageGray {
    let (h, w) = (img.height, img.width);
    let mut out = ImageGray::zeros(h, w);
    for r in 0..h {
        let sr = if vertical { h - 1 - r } else { r };
        for c in 0..w {
            let sc = if horizontal { w - 1 - c } else { c };
            out.set(r, c, img.get(sr, sc));
        }
    }
    out
}

/// Applies a transform: rotate -> flips -> shift -> gamma -> seeded Gaussian
/// noise -> clamp to `[0, 1]`. Output dims equal input dims.
pub fn apply_transform(img: &ImageGray, spec: &TransformSpec, noise_seed: u64) -> ImageGray {
    let mut out = if spec.rotate_deg != 0.0 {
        rotate_bilinear(img, spec.rotate_deg)
    } else {
        img.clone()
    };
    if spec.flip_h || spec.flip_v {
        out = flip(&out, spec.flip_h, spec.flip_v);
    }
    if spec.shift_frac != (0.0, 0.0) {
        out = shift_bilinear(&out, spec.shift_frac.0, spec.shift_frac.1);
    }
    if spec.gamma != 1.0 {
        let g = spec.gamma as f32;
        for v in out.pixels.iter_mut() {
            *v = v.max(0.0).powf(g);
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let dist = Normal::new(0.0f64, spec.noise_sigma).expect("valid sigma");
        for v in out.pixels.iter_mut() {
            *v += dist.sample(&mut rng) as f32;
        }
    }
    for v in out.pixels.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Draws a transform uniformly within the policy ranges. The draw order is
/// fixed (rotate, flip_h, flip_v, dx, dy, gamma, sigma) so a given RNG
/// state always yields the same spec.
pub fn sample_spec(policy: &AugmentPolicy, rng: &mut impl Rng) -> TransformSpec {
    let uniform = |rng: &mut dyn FnMut() -> f64, (lo, hi): (f64, f64)| {
        if hi > lo {
            lo + rng() * (hi - lo)
        } else {
            lo
        }
    };
    let mut draw = || rng.random::<f64>();
    let rotate_deg = uniform(&mut draw, policy.rotate_deg);
    let flip_h = draw() < policy.flip_h_prob;
    let flip_v = draw() < policy.flip_v_prob;
    let dx = uniform(&mut draw, policy.shift_frac);
    let dy = uniform(&mut draw, policy.shift_frac);
    let gamma = uniform(&mut draw, policy.gamma);
    let noise_sigma = uniform(&mut draw, policy.noise_sigma);
    TransformSpec {
        rotate_deg,
        flip_h,
        flip_v,
        shift_frac: (dx, dy),
        gamma,
        noise_sigma,
    }
}

/// Expands each class to exactly `target_per_class` samples.
///
/// Originals are all retained; per class, originals are cycled round-robin
/// in id order and each copy is transformed with a spec drawn from the
/// stream `hash(seed, augmented id)`. Augmented ids are `<origid>#aug<k>`.
pub fn balance_augment(
    train: &SliceDataset,
    policy: &AugmentPolicy,
) -> Result<SliceDataset, AugmentError> {
    policy.validate()?;
    let counts = train.counts_per_class();
    for (&label, &count) in &counts {
        if count == 0 {
            return Err(AugmentError::EmptyClass(label));
        }
        if policy.target_per_class < count {
            return Err(AugmentError::TargetBelowCount {
                label,
                count,
                target: policy.target_per_class,
            });
        }
    }
    let mut records = train.records.clone();
    for (&label, &count) in &counts {
        let mut originals: Vec<&SliceRecord> = train
            .records
            .iter()
            .filter(|r| r.label == label)
            .collect();
        originals.sort_by(|a, b| a.id.cmp(&b.id));
        let deficit = policy.target_per_class - count;
        for k in 0..deficit {
            let orig = originals[k % originals.len()];
            let copy_index = k / originals.len() + 1;
            let id = format!("{}#aug{}", orig.id, copy_index);
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(policy.seed, id.as_bytes()));
            let spec = sample_spec(policy, &mut rng);
            let noise_seed = rng.next_u64();
            records.push(SliceRecord {
                id,
                label,
                image: apply_transform(&orig.image, &spec, noise_seed),
            });
        }
    }
    Ok(SliceDataset::new(records))
}

/// Stratified split: per class, items are shuffled by a seeded RNG and the
/// first `round(fraction * n)` go to the train side.
pub fn stratified_split(
    items: &SliceDataset,
    spec: &SplitSpec,
) -> Result<(SliceDataset, SliceDataset), AugmentError> {
    use rand::seq::SliceRandom;
    let counts = items.counts_per_class();
    for (&label, &count) in &counts {
        if count < 2 {
            return Err(AugmentError::ClassTooSmall { label, count });
        }
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for &label in counts.keys() {
        let mut indices: Vec<usize> = items
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.label == label)
            .map(|(i, _)| i)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, &[label]));
        indices.shuffle(&mut rng);
        let n_train = (spec.train_fraction * indices.len() as f64).round() as usize;
        for (k, &i) in indices.iter().enumerate() {
            if k < n_train {
                train.push(items.records[i].clone());
            } else {
                val.push(items.records[i].clone());
            }
        }
    }
    Ok((SliceDataset::new(train), SliceDataset::new(val)))
}
