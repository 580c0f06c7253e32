//! Synthetic lung phantoms: bright body ellipse on dark background with two
//! dark interior lung ellipsoids; positive phantoms carry textured
//! mid-intensity blobs strictly inside the lungs (opacity stand-ins). The
//! generator is deterministic per seed and emits valid NIfTI-1 volumes, so
//! the whole pipeline and training acceptance run without clinical data.

use crate::augment::stream_seed;
use crate::dataio::{
    write_nifti, write_slice_dataset, DataError, DatasetManifest, SliceDataset, SliceRecord,
    Volume,
};
use crate::imaging::{preprocess_volume, ImagingError, PreprocessConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
}

/// Intensity layers are ordered background < lungs < lesions < body, and
/// lesions are placed strictly inside the lung ellipsoids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    /// Volume dims (nx, ny, nz).
    pub dims: (usize, usize, usize),
    pub background_intensity: (f32, f32),
    pub lung_intensity: (f32, f32),
    pub lesion_intensity: (f32, f32),
    pub body_intensity: (f32, f32),
    pub lesion_count: (usize, usize),
    /// Lesion radius as a fraction of the lung's normalized radius.
    pub lesion_radius_frac: (f64, f64),
    /// Amplitude of the value-noise texture inside lesions. Opacities are
    /// inhomogeneous; the texture is also what makes them visible to
    /// pattern-sensitive features rather than raw brightness alone.
    pub lesion_texture_amp: f32,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: (128, 128, 40),
            background_intensity: (0.01, 0.04),
            lung_intensity: (0.08, 0.12),
            lesion_intensity: (0.35, 0.55),
            body_intensity: (0.78, 0.9),
            lesion_count: (2, 5),
            lesion_radius_frac: (0.25, 0.45),
            lesion_texture_amp: 0.3,
            seed: 0,
        }
    }
}

/// Seeded 3-D value noise: trilinear interpolation of a hashed lattice.
fn value_noise(seed: u64, x: f64, y: f64, z: f64) -> f64 {
    let lattice = |ix: i64, iy: i64, iz: i64| -> f64 {
        let mut h = 0xcbf29ce484222325u64;
        for b in seed
            .to_le_bytes()
            .iter()
            .chain(ix.to_le_bytes().iter())
            .chain(iy.to_le_bytes().iter())
            .chain(iz.to_le_bytes().iter())
        {
            h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
        }
        (h >> 11) as f64 / (1u64 << 53) as f64
    };
    let (x0, y0, z0) = (x.floor(), y.floor(), z.floor());
    let (fx, fy, fz) = (x - x0, y - y0, z - z0);
    let (ix, iy, iz) = (x0 as i64, y0 as i64, z0 as i64);
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                acc += wx * wy * wz * lattice(ix + dx, iy + dy, iz + dz);
            }
        }
    }
    acc
}

struct Ellipsoid {
    center: (f64, f64, f64),
    semi: (f64, f64, f64),
}

impl Ellipsoid {
    /// Normalized squared radius; <= 1 means inside.
    fn norm2(&self, x: f64, y: f64, z: f64) -> f64 {
        let dx = (x - self.center.0) / self.semi.0;
        let dy = (y - self.center.1) / self.semi.1;
        let dz = (z - self.center.2) / self.semi.2;
        dx * dx + dy * dy + dz * dz
    }
}

struct Lesion {
    /// Center in the host lung's normalized coordinates.
    center: (f64, f64, f64),
    radius: f64,
    lung: usize,
    intensity: f32,
}

/// Generates one phantom. Geometry derives from one RNG stream and lesions
/// from another, so a positive/negative pair with the same seed shares its
/// anatomy exactly.
pub fn generate_phantom(spec: &PhantomSpec, positive: bool) -> (Volume, u8) {
    let (nx, ny, nz) = spec.dims;
    let mut geo = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, b"geometry"));
    let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f32, f32)| -> f64 {
        let (lo, hi) = (lo as f64, hi as f64);
        lo + rng.random::<f64>() * (hi - lo)
    };
    let jitter = |rng: &mut ChaCha8Rng, base: f64, frac: f64| -> f64 {
        base * (1.0 + (rng.random::<f64>() * 2.0 - 1.0) * frac)
    };

    let background = uniform(&mut geo, spec.background_intensity) as f32;
    let lung_base = uniform(&mut geo, spec.lung_intensity) as f32;
    let body_base = uniform(&mut geo, spec.body_intensity) as f32;

    let (cx, cy, cz) = (nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0);
    let body = Ellipsoid {
        center: (jitter(&mut geo, cx, 0.01), jitter(&mut geo, cy, 0.01), cz),
        semi: (
            jitter(&mut geo, 0.44 * nx as f64, 0.02),
            jitter(&mut geo, 0.46 * ny as f64, 0.02),
            nz as f64, // body spans the whole scan
        ),
    };
    // Two lungs offset along y so the default quarter-turn puts them side
    // by side.
    let dy = jitter(&mut geo, 0.22 * ny as f64, 0.03);
    let lungs: Vec<Ellipsoid> = [-1.0, 1.0]
        .into_iter()
        .map(|side| Ellipsoid {
            center: (
                jitter(&mut geo, cx, 0.01),
                cy + side * dy,
                jitter(&mut geo, cz, 0.02),
            ),
            semi: (
                jitter(&mut geo, 0.30 * nx as f64, 0.03),
                jitter(&mut geo, 0.155 * ny as f64, 0.03),
                jitter(&mut geo, 0.42 * nz as f64, 0.03),
            ),
        })
        .collect();

    let mut lesions = Vec::new();
    if positive {
        let mut les = ChaCha8Rng::seed_from_u64(stream_seed(spec.seed, b"lesions"));
        let count = if spec.lesion_count.1 > spec.lesion_count.0 {
            les.random_range(spec.lesion_count.0..=spec.lesion_count.1)
        } else {
            spec.lesion_count.0
        };
        for i in 0..count {
            let radius = uniform(
                &mut les,
                (spec.lesion_radius_frac.0 as f32, spec.lesion_radius_frac.1 as f32),
            );
            // Keep the blob strictly inside the unit ball of the lung.
            let reach = (0.9 - radius) / 3f64.sqrt();
            let coord = |rng: &mut ChaCha8Rng| (rng.random::<f64>() * 2.0 - 1.0) * reach;
            lesions.push(Lesion {
                center: (coord(&mut les), coord(&mut les), coord(&mut les)),
                radius,
                // Alternate lungs so multi-lesion phantoms are bilateral.
                lung: i % 2,
                intensity: uniform(&mut les, spec.lesion_intensity) as f32,
            });
        }
    }

    let noise_seed = stream_seed(spec.seed, b"texture");
    let mut voxels = vec![0.0f32; nx * ny * nz];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let (xf, yf, zf) = (x as f64, y as f64, z as f64);
                let mut v = background;
                if body.norm2(xf, yf, zf) <= 1.0 {
                    let tex = value_noise(noise_seed, xf / 10.0, yf / 10.0, zf / 6.0);
                    v = body_base + 0.03 * (tex as f32 - 0.5);
                    for (li, lung) in lungs.iter().enumerate() {
                        let n2 = lung.norm2(xf, yf, zf);
                        if n2 <= 1.0 {
                            v = lung_base + 0.015 * (tex as f32 - 0.5);
                            let lx = (xf - lung.center.0) / lung.semi.0;
                            let ly = (yf - lung.center.1) / lung.semi.1;
                            let lz = (zf - lung.center.2) / lung.semi.2;
                            for lesion in lesions.iter().filter(|l| l.lung == li) {
                                let dx = lx - lesion.center.0;
                                let dy2 = ly - lesion.center.1;
                                let dz = lz - lesion.center.2;
                                let d2 = dx * dx + dy2 * dy2 + dz * dz;
                                if d2 <= lesion.radius * lesion.radius {
                                    let tex2 = value_noise(
                                        noise_seed ^ 0x9e37,
                                        xf / 2.5,
                                        yf / 2.5,
                                        zf / 2.5,
                                    );
                                    v = lesion.intensity
                                        + spec.lesion_texture_amp * (tex2 as f32 - 0.5);
                                }
                            }
                            break;
                        }
                    }
                }
                voxels[x + nx * (y + ny * z)] = v;
            }
        }
    }
    (
        Volume::from_voxels(nx, ny, nz, voxels, format!("phantom-{}", spec.seed)),
        u8::from(positive),
    )
}

/// Per-volume spec with a seed derived from the corpus seed and volume id.
fn volume_spec(base: &PhantomSpec, volume_id: &str) -> PhantomSpec {
    PhantomSpec {
        seed: stream_seed(base.seed, volume_id.as_bytes()),
        ..base.clone()
    }
}

/// Writes `n_pos + n_neg` phantom volumes as `.nii` plus a `labels.csv`
/// (volume_id,label) into `dir`. Returns the (id, label) pairs in order.
pub fn write_phantom_corpus(
    spec: &PhantomSpec,
    n_pos: usize,
    n_neg: usize,
    dir: &Path,
) -> Result<Vec<(String, u8)>, SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut entries = Vec::with_capacity(n_pos + n_neg);
    for i in 0..n_pos {
        entries.push((format!("pos{i:04}"), 1u8));
    }
    for i in 0..n_neg {
        entries.push((format!("neg{i:04}"), 0u8));
    }
    let mut labels = String::from("volume_id,label\n");
    for (id, label) in &entries {
        let (volume, _) = generate_phantom(&volume_spec(spec, id), *label == 1);
        write_nifti(&volume, &dir.join(format!("{id}.nii")))?;
        writeln!(labels, "{id},{label}").unwrap();
    }
    let labels_path = dir.join("labels.csv");
    std::fs::write(&labels_path, labels).map_err(|e| DataError::Io {
        path: labels_path,
        source: e,
    })?;
    Ok(entries)
}

/// Generates phantoms in memory, runs the full preprocessing pipeline, and
/// writes the labeled `.slc` dataset with its manifest into `out_dir`.
pub fn generate_labeled_dataset(
    spec: &PhantomSpec,
    pre: &PreprocessConfig,
    n_pos: usize,
    n_neg: usize,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    let mut records = Vec::new();
    let mut ids = Vec::with_capacity(n_pos + n_neg);
    for i in 0..n_pos {
        ids.push((format!("pos{i:04}"), true));
    }
    for i in 0..n_neg {
        ids.push((format!("neg{i:04}"), false));
    }
    for (id, positive) in ids {
        let (volume, label) = generate_phantom(&volume_spec(spec, &id), positive);
        for slice in preprocess_volume(&volume, pre)? {
            records.push(SliceRecord {
                id: format!("{id}_s{:03}", slice.slice_index),
                label,
                image: slice.roi.image,
            });
        }
    }
    Ok(write_slice_dataset(&SliceDataset::new(records), out_dir)?)
}
