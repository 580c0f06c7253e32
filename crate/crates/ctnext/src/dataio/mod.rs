//! Binary persistence: NIfTI-1 volume ingestion, the `.slc` slice dataset
//! format with its JSON manifest, and model checkpoints. All formats are
//! little-endian and roundtrip bit-exactly.

mod checkpoint;
mod nifti;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ParamEntry};
pub use nifti::{read_nifti, write_nifti};

use crate::imaging::ImageGray;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SLICE_MAGIC: &[u8; 4] = b"CTSL";
pub const SLICE_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("bad magic in {path}: expected {expected}")]
    BadMagic { path: PathBuf, expected: String },
    #[error("unsupported datatype in {path}: {detail}")]
    UnsupportedDatatype { path: PathBuf, detail: String },
    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },
    #[error("non-finite values in {path}")]
    NonFiniteData { path: PathBuf },
    #[error("missing or unreadable manifest in {dir}: {detail}")]
    MissingManifest { dir: PathBuf, detail: String },
    #[error("unsupported dataset format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt entry {id}: {detail}")]
    CorruptEntry { id: String, detail: String },
    #[error("dimension mismatch for {id}: expected {expected_h}x{expected_w}, got {got_h}x{got_w}")]
    DimensionMismatch {
        id: String,
        expected_h: usize,
        expected_w: usize,
        got_h: usize,
        got_w: usize,
    },
}

impl DataError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// 3-D scalar field loaded from a NIfTI file, intensities after any header
/// affine scaling. Layout is x-fastest: voxel (x, y, z) lives at
/// `x + nx * (y + ny * z)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub voxels: Vec<f32>,
    pub source_path: String,
}

impl Volume {
    pub fn from_voxels(
        nx: usize,
        ny: usize,
        nz: usize,
        voxels: Vec<f32>,
        source_path: String,
    ) -> Self {
        assert_eq!(voxels.len(), nx * ny * nz, "voxel count must match dims");
        Self {
            dims: (nx, ny, nz),
            voxels,
            source_path,
        }
    }

    /// Axial slice `z` as an image with rows = y, cols = x.
    pub fn slice(&self, z: usize) -> ImageGray {
        let (nx, ny, _) = self.dims;
        let start = z * nx * ny;
        ImageGray::new(ny, nx, self.voxels[start..start + nx * ny].to_vec())
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.voxels {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// One labeled, preprocessed slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub id: String,
    pub label: u8,
    pub image: ImageGray,
}

/// Ordered collection of labeled slices; the unit the augmentation, split,
/// and training stages operate on.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SliceDataset {
    pub records: Vec<SliceRecord>,
}

impl SliceDataset {
    pub fn new(records: Vec<SliceRecord>) -> Self {
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-label record counts; labels 0 and 1 are always present.
    pub fn counts_per_class(&self) -> BTreeMap<u8, usize> {
        let mut counts = BTreeMap::from([(0u8, 0usize), (1u8, 0usize)]);
        for rec in &self.records {
            *counts.entry(rec.label).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub label: u8,
    pub file: String,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub entries: Vec<ManifestEntry>,
    pub counts_per_class: BTreeMap<u8, usize>,
}

fn write_slc(path: &Path, image: &ImageGray) -> Result<(), DataError> {
    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| DataError::io(path, e);
    w.write_all(SLICE_MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(SLICE_FORMAT_VERSION)
        .map_err(io_err)?;
    w.write_u32::<LittleEndian>(image.height as u32).map_err(io_err)?;
    w.write_u32::<LittleEndian>(image.width as u32).map_err(io_err)?;
    for &v in &image.pixels {
        w.write_f32::<LittleEndian>(v).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_slc(path: &Path, id: &str) -> Result<ImageGray, DataError> {
    let bytes = fs::read(path).map_err(|_| DataError::CorruptEntry {
        id: id.to_string(),
        detail: format!("missing or unreadable file {}", path.display()),
    })?;
    let corrupt = |detail: String| DataError::CorruptEntry {
        id: id.to_string(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..4] != SLICE_MAGIC {
        return Err(corrupt("bad slice magic".into()));
    }
    let mut r = &bytes[4..16];
    let version = r.read_u32::<LittleEndian>().unwrap();
    if version != SLICE_FORMAT_VERSION {
        return Err(corrupt(format!("unsupported slice version {version}")));
    }
    let height = r.read_u32::<LittleEndian>().unwrap() as usize;
    let width = r.read_u32::<LittleEndian>().unwrap() as usize;
    let expected = 16 + height * width * 4;
    if bytes.len() != expected {
        return Err(corrupt(format!(
            "size mismatch: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut pixels = Vec::with_capacity(height * width);
    let mut data = &bytes[16..];
    for _ in 0..height * width {
        pixels.push(data.read_f32::<LittleEndian>().unwrap());
    }
    Ok(ImageGray::new(height, width, pixels))
}

/// Persists a dataset as one `.slc` file per slice plus `manifest.json`.
///
/// Every image must be 250x250; intensities are stored as little-endian
/// 32-bit reals so `read_slice_dataset` reproduces inputs bit-exactly.
pub fn write_slice_dataset(dataset: &SliceDataset, dir: &Path) -> Result<DatasetManifest, DataError> {
    use crate::imaging::{ROI_HEIGHT, ROI_WIDTH};
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (idx, rec) in dataset.records.iter().enumerate() {
        if rec.image.height != ROI_HEIGHT || rec.image.width != ROI_WIDTH {
            return Err(DataError::DimensionMismatch {
                id: rec.id.clone(),
                expected_h: ROI_HEIGHT,
                expected_w: ROI_WIDTH,
                got_h: rec.image.height,
                got_w: rec.image.width,
            });
        }
        let file = format!("slice_{idx:06}.slc");
        write_slc(&dir.join(&file), &rec.image)?;
        entries.push(ManifestEntry {
            id: rec.id.clone(),
            label: rec.label,
            file,
            width: rec.image.width as u32,
            height: rec.image.height as u32,
        });
    }
    let manifest = DatasetManifest {
        format_version: SLICE_FORMAT_VERSION,
        entries,
        counts_per_class: dataset.counts_per_class(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| DataError::io(&path, e))?;
    Ok(manifest)
}

/// Reads back a dataset written by [`write_slice_dataset`], validating dims,
/// labels, id uniqueness and the manifest's class counts.
pub fn read_slice_dataset(dir: &Path) -> Result<SliceDataset, DataError> {
    let manifest = read_manifest(dir)?;
    let mut seen = std::collections::BTreeSet::new();
    let mut records = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        if !seen.insert(entry.id.clone()) {
            return Err(DataError::CorruptEntry {
                id: entry.id.clone(),
                detail: "duplicate id in manifest".into(),
            });
        }
        if entry.label > 1 {
            return Err(DataError::CorruptEntry {
                id: entry.id.clone(),
                detail: format!("label {} is not binary", entry.label),
            });
        }
        let image = read_slc(&dir.join(&entry.file), &entry.id)?;
        if image.height != entry.height as usize || image.width != entry.width as usize {
            return Err(DataError::CorruptEntry {
                id: entry.id.clone(),
                detail: "slice dims disagree with manifest".into(),
            });
        }
        records.push(SliceRecord {
            id: entry.id.clone(),
            label: entry.label,
            image,
        });
    }
    let dataset = SliceDataset::new(records);
    if dataset.counts_per_class() != manifest.counts_per_class {
        return Err(DataError::CorruptEntry {
            id: MANIFEST_FILE.into(),
            detail: "counts_per_class disagrees with entries".into(),
        });
    }
    Ok(dataset)
}

/// Reads and validates just the manifest of a dataset directory.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| DataError::MissingManifest {
        dir: dir.to_path_buf(),
        detail: e.to_string(),
    })?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DataError::MissingManifest {
            dir: dir.to_path_buf(),
            detail: e.to_string(),
        })?;
    if manifest.format_version != SLICE_FORMAT_VERSION {
        return Err(DataError::UnsupportedVersion(manifest.format_version));
    }
    Ok(manifest)
}

pub(crate) fn read_exact_bytes(
    reader: &mut impl Read,
    len: usize,
    path: &Path,
) -> Result<Vec<u8>, DataError> {
    let mut buf = vec![0u8; len];
    let mut filled = 0;
    while filled < len {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(DataError::TruncatedPayload {
                    path: path.to_path_buf(),
                    expected: len,
                    found: filled,
                })
            }
            Ok(n) => filled += n,
            Err(e) => return Err(DataError::io(path, e)),
        }
    }
    Ok(buf)
}

pub(crate) fn open_buffered(path: &Path) -> Result<BufReader<fs::File>, DataError> {
    Ok(BufReader::new(
        fs::File::open(path).map_err(|e| DataError::io(path, e))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{ROI_HEIGHT, ROI_WIDTH};

    fn test_image(seed: u32) -> ImageGray {
        let mut state = seed as u64 | 1;
        let mut px = Vec::with_capacity(ROI_HEIGHT * ROI_WIDTH);
        for _ in 0..ROI_HEIGHT * ROI_WIDTH {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            px.push((state >> 40) as f32 / (1u64 << 24) as f32);
        }
        ImageGray::new(ROI_HEIGHT, ROI_WIDTH, px)
    }

    fn dataset(n_pos: usize, n_neg: usize) -> SliceDataset {
        let mut records = Vec::new();
        for i in 0..n_pos {
            records.push(SliceRecord {
                id: format!("pos{i}"),
                label: 1,
                image: test_image(i as u32 + 1),
            });
        }
        for i in 0..n_neg {
            records.push(SliceRecord {
                id: format!("neg{i}"),
                label: 0,
                image: test_image(i as u32 + 1000),
            });
        }
        SliceDataset::new(records)
    }

    #[test]
    fn empty_dataset_roundtrips_with_zero_counts() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_slice_dataset(&SliceDataset::default(), dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 0);
        assert_eq!(manifest.counts_per_class[&0], 0);
        assert_eq!(manifest.counts_per_class[&1], 0);
        assert!(read_slice_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn counts_reflect_labels() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_slice_dataset(&dataset(2, 1), dir.path()).unwrap();
        assert_eq!(manifest.counts_per_class[&1], 2);
        assert_eq!(manifest.counts_per_class[&0], 1);
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ds = dataset(2, 2);
        write_slice_dataset(&ds, dir.path()).unwrap();
        let back = read_slice_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn wrong_dims_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let ds = SliceDataset::new(vec![SliceRecord {
            id: "bad".into(),
            label: 0,
            image: ImageGray::zeros(10, 10),
        }]);
        assert!(matches!(
            write_slice_dataset(&ds, dir.path()),
            Err(DataError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn missing_file_is_corrupt_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_slice_dataset(&dataset(1, 1), dir.path()).unwrap();
        fs::remove_file(dir.path().join("slice_000000.slc")).unwrap();
        assert!(matches!(
            read_slice_dataset(dir.path()),
            Err(DataError::CorruptEntry { .. })
        ));
    }

    #[test]
    fn truncated_slice_is_corrupt_entry() {
        let dir = tempfile::tempdir().unwrap();
        write_slice_dataset(&dataset(1, 0), dir.path()).unwrap();
        let path = dir.path().join("slice_000000.slc");
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..100]).unwrap();
        assert!(matches!(
            read_slice_dataset(dir.path()),
            Err(DataError::CorruptEntry { .. })
        ));
    }

    #[test]
    fn unknown_format_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_slice_dataset(&dataset(1, 0), dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 999");
        fs::write(&path, text).unwrap();
        assert!(matches!(
            read_slice_dataset(dir.path()),
            Err(DataError::UnsupportedVersion(999))
        ));
    }

    #[test]
    fn missing_manifest_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_slice_dataset(dir.path()),
            Err(DataError::MissingManifest { .. })
        ));
    }
}
