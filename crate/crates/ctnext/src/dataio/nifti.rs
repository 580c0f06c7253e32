//! Minimal NIfTI-1 reader/writer for uncompressed single-file `.nii`
//! volumes: little-endian headers, datatypes uint8/int16/float32, with
//! `scl_slope`/`scl_inter` applied at read time.

use super::{open_buffered, read_exact_bytes, DataError, Volume};
use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

pub const NIFTI_HEADER_SIZE: usize = 348;
pub const NIFTI_MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

// Header field byte offsets (NIfTI-1).
const OFF_SIZEOF_HDR: usize = 0;
const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_MAGIC: usize = 344;

/// Reads an uncompressed single-file NIfTI-1 volume.
///
/// Voxels are returned x-fastest as stored; if `scl_slope` is finite and
/// non-zero each value maps to `scl_slope * v + scl_inter`.
pub fn read_nifti(path: &Path) -> Result<Volume, DataError> {
    let mut reader = open_buffered(path)?;
    let header = read_exact_bytes(&mut reader, NIFTI_HEADER_SIZE, path)?;

    let magic = &header[OFF_MAGIC..OFF_MAGIC + 4];
    if magic != NIFTI_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected: "n+1\\0 at offset 344".into(),
        });
    }
    let sizeof_hdr = LittleEndian::read_i32(&header[OFF_SIZEOF_HDR..]);
    if sizeof_hdr != NIFTI_HEADER_SIZE as i32 {
        // 348 byte-swapped reads as 1,543,569,408: a big-endian export.
        return Err(DataError::UnsupportedDatatype {
            path: path.to_path_buf(),
            detail: format!("sizeof_hdr {sizeof_hdr}; only little-endian NIfTI-1 is supported"),
        });
    }

    let mut dim = [0i16; 8];
    for (i, d) in dim.iter_mut().enumerate() {
        *d = LittleEndian::read_i16(&header[OFF_DIM + 2 * i..]);
    }
    if dim[0] != 3 || dim[1] <= 0 || dim[2] <= 0 || dim[3] <= 0 {
        return Err(DataError::UnsupportedDatatype {
            path: path.to_path_buf(),
            detail: format!("expected a 3-D volume, got dim {dim:?}"),
        });
    }
    let (nx, ny, nz) = (dim[1] as usize, dim[2] as usize, dim[3] as usize);

    let datatype = LittleEndian::read_i16(&header[OFF_DATATYPE..]);
    let bitpix = LittleEndian::read_i16(&header[OFF_BITPIX..]);
    let elem_size = match (datatype, bitpix) {
        (DT_UINT8, 8) => 1usize,
        (DT_INT16, 16) => 2,
        (DT_FLOAT32, 32) => 4,
        _ => {
            return Err(DataError::UnsupportedDatatype {
                path: path.to_path_buf(),
                detail: format!("datatype {datatype} / bitpix {bitpix}"),
            })
        }
    };

    let vox_offset = LittleEndian::read_f32(&header[OFF_VOX_OFFSET..]);
    let vox_offset = if vox_offset < NIFTI_HEADER_SIZE as f32 {
        NIFTI_HEADER_SIZE
    } else {
        vox_offset as usize
    };
    // Skip any extension bytes between the header and the payload.
    if vox_offset > NIFTI_HEADER_SIZE {
        read_exact_bytes(&mut reader, vox_offset - NIFTI_HEADER_SIZE, path)?;
    }

    let n_voxels = nx * ny * nz;
    let payload = {
        let mut buf = Vec::new();
        reader
            .read_to_end(&mut buf)
            .map_err(|e| DataError::io(path, e))?;
        buf
    };
    let expected = n_voxels * elem_size;
    if payload.len() < expected {
        return Err(DataError::TruncatedPayload {
            path: path.to_path_buf(),
            expected,
            found: payload.len(),
        });
    }

    let slope = LittleEndian::read_f32(&header[OFF_SCL_SLOPE..]);
    let inter = LittleEndian::read_f32(&header[OFF_SCL_INTER..]);
    let scale = slope.is_finite() && slope != 0.0;

    let mut voxels = Vec::with_capacity(n_voxels);
    match datatype {
        DT_UINT8 => {
            for &b in &payload[..expected] {
                voxels.push(b as f32);
            }
        }
        DT_INT16 => {
            for chunk in payload[..expected].chunks_exact(2) {
                voxels.push(LittleEndian::read_i16(chunk) as f32);
            }
        }
        _ => {
            for chunk in payload[..expected].chunks_exact(4) {
                voxels.push(LittleEndian::read_f32(chunk));
            }
        }
    }
    if scale {
        for v in voxels.iter_mut() {
            *v = slope * *v + inter;
        }
    }
    if voxels.iter().any(|v| !v.is_finite()) {
        return Err(DataError::NonFiniteData {
            path: path.to_path_buf(),
        });
    }

    Ok(Volume::from_voxels(
        nx,
        ny,
        nz,
        voxels,
        path.display().to_string(),
    ))
}

/// Writes a volume as float32 NIfTI-1 with identity intensity scaling.
pub fn write_nifti(volume: &Volume, path: &Path) -> Result<(), DataError> {
    let (nx, ny, nz) = volume.dims;
    let mut header = vec![0u8; 352]; // 348-byte header + 4 pad bytes
    LittleEndian::write_i32(&mut header[OFF_SIZEOF_HDR..], NIFTI_HEADER_SIZE as i32);
    let dim: [i16; 8] = [3, nx as i16, ny as i16, nz as i16, 1, 1, 1, 1];
    for (i, d) in dim.iter().enumerate() {
        LittleEndian::write_i16(&mut header[OFF_DIM + 2 * i..], *d);
    }
    LittleEndian::write_i16(&mut header[OFF_DATATYPE..], DT_FLOAT32);
    LittleEndian::write_i16(&mut header[OFF_BITPIX..], 32);
    LittleEndian::write_f32(&mut header[OFF_VOX_OFFSET..], 352.0);
    LittleEndian::write_f32(&mut header[OFF_SCL_SLOPE..], 1.0);
    LittleEndian::write_f32(&mut header[OFF_SCL_INTER..], 0.0);
    header[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(NIFTI_MAGIC);

    let file = fs::File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&header).map_err(|e| DataError::io(path, e))?;
    for &v in &volume.voxels {
        w.write_f32::<LittleEndian>(v)
            .map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raw_nifti(
        dims: (i16, i16, i16),
        datatype: i16,
        bitpix: i16,
        slope: f32,
        inter: f32,
        payload: &[u8],
    ) -> Vec<u8> {
        let mut bytes = vec![0u8; 352];
        LittleEndian::write_i32(&mut bytes[OFF_SIZEOF_HDR..], 348);
        let dim = [3i16, dims.0, dims.1, dims.2, 1, 1, 1, 1];
        for (i, d) in dim.iter().enumerate() {
            LittleEndian::write_i16(&mut bytes[OFF_DIM + 2 * i..], *d);
        }
        LittleEndian::write_i16(&mut bytes[OFF_DATATYPE..], datatype);
        LittleEndian::write_i16(&mut bytes[OFF_BITPIX..], bitpix);
        LittleEndian::write_f32(&mut bytes[OFF_VOX_OFFSET..], 352.0);
        LittleEndian::write_f32(&mut bytes[OFF_SCL_SLOPE..], slope);
        LittleEndian::write_f32(&mut bytes[OFF_SCL_INTER..], inter);
        bytes[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(NIFTI_MAGIC);
        bytes.extend_from_slice(payload);
        bytes
    }

    fn write_temp(bytes: &[u8]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("vol.nii"), bytes).unwrap();
        dir
    }

    #[test]
    fn reads_zero_int16_volume() {
        let payload = vec![0u8; 4 * 4 * 2 * 2];
        let dir = write_temp(&raw_nifti((4, 4, 2), DT_INT16, 16, 0.0, 0.0, &payload));
        let vol = read_nifti(&dir.path().join("vol.nii")).unwrap();
        assert_eq!(vol.dims, (4, 4, 2));
        assert!(vol.voxels.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn applies_slope_and_intercept() {
        let mut payload = vec![0u8; 2];
        LittleEndian::write_i16(&mut payload, 3);
        let dir = write_temp(&raw_nifti((1, 1, 1), DT_INT16, 16, 2.0, 1.0, &payload));
        let vol = read_nifti(&dir.path().join("vol.nii")).unwrap();
        assert_eq!(vol.voxels, vec![7.0]);
    }

    #[test]
    fn zero_slope_means_no_scaling() {
        let mut payload = vec![0u8; 2];
        LittleEndian::write_i16(&mut payload, 3);
        let dir = write_temp(&raw_nifti((1, 1, 1), DT_INT16, 16, 0.0, 5.0, &payload));
        let vol = read_nifti(&dir.path().join("vol.nii")).unwrap();
        assert_eq!(vol.voxels, vec![3.0]);
    }

    #[test]
    fn truncated_payload_is_detected() {
        let payload = vec![0u8; 100];
        let dir = write_temp(&raw_nifti((8, 8, 8), DT_FLOAT32, 32, 0.0, 0.0, &payload));
        assert!(matches!(
            read_nifti(&dir.path().join("vol.nii")),
            Err(DataError::TruncatedPayload { expected: 2048, found: 100, .. })
        ));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let payload = vec![0u8; 8];
        let mut bytes = raw_nifti((2, 2, 2), DT_UINT8, 8, 0.0, 0.0, &payload);
        bytes[OFF_MAGIC] = b'x';
        let dir = write_temp(&bytes);
        assert!(matches!(
            read_nifti(&dir.path().join("vol.nii")),
            Err(DataError::BadMagic { .. })
        ));
    }

    #[test]
    fn big_endian_header_is_rejected() {
        let payload = vec![0u8; 8];
        let mut bytes = raw_nifti((2, 2, 2), DT_UINT8, 8, 0.0, 0.0, &payload);
        bytes[OFF_SIZEOF_HDR..OFF_SIZEOF_HDR + 4].copy_from_slice(&348i32.to_be_bytes());
        let dir = write_temp(&bytes);
        assert!(matches!(
            read_nifti(&dir.path().join("vol.nii")),
            Err(DataError::UnsupportedDatatype { .. })
        ));
    }

    #[test]
    fn unsupported_datatype_is_rejected() {
        let payload = vec![0u8; 16];
        let dir = write_temp(&raw_nifti((2, 2, 2), 64, 64, 0.0, 0.0, &payload));
        assert!(matches!(
            read_nifti(&dir.path().join("vol.nii")),
            Err(DataError::UnsupportedDatatype { .. })
        ));
    }

    #[test]
    fn write_read_roundtrip() {
        let voxels: Vec<f32> = (0..24).map(|i| i as f32 * 0.125).collect();
        let vol = Volume::from_voxels(2, 3, 4, voxels, "mem".into());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.nii");
        write_nifti(&vol, &path).unwrap();
        let back = read_nifti(&path).unwrap();
        assert_eq!(back.dims, vol.dims);
        assert_eq!(back.voxels, vol.voxels);
    }
}
