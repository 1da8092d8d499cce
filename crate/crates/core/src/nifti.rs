//! Minimal single-file NIfTI-1 importer: magic `n+1`, little-endian,
//! datatypes uint8/int16/float32 only. Volumes are converted to the native
//! float32 representation on read; writing NIfTI is out of scope.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Volume4D, VolumeHeader, VolumeKind};

const HEADER_LEN: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn i16_at(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn i32_at(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn f32_at(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

pub fn read_nifti(path: &Path) -> Result<Volume4D> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Malformed(format!("{path:?}: truncated NIfTI header")));
    }
    if &bytes[344..347] != b"n+1" {
        return Err(Error::Malformed(format!(
            "{path:?}: missing NIfTI-1 magic \"n+1\" (only single-file .nii supported)"
        )));
    }
    if i32_at(&bytes, 0) != HEADER_LEN as i32 {
        return Err(Error::Malformed(format!(
            "{path:?}: sizeof_hdr != 348; big-endian NIfTI is not supported"
        )));
    }

    let ndim = i16_at(&bytes, 40);
    if !(1..=4).contains(&ndim) {
        return Err(Error::Malformed(format!(
            "{path:?}: unsupported dim[0] = {ndim} (expect 1..=4)"
        )));
    }
    let mut dims = [1usize; 4];
    for (a, d) in dims.iter_mut().enumerate().take(ndim as usize) {
        let v = i16_at(&bytes, 40 + 2 * (a + 1));
        if v < 1 {
            return Err(Error::Malformed(format!(
                "{path:?}: non-positive dim[{}] = {v}",
                a + 1
            )));
        }
        *d = v as usize;
    }

    let datatype = i16_at(&bytes, 70);
    let mut spacing = [0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = f32_at(&bytes, 76 + 4 * (a + 1)) as f64;
        // Some writers leave pixdim at 0 for degenerate axes.
        *s = if v > 0.0 { v } else { 1.0 };
    }
    let dt = f32_at(&bytes, 92) as f64; // pixdim[4]
    let vox_offset = f32_at(&bytes, 108) as usize;
    let scl_slope = f32_at(&bytes, 112);
    let scl_inter = f32_at(&bytes, 116);
    let (slope, inter) = if scl_slope != 0.0 {
        (scl_slope, scl_inter)
    } else {
        (1.0, 0.0)
    };

    let n = dims.iter().product::<usize>();
    let offset = vox_offset.max(HEADER_LEN + 4);
    let payload = &bytes[offset.min(bytes.len())..];
    let data: Vec<f32> = match datatype {
        DT_FLOAT32 => {
            if payload.len() < n * 4 {
                return Err(Error::Malformed(format!("{path:?}: truncated float32 data")));
            }
            payload[..n * 4]
                .chunks_exact(4)
                .map(|c| f32_at(c, 0) * slope + inter)
                .collect()
        }
        DT_INT16 => {
            if payload.len() < n * 2 {
                return Err(Error::Malformed(format!("{path:?}: truncated int16 data")));
            }
            payload[..n * 2]
                .chunks_exact(2)
                .map(|c| i16_at(c, 0) as f32 * slope + inter)
                .collect()
        }
        DT_UINT8 => {
            if payload.len() < n {
                return Err(Error::Malformed(format!("{path:?}: truncated uint8 data")));
            }
            payload[..n].iter().map(|&b| b as f32 * slope + inter).collect()
        }
        other => {
            return Err(Error::Malformed(format!(
                "{path:?}: unsupported NIfTI datatype {other} (supported: uint8, int16, float32)"
            )))
        }
    };

    let header = VolumeHeader {
        dims,
        spacing_mm: spacing,
        dt_s: if dims[3] > 1 && dt > 0.0 { dt } else { 1.0 },
        t0_s: 0.0,
        kind: VolumeKind::Scalar,
    };
    Volume4D::new(header, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_nifti(datatype: i16, dims: [i16; 4], payload: &[u8]) -> Vec<u8> {
        let mut b = vec![0u8; HEADER_LEN + 4];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        let ndim: i16 = if dims[3] > 1 { 4 } else { 3 };
        b[40..42].copy_from_slice(&ndim.to_le_bytes());
        for (a, d) in dims.iter().enumerate() {
            let off = 40 + 2 * (a + 1);
            b[off..off + 2].copy_from_slice(&d.to_le_bytes());
        }
        for a in 1..=4 {
            let off = 76 + 4 * a;
            b[off..off + 4].copy_from_slice(&2.0f32.to_le_bytes());
        }
        b[70..72].copy_from_slice(&datatype.to_le_bytes());
        b[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn reads_float32_nifti() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let vals = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let mut payload = Vec::new();
        for v in vals {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, build_nifti(DT_FLOAT32, [2, 2, 2, 1], &payload)).unwrap();
        let v = read_nifti(&path).unwrap();
        assert_eq!(v.header.dims, [2, 2, 2, 1]);
        assert_eq!(v.header.spacing_mm, [2.0, 2.0, 2.0]);
        assert_eq!(v.data, vals);
    }

    #[test]
    fn reads_int16_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let mut payload = Vec::new();
        for v in [10i16, -3] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut bytes = build_nifti(DT_INT16, [2, 1, 1, 1], &payload);
        bytes[112..116].copy_from_slice(&0.5f32.to_le_bytes()); // scl_slope
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes()); // scl_inter
        std::fs::write(&path, bytes).unwrap();
        let v = read_nifti(&path).unwrap();
        assert_eq!(v.data, vec![6.0, -0.5]);
    }

    #[test]
    fn read_volume_dispatches_on_nii_extension() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let mut payload = Vec::new();
        for v in [3.0f32, 1.0] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, build_nifti(DT_FLOAT32, [2, 1, 1, 1], &payload)).unwrap();
        let v = crate::volume::read_volume(&path).unwrap();
        assert_eq!(v.data, vec![3.0, 1.0]);
    }

    #[test]
    fn rejects_bad_magic_and_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.nii");
        let mut bytes = build_nifti(DT_FLOAT32, [1, 1, 1, 1], &[0, 0, 0, 0]);
        bytes[344] = b'x';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_nifti(&path).is_err());

        let bytes = build_nifti(64, [1, 1, 1, 1], &[0; 8]); // float64: unsupported
        std::fs::write(&path, bytes).unwrap();
        let err = read_nifti(&path).unwrap_err();
        assert!(err.to_string().contains("unsupported NIfTI datatype"));
    }
}
