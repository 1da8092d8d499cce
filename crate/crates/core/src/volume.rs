//! 3D/4D scalar and label volumes with physical metadata, plus their
//! on-disk format: a JSON header next to a raw little-endian payload
//! (`f32` for scalar volumes, `u8` for label volumes). The raw file shares
//! the header's basename with extension `.raw`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_TUMOUR: u8 = 1;
pub const LABEL_LUMEN: u8 = 2;
pub const LABEL_BLADDER: u8 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Scalar,
    Label,
}

/// Grid geometry shared by all volume types.
///
/// `dims` is `(X, Y, Z, T)` with `T = 1` for static volumes; `spacing_mm`
/// is the voxel size; `dt_s` the frame interval (ignored when `T = 1`) and
/// `t0_s` the acquisition time of frame 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub dims: [usize; 4],
    pub spacing_mm: [f64; 3],
    pub dt_s: f64,
    pub t0_s: f64,
    pub kind: VolumeKind,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 4], spacing_mm: [f64; 3], dt_s: f64) -> Self {
        VolumeHeader {
            dims,
            spacing_mm,
            dt_s,
            t0_s: 0.0,
            kind: VolumeKind::Scalar,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Malformed(format!(
                "all dims must be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Malformed(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        if self.dims[3] > 1 && !(self.dt_s > 0.0) {
            return Err(Error::Malformed(format!(
                "dt_s must be positive for dynamic volumes, got {}",
                self.dt_s
            )));
        }
        Ok(())
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    pub fn n_spatial(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn n_samples(&self) -> usize {
        self.n_spatial() * self.dims[3]
    }

    /// Physical position of a voxel center, in mm from the grid origin.
    pub fn voxel_center_mm(&self, idx: [usize; 3]) -> [f64; 3] {
        [
            (idx[0] as f64 + 0.5) * self.spacing_mm[0],
            (idx[1] as f64 + 0.5) * self.spacing_mm[1],
            (idx[2] as f64 + 0.5) * self.spacing_mm[2],
        ]
    }
}

/// Half-open index ranges `[lo, hi)` per spatial axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl IndexBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Self {
        IndexBox { lo, hi }
    }

    pub fn full(dims: [usize; 3]) -> Self {
        IndexBox {
            lo: [0, 0, 0],
            hi: dims,
        }
    }

    pub fn extent(&self) -> [usize; 3] {
        [
            self.hi[0].saturating_sub(self.lo[0]),
            self.hi[1].saturating_sub(self.lo[1]),
            self.hi[2].saturating_sub(self.lo[2]),
        ]
    }

    pub fn n_voxels(&self) -> usize {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn contains(&self, other: &IndexBox) -> bool {
        (0..3).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.lo[a] >= self.hi[a] || self.hi[a] > dims[a] {
                return Err(Error::Parameter(format!(
                    "box {:?}..{:?} empty or outside dims {:?}",
                    self.lo, self.hi, dims
                )));
            }
        }
        Ok(())
    }
}

/// A dynamic scan: X*Y*Z*T finite scalars, x fastest then y, z, t.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume4D {
    pub header: VolumeHeader,
    pub data: Vec<f32>,
}

impl Volume4D {
    /// Builds a volume, enforcing the type invariants (length match,
    /// finite samples). The first offending sample index is reported.
    pub fn new(header: VolumeHeader, data: Vec<f32>) -> Result<Self> {
        header.validate()?;
        if data.len() != header.n_samples() {
            return Err(Error::Malformed(format!(
                "data length {} does not match dims {:?} (expected {})",
                data.len(),
                header.dims,
                header.n_samples()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Malformed(format!(
                "non-finite value at sample index {bad}"
            )));
        }
        Ok(Volume4D { header, data })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize, t: usize) -> usize {
        let [dx, dy, dz, _] = self.header.dims;
        debug_assert!(x < dx && y < dy && z < dz);
        x + dx * (y + dy * (z + dz * t))
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize, t: usize) -> f32 {
        self.data[self.index(x, y, z, t)]
    }

    /// Mean over time per voxel; length `X*Y*Z`.
    pub fn time_mean(&self) -> Vec<f32> {
        let n = self.header.n_spatial();
        let t_len = self.header.dims[3];
        let mut mean = vec![0.0f64; n];
        for t in 0..t_len {
            let frame = &self.data[t * n..(t + 1) * n];
            for (m, &v) in mean.iter_mut().zip(frame) {
                *m += v as f64;
            }
        }
        mean.iter().map(|m| (m / t_len as f64) as f32).collect()
    }

    /// Spatial mean of one frame.
    pub fn frame_mean(&self, t: usize) -> f64 {
        let n = self.header.n_spatial();
        let frame = &self.data[t * n..(t + 1) * n];
        frame.iter().map(|&v| v as f64).sum::<f64>() / n as f64
    }
}

/// A static label volume over the legend 0=background, 1=tumour, 2=lumen,
/// 3=bladder (extensible via `max_label`).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub header: VolumeHeader,
    pub labels: Vec<u8>,
}

impl LabelVolume {
    pub fn new(mut header: VolumeHeader, labels: Vec<u8>, max_label: u8) -> Result<Self> {
        header.kind = VolumeKind::Label;
        header.validate()?;
        if header.dims[3] != 1 {
            return Err(Error::Malformed(format!(
                "label volume must have T=1, got T={}",
                header.dims[3]
            )));
        }
        if labels.len() != header.n_spatial() {
            return Err(Error::Malformed(format!(
                "label count {} does not match dims {:?}",
                labels.len(),
                header.dims
            )));
        }
        if let Some(bad) = labels.iter().position(|&l| l > max_label) {
            return Err(Error::Malformed(format!(
                "label {} at voxel {} outside legend 0..={}",
                labels[bad], bad, max_label
            )));
        }
        Ok(LabelVolume { header, labels })
    }

    pub fn mask_of(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }
}

fn raw_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("raw")
}

/// Reads a scalar volume from a JSON header + `.raw` float32 pair.
/// Paths ending in `.nii` are parsed as NIfTI-1 instead and converted.
pub fn read_volume(path: &Path) -> Result<Volume4D> {
    if path.extension().and_then(|e| e.to_str()) == Some("nii") {
        return crate::nifti::read_nifti(path);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{path:?}: {e}")))?;
    if header.kind != VolumeKind::Scalar {
        return Err(Error::Malformed(format!(
            "{path:?}: expected a scalar volume, found {:?}",
            header.kind
        )));
    }
    let raw = raw_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    if bytes.len() != header.n_samples() * 4 {
        return Err(Error::Malformed(format!(
            "{raw:?}: raw size {} bytes does not match dims {:?} ({} expected)",
            bytes.len(),
            header.dims,
            header.n_samples() * 4
        )));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume4D::new(header, data)
}

/// Inverse of [`read_volume`]; bit-exact round trip.
pub fn write_volume(v: &Volume4D, path: &Path) -> Result<()> {
    let mut header = v.header.clone();
    header.kind = VolumeKind::Scalar;
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Internal(format!("header serialization: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for &x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let raw = raw_path(path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_labels(path: &Path) -> Result<LabelVolume> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{path:?}: {e}")))?;
    if header.kind != VolumeKind::Label {
        return Err(Error::Malformed(format!(
            "{path:?}: expected a label volume, found {:?}",
            header.kind
        )));
    }
    let raw = raw_path(path);
    let labels = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    LabelVolume::new(header, labels, u8::MAX)
}

pub fn write_labels(lv: &LabelVolume, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(&lv.header)
        .map_err(|e| Error::Internal(format!("header serialization: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let raw = raw_path(path);
    fs::write(&raw, &lv.labels).map_err(|e| Error::io(&raw, e))
}

/// Spatial crop over all frames. Spacing and timing are preserved.
pub fn crop(v: &Volume4D, bx: &IndexBox) -> Result<Volume4D> {
    bx.validate(v.header.spatial_dims())?;
    let e = bx.extent();
    let t_len = v.header.dims[3];
    let mut out = Vec::with_capacity(e[0] * e[1] * e[2] * t_len);
    for t in 0..t_len {
        for z in bx.lo[2]..bx.hi[2] {
            for y in bx.lo[1]..bx.hi[1] {
                let row = v.index(bx.lo[0], y, z, t);
                out.extend_from_slice(&v.data[row..row + e[0]]);
            }
        }
    }
    let mut header = v.header.clone();
    header.dims = [e[0], e[1], e[2], t_len];
    Volume4D::new(header, out)
}

pub fn crop_labels(lv: &LabelVolume, bx: &IndexBox) -> Result<LabelVolume> {
    bx.validate(lv.header.spatial_dims())?;
    let dims = lv.header.spatial_dims();
    let e = bx.extent();
    let mut out = Vec::with_capacity(bx.n_voxels());
    for z in bx.lo[2]..bx.hi[2] {
        for y in bx.lo[1]..bx.hi[1] {
            let row = grid::linear([bx.lo[0], y, z], dims);
            out.extend_from_slice(&lv.labels[row..row + e[0]]);
        }
    }
    let mut header = lv.header.clone();
    header.dims = [e[0], e[1], e[2], 1];
    LabelVolume::new(header, out, u8::MAX)
}

/// Re-embeds a cropped label volume into a full-size grid (zeros outside
/// the box). Inverse of [`crop_labels`] on the box.
pub fn embed_labels(lv: &LabelVolume, full: &VolumeHeader, bx: &IndexBox) -> Result<LabelVolume> {
    bx.validate(full.spatial_dims())?;
    if bx.extent() != lv.header.spatial_dims() {
        return Err(Error::Parameter(format!(
            "box extent {:?} does not match label dims {:?}",
            bx.extent(),
            lv.header.spatial_dims()
        )));
    }
    let full_dims = full.spatial_dims();
    let mut labels = vec![0u8; full.n_spatial()];
    let e = bx.extent();
    for z in 0..e[2] {
        for y in 0..e[1] {
            let src = grid::linear([0, y, z], e);
            let dst = grid::linear([bx.lo[0], y + bx.lo[1], z + bx.lo[2]], full_dims);
            labels[dst..dst + e[0]].copy_from_slice(&lv.labels[src..src + e[0]]);
        }
    }
    let mut header = full.clone();
    header.dims[3] = 1;
    header.kind = VolumeKind::Label;
    LabelVolume::new(header, labels, u8::MAX)
}
