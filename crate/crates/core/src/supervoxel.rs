//! Perfusion-supervoxel over-segmentation: localized k-means (SLIC) over
//! arbitrary n-feature voxel fields with a joint feature/spatial metric,
//! followed by 26-connectivity enforcement and label compaction.
//!
//! All spatial arithmetic is in mm so anisotropic voxels cluster correctly;
//! seeds are placed on a regular 3D grid in physical space.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{self, components_26};
use crate::volume::{IndexBox, VolumeHeader};

pub const UNASSIGNED: u32 = u32::MAX;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SlicParams {
    /// Mean voxels per supervoxel (S_n).
    pub size_voxels: usize,
    /// Compactness c in (0, 1]; the spatial term is weighted by 1/r = c/S.
    pub compactness: f64,
    pub n_features: usize,
    pub max_iters: usize,
    pub tol_mm: f64,
    /// Classic seed perturbation to the lowest-gradient neighbor; off by
    /// default.
    pub perturb_seeds: bool,
}

impl Default for SlicParams {
    fn default() -> Self {
        SlicParams {
            size_voxels: 350,
            compactness: 0.05,
            n_features: 3,
            max_iters: 10,
            tol_mm: 0.1,
            perturb_seeds: false,
        }
    }
}

impl SlicParams {
    pub fn validate(&self) -> Result<()> {
        if self.size_voxels < 8 {
            return Err(Error::Parameter(format!(
                "supervoxel size must be >= 8 voxels, got {}",
                self.size_voxels
            )));
        }
        if !(self.compactness > 0.0 && self.compactness <= 1.0) {
            return Err(Error::Parameter(format!(
                "compactness must be in (0, 1], got {}",
                self.compactness
            )));
        }
        if self.n_features == 0 {
            return Err(Error::Parameter("n_features must be >= 1".into()));
        }
        Ok(())
    }
}

/// The over-segmentation of an ROI: a full voxel partition plus
/// per-supervoxel summary statistics and (once built) the adjacency graph.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SupervoxelMap {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    /// Per-voxel supervoxel id in `0..n_supervoxels`.
    pub labels: Vec<u32>,
    pub centroids_mm: Vec<[f64; 3]>,
    pub sizes: Vec<usize>,
    pub mean_features: Vec<Vec<f64>>,
    /// 26-connectivity neighbors per supervoxel, each list sorted ascending.
    pub adjacency: Vec<Vec<u32>>,
    /// K-means energy after each assignment sweep (diagnostic).
    pub energy_history: Vec<f64>,
}

impl SupervoxelMap {
    pub fn n_supervoxels(&self) -> usize {
        self.sizes.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.labels.len()
    }

    /// Broadcasts a per-supervoxel field to voxels.
    pub fn broadcast(&self, per_supervoxel: &[f64]) -> Vec<f64> {
        self.labels
            .iter()
            .map(|&l| per_supervoxel[l as usize])
            .collect()
    }
}

/// The combined SLIC metric: sqrt(d_f^2 + (d_s/r)^2) with the mean-square
/// feature distance and the Euclidean mm distance.
pub fn slic_distance(bi: &[f64], bj: &[f64], xi: [f64; 3], xj: [f64; 3], r: f64) -> f64 {
    slic_distance_sq(bi, bj, xi, xj, r).sqrt()
}

#[inline]
fn slic_distance_sq(bi: &[f64], bj: &[f64], xi: [f64; 3], xj: [f64; 3], r: f64) -> f64 {
    debug_assert_eq!(bi.len(), bj.len());
    let mut df2 = 0.0;
    for (a, b) in bi.iter().zip(bj) {
        df2 += (b - a) * (b - a);
    }
    df2 /= bi.len() as f64;
    let mut ds2 = 0.0;
    for a in 0..3 {
        ds2 += (xj[a] - xi[a]) * (xj[a] - xi[a]);
    }
    df2 + ds2 / (r * r)
}

/// Seed-grid geometry for a given ROI and target supervoxel size.
#[derive(Debug, Clone)]
pub struct SeedGrid {
    /// Target seed count floor(N_v / S_n).
    pub k_target: usize,
    /// Isotropic grid spacing S in mm.
    pub spacing_mm: f64,
    /// Grid counts per axis.
    pub counts: [usize; 3],
    /// Seed positions, mm, ROI-local.
    pub positions: Vec<[f64; 3]>,
}

/// Places seeds on a regular grid with isotropic mm spacing
/// `S = (N_v * dx * dy * dz / k)^(1/3)`, `k = floor(N_v / S_n)`.
pub fn seed_grid(extent: [usize; 3], spacing_mm: [f64; 3], size_voxels: usize) -> Result<SeedGrid> {
    let n_v = extent[0] * extent[1] * extent[2];
    let k_target = n_v / size_voxels;
    if k_target == 0 {
        return Err(Error::Degenerate(format!(
            "ROI of {n_v} voxels is smaller than one supervoxel ({size_voxels})"
        )));
    }
    let volume_mm3 = n_v as f64 * spacing_mm.iter().product::<f64>();
    let s_mm = (volume_mm3 / k_target as f64).cbrt();
    let mut counts = [0usize; 3];
    let mut cell = [0f64; 3];
    for a in 0..3 {
        let e_mm = extent[a] as f64 * spacing_mm[a];
        counts[a] = ((e_mm / s_mm).round() as usize).clamp(1, extent[a]);
        cell[a] = e_mm / counts[a] as f64;
    }
    let mut positions = Vec::with_capacity(counts.iter().product());
    for k in 0..counts[2] {
        for j in 0..counts[1] {
            for i in 0..counts[0] {
                positions.push([
                    (i as f64 + 0.5) * cell[0],
                    (j as f64 + 0.5) * cell[1],
                    (k as f64 + 0.5) * cell[2],
                ]);
            }
        }
    }
    Ok(SeedGrid {
        k_target,
        spacing_mm: s_mm,
        counts,
        positions,
    })
}

struct Cluster {
    pos: [f64; 3],
    features: Vec<f64>,
}

/// Runs n-feature SLIC over the ROI of a feature field covering the grid
/// described by `header` (`n_features` values per voxel, voxel-major).
/// Returns a compacted, connectivity-enforced map with empty `adjacency`;
/// call [`build_adjacency`] to fill it.
pub fn run_slic(
    features: &[f64],
    header: &VolumeHeader,
    params: &SlicParams,
    roi: &IndexBox,
) -> Result<SupervoxelMap> {
    params.validate()?;
    let full_dims = header.spatial_dims();
    roi.validate(full_dims)?;
    if features.len() != header.n_spatial() * params.n_features {
        return Err(Error::Parameter(format!(
            "feature field length {} does not match {} voxels x {} features",
            features.len(),
            header.n_spatial(),
            params.n_features
        )));
    }

    let dims = roi.extent();
    let spacing = header.spacing_mm;
    let n_vox = dims[0] * dims[1] * dims[2];
    let nf = params.n_features;

    // Gather the ROI into a dense local field.
    let mut feat = Vec::with_capacity(n_vox * nf);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let src = grid::linear(
                    [x + roi.lo[0], y + roi.lo[1], z + roi.lo[2]],
                    full_dims,
                ) * nf;
                feat.extend_from_slice(&features[src..src + nf]);
            }
        }
    }
    let positions: Vec<[f64; 3]> = (0..n_vox)
        .map(|i| {
            let [x, y, z] = grid::unravel(i, dims);
            [
                (x as f64 + 0.5) * spacing[0],
                (y as f64 + 0.5) * spacing[1],
                (z as f64 + 0.5) * spacing[2],
            ]
        })
        .collect();

    let grid_spec = seed_grid(dims, spacing, params.size_voxels)?;
    let s_mm = grid_spec.spacing_mm;
    let r = s_mm / params.compactness;

    let mut clusters: Vec<Cluster> = grid_spec
        .positions
        .iter()
        .map(|&pos| {
            let vox = voxel_at_mm(pos, dims, spacing);
            let f = feat[vox * nf..(vox + 1) * nf].to_vec();
            Cluster { pos, features: f }
        })
        .collect();
    if params.perturb_seeds {
        perturb_to_lowest_gradient(&mut clusters, &feat, nf, dims, spacing);
    }

    let mut labels = vec![UNASSIGNED; n_vox];
    let mut energy_history = Vec::new();

    for _iter in 0..params.max_iters.max(1) {
        // Bucket seeds by current position so each voxel only scans seeds
        // whose 2S-wide search window can contain it.
        let buckets = SeedBuckets::build(&clusters, dims, spacing, s_mm);

        let chunk = 4096;
        let results: Vec<(Vec<u32>, f64)> = (0..n_vox)
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|vox_chunk| {
                let mut out = Vec::with_capacity(vox_chunk.len());
                let mut energy = 0.0;
                let mut candidates = Vec::new();
                for &v in vox_chunk {
                    let pos = positions[v];
                    let fv = &feat[v * nf..(v + 1) * nf];
                    let mut best_id = labels[v];
                    let mut best_d = if best_id != UNASSIGNED {
                        let c = &clusters[best_id as usize];
                        slic_distance_sq(fv, &c.features, pos, c.pos, r)
                    } else {
                        f64::INFINITY
                    };
                    buckets.candidates(pos, &mut candidates);
                    for &cid in &candidates {
                        let c = &clusters[cid as usize];
                        if (c.pos[0] - pos[0]).abs() > s_mm
                            || (c.pos[1] - pos[1]).abs() > s_mm
                            || (c.pos[2] - pos[2]).abs() > s_mm
                        {
                            continue;
                        }
                        let d = slic_distance_sq(fv, &c.features, pos, c.pos, r);
                        if d < best_d || (d == best_d && cid < best_id) {
                            best_d = d;
                            best_id = cid;
                        }
                    }
                    if best_id == UNASSIGNED {
                        // No seed window covers this voxel; fall back to a
                        // full scan (rare, only near ROI borders).
                        for (cid, c) in clusters.iter().enumerate() {
                            let d = slic_distance_sq(fv, &c.features, pos, c.pos, r);
                            if d < best_d {
                                best_d = d;
                                best_id = cid as u32;
                            }
                        }
                    }
                    energy += best_d;
                    out.push(best_id);
                }
                (out, energy)
            })
            .collect();

        let mut energy = 0.0;
        let mut w = 0;
        for (chunk_labels, e) in results {
            labels[w..w + chunk_labels.len()].copy_from_slice(&chunk_labels);
            w += chunk_labels.len();
            energy += e;
        }
        energy_history.push(energy);

        // Update step: means of position and features per cluster.
        let mut pos_acc = vec![[0f64; 3]; clusters.len()];
        let mut feat_acc = vec![0f64; clusters.len() * nf];
        let mut counts = vec![0usize; clusters.len()];
        for v in 0..n_vox {
            let c = labels[v] as usize;
            counts[c] += 1;
            for a in 0..3 {
                pos_acc[c][a] += positions[v][a];
            }
            for k in 0..nf {
                feat_acc[c * nf + k] += feat[v * nf + k];
            }
        }
        let mut max_shift = 0.0f64;
        for (c, cluster) in clusters.iter_mut().enumerate() {
            if counts[c] == 0 {
                continue; // empty cluster keeps its center, retired later
            }
            let inv = 1.0 / counts[c] as f64;
            let new_pos = [
                pos_acc[c][0] * inv,
                pos_acc[c][1] * inv,
                pos_acc[c][2] * inv,
            ];
            let shift = ((new_pos[0] - cluster.pos[0]).powi(2)
                + (new_pos[1] - cluster.pos[1]).powi(2)
                + (new_pos[2] - cluster.pos[2]).powi(2))
            .sqrt();
            max_shift = max_shift.max(shift);
            cluster.pos = new_pos;
            for k in 0..nf {
                cluster.features[k] = feat_acc[c * nf + k] * inv;
            }
        }
        if max_shift < params.tol_mm {
            break;
        }
    }

    enforce_connectivity(&mut labels, &feat, nf, dims, params.size_voxels);
    let (labels, n_sv) = compact_labels(labels);

    let mut map = SupervoxelMap {
        dims,
        spacing_mm: spacing,
        labels,
        centroids_mm: vec![[0.0; 3]; n_sv],
        sizes: vec![0; n_sv],
        mean_features: vec![vec![0.0; nf]; n_sv],
        adjacency: Vec::new(),
        energy_history,
    };
    for v in 0..n_vox {
        let c = map.labels[v] as usize;
        map.sizes[c] += 1;
        for a in 0..3 {
            map.centroids_mm[c][a] += positions[v][a];
        }
        for k in 0..nf {
            map.mean_features[c][k] += feat[v * nf + k];
        }
    }
    for c in 0..n_sv {
        let inv = 1.0 / map.sizes[c] as f64;
        for a in 0..3 {
            map.centroids_mm[c][a] *= inv;
        }
        for k in 0..nf {
            map.mean_features[c][k] *= inv;
        }
    }
    Ok(map)
}

fn voxel_at_mm(pos: [f64; 3], dims: [usize; 3], spacing: [f64; 3]) -> usize {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        idx[a] = ((pos[a] / spacing[a]) as usize).min(dims[a] - 1);
    }
    grid::linear(idx, dims)
}

fn perturb_to_lowest_gradient(
    clusters: &mut [Cluster],
    feat: &[f64],
    nf: usize,
    dims: [usize; 3],
    spacing: [f64; 3],
) {
    let gradient = |idx: [usize; 3]| -> f64 {
        let mut g = 0.0;
        for a in 0..3 {
            if idx[a] == 0 || idx[a] + 1 >= dims[a] {
                continue;
            }
            let mut hi = idx;
            hi[a] += 1;
            let mut lo = idx;
            lo[a] -= 1;
            let hi = grid::linear(hi, dims) * nf;
            let lo = grid::linear(lo, dims) * nf;
            for k in 0..nf {
                let d = feat[hi + k] - feat[lo + k];
                g += d * d;
            }
        }
        g
    };
    for c in clusters.iter_mut() {
        let v = voxel_at_mm(c.pos, dims, spacing);
        let base = grid::unravel(v, dims);
        let mut best = (gradient(base), base);
        grid::for_each_neighbor26(base, dims, |n| {
            let idx = grid::unravel(n, dims);
            let g = gradient(idx);
            if g < best.0 {
                best = (g, idx);
            }
        });
        let idx = best.1;
        c.pos = [
            (idx[0] as f64 + 0.5) * spacing[0],
            (idx[1] as f64 + 0.5) * spacing[1],
            (idx[2] as f64 + 0.5) * spacing[2],
        ];
        let v = grid::linear(idx, dims);
        c.features.copy_from_slice(&feat[v * nf..(v + 1) * nf]);
    }
}

/// Spatial hash of seed positions with cell size S; `candidates` yields the
/// seeds of the 27 cells around a query position, in ascending id order
/// within each cell.
struct SeedBuckets {
    cell_mm: f64,
    counts: [usize; 3],
    cells: Vec<Vec<u32>>,
}

impl SeedBuckets {
    fn build(clusters: &[Cluster], dims: [usize; 3], spacing: [f64; 3], s_mm: f64) -> Self {
        let mut counts = [0usize; 3];
        for a in 0..3 {
            let e_mm = dims[a] as f64 * spacing[a];
            counts[a] = ((e_mm / s_mm).ceil() as usize).max(1);
        }
        let mut cells = vec![Vec::new(); counts[0] * counts[1] * counts[2]];
        for (id, c) in clusters.iter().enumerate() {
            let mut idx = [0usize; 3];
            for a in 0..3 {
                idx[a] = ((c.pos[a] / s_mm) as usize).min(counts[a] - 1);
            }
            cells[idx[0] + counts[0] * (idx[1] + counts[1] * idx[2])].push(id as u32);
        }
        SeedBuckets {
            cell_mm: s_mm,
            counts,
            cells,
        }
    }

    fn candidates(&self, pos: [f64; 3], out: &mut Vec<u32>) {
        out.clear();
        let mut lo = [0i64; 3];
        let mut hi = [0i64; 3];
        for a in 0..3 {
            let c = (pos[a] / self.cell_mm) as i64;
            lo[a] = (c - 1).max(0);
            hi[a] = (c + 1).min(self.counts[a] as i64 - 1);
        }
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    let cell = x as usize
                        + self.counts[0] * (y as usize + self.counts[1] * z as usize);
                    out.extend_from_slice(&self.cells[cell]);
                }
            }
        }
    }
}

/// Reassigns 26-connected fragments that are smaller than S_n/4 or detached
/// from their cluster's largest fragment to the adjacent supervoxel with
/// the nearest mean features. Iterates until every label is one component;
/// leftover stragglers become supervoxels of their own.
fn enforce_connectivity(
    labels: &mut [u32],
    feat: &[f64],
    nf: usize,
    dims: [usize; 3],
    size_voxels: usize,
) {
    let min_size = (size_voxels / 4).max(1);
    for _pass in 0..8 {
        let comps = components_26(labels, dims, None);
        // Cluster feature means from the current assignment.
        let n_clusters = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut sums = vec![0f64; n_clusters * nf];
        let mut counts = vec![0usize; n_clusters];
        for (v, &l) in labels.iter().enumerate() {
            counts[l as usize] += 1;
            for k in 0..nf {
                sums[l as usize * nf + k] += feat[v * nf + k];
            }
        }

        // The keeper of each cluster: its largest fragment, if big enough.
        let mut keeper: Vec<Option<usize>> = vec![None; n_clusters];
        for (ci, comp) in comps.iter().enumerate() {
            let l = comp.label as usize;
            let better = match keeper[l] {
                None => true,
                Some(prev) => {
                    let p = &comps[prev];
                    comp.size() > p.size()
                        || (comp.size() == p.size() && comp.min_linear() < p.min_linear())
                }
            };
            if better {
                keeper[l] = Some(ci);
            }
        }

        let mut merge_queue: Vec<usize> = (0..comps.len())
            .filter(|&ci| {
                let l = comps[ci].label as usize;
                keeper[l] != Some(ci) || comps[ci].size() < min_size
            })
            .collect();
        if merge_queue.is_empty() {
            return;
        }
        merge_queue.sort_by_key(|&ci| (comps[ci].size(), comps[ci].min_linear()));

        for &ci in &merge_queue {
            let comp = &comps[ci];
            let own = labels[comp.min_linear()];
            if own != comp.label {
                continue; // already swallowed by an earlier merge this pass
            }
            // Fragment mean features.
            let mut fmean = vec![0f64; nf];
            for &v in &comp.voxels {
                for k in 0..nf {
                    fmean[k] += feat[v * nf + k];
                }
            }
            for f in fmean.iter_mut() {
                *f /= comp.size() as f64;
            }
            // Adjacent labels under the current assignment.
            let mut neighbors: Vec<u32> = Vec::new();
            for &v in &comp.voxels {
                grid::for_each_neighbor26(grid::unravel(v, dims), dims, |n| {
                    let l = labels[n];
                    if l != own && !neighbors.contains(&l) {
                        neighbors.push(l);
                    }
                });
            }
            if neighbors.is_empty() {
                continue; // isolated; keep as its own region
            }
            neighbors.sort_unstable();
            let mut best = neighbors[0];
            let mut best_d = f64::INFINITY;
            for &l in &neighbors {
                if counts[l as usize] == 0 {
                    continue;
                }
                let inv = 1.0 / counts[l as usize] as f64;
                let mut d = 0.0;
                for k in 0..nf {
                    let diff = fmean[k] - sums[l as usize * nf + k] * inv;
                    d += diff * diff;
                }
                if d < best_d {
                    best_d = d;
                    best = l;
                }
            }
            for &v in &comp.voxels {
                labels[v] = best;
            }
            counts[own as usize] -= comp.size();
            counts[best as usize] += comp.size();
            for k in 0..nf {
                let s: f64 = comp.voxels.iter().map(|&v| feat[v * nf + k]).sum();
                sums[own as usize * nf + k] -= s;
                sums[best as usize * nf + k] += s;
            }
        }
    }
    // Safety net: whatever is still fragmented becomes separate supervoxels,
    // so the one-component invariant always holds.
    let comps = components_26(labels, dims, None);
    let mut seen = vec![false; labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0)];
    let mut next = seen.len() as u32;
    for comp in &comps {
        let l = comp.label as usize;
        if !seen[l] {
            seen[l] = true;
            continue;
        }
        for &v in &comp.voxels {
            labels[v] = next;
        }
        next += 1;
    }
}

/// Renumbers labels to a gap-free 0..N range, ascending by old id.
fn compact_labels(mut labels: Vec<u32>) -> (Vec<u32>, usize) {
    let max = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let mut used = vec![false; max];
    for &l in &labels {
        used[l as usize] = true;
    }
    let mut remap = vec![UNASSIGNED; max];
    let mut next = 0u32;
    for (old, &u) in used.iter().enumerate() {
        if u {
            remap[old] = next;
            next += 1;
        }
    }
    for l in labels.iter_mut() {
        *l = remap[*l as usize];
    }
    (labels, next as usize)
}

/// Fills the 26-connectivity adjacency lists from the label field.
pub fn build_adjacency(map: &mut SupervoxelMap) {
    let n = map.n_supervoxels();
    let mut sets: Vec<Vec<u32>> = vec![Vec::new(); n];
    let dims = map.dims;
    for v in 0..map.labels.len() {
        let a = map.labels[v];
        grid::for_each_neighbor26(grid::unravel(v, dims), dims, |w| {
            if w > v {
                let b = map.labels[w];
                if a != b {
                    sets[a as usize].push(b);
                    sets[b as usize].push(a);
                }
            }
        });
    }
    for s in sets.iter_mut() {
        s.sort_unstable();
        s.dedup();
    }
    map.adjacency = sets;
}

fn label_raw_path(json_path: &Path) -> PathBuf {
    json_path.with_extension("raw")
}

/// Persists the map as a JSON summary plus little-endian u32 labels.
pub fn write_supervoxels(map: &SupervoxelMap, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&SupervoxelSummary::from(map))
        .map_err(|e| Error::Internal(format!("supervoxel serialization: {e}")))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::with_capacity(map.labels.len() * 4);
    for &l in &map.labels {
        bytes.extend_from_slice(&l.to_le_bytes());
    }
    let raw = label_raw_path(path);
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))
}

pub fn read_supervoxels(path: &Path) -> Result<SupervoxelMap> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let summary: SupervoxelSummary =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{path:?}: {e}")))?;
    let raw = label_raw_path(path);
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let n_vox = summary.dims[0] * summary.dims[1] * summary.dims[2];
    if bytes.len() != n_vox * 4 {
        return Err(Error::Malformed(format!(
            "{raw:?}: expected {} label bytes, found {}",
            n_vox * 4,
            bytes.len()
        )));
    }
    let labels: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let n_sv = summary.sizes.len();
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_sv) {
        return Err(Error::Malformed(format!(
            "{raw:?}: label {bad} outside 0..{n_sv}"
        )));
    }
    Ok(SupervoxelMap {
        dims: summary.dims,
        spacing_mm: summary.spacing_mm,
        labels,
        centroids_mm: summary.centroids_mm,
        sizes: summary.sizes,
        mean_features: summary.mean_features,
        adjacency: summary.adjacency,
        energy_history: summary.energy_history,
    })
}

#[derive(Serialize, Deserialize)]
struct SupervoxelSummary {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    n_supervoxels: usize,
    centroids_mm: Vec<[f64; 3]>,
    sizes: Vec<usize>,
    mean_features: Vec<Vec<f64>>,
    adjacency: Vec<Vec<u32>>,
    energy_history: Vec<f64>,
}

impl From<&SupervoxelMap> for SupervoxelSummary {
    fn from(m: &SupervoxelMap) -> Self {
        SupervoxelSummary {
            dims: m.dims,
            spacing_mm: m.spacing_mm,
            n_supervoxels: m.n_supervoxels(),
            centroids_mm: m.centroids_mm.clone(),
            sizes: m.sizes.clone(),
            mean_features: m.mean_features.clone(),
            adjacency: m.adjacency.clone(),
            energy_history: m.energy_history.clone(),
        }
    }
}

/// Checks the partition/contiguity invariants; used by tests and the
/// acceptance suite.
pub fn check_invariants(map: &SupervoxelMap) -> Result<()> {
    let n_sv = map.n_supervoxels();
    if map.labels.iter().any(|&l| l as usize >= n_sv) {
        return Err(Error::Internal("label outside compacted range".into()));
    }
    let mut counts = vec![0usize; n_sv];
    for &l in &map.labels {
        counts[l as usize] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Internal("gap in supervoxel ids".into()));
    }
    if counts != map.sizes {
        return Err(Error::Internal("sizes do not match label counts".into()));
    }
    let comps = components_26(&map.labels, map.dims, None);
    if comps.len() != n_sv {
        return Err(Error::Internal(format!(
            "{} supervoxels but {} connected components",
            n_sv,
            comps.len()
        )));
    }
    Ok(())
}
