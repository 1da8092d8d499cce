//! Per-supervoxel feature vectors: mean and standard deviation of the
//! shared-basis PCA modes, plus a rotationally consistent 6-direction
//! neighborhood gradient magnitude of those statistics. 20 columns total
//! for the 5-mode default, laid out as
//! `[mean b1..b5, sd b1..b5, grad(mean b1..b5), grad(sd b1..b5)]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervoxel::SupervoxelMap;

/// Direction slot order: +x, -x, +y, -y, +z, -z.
pub const DIRECTIONS: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
];

/// A dense feature table with named columns, persisted as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub column_names: Vec<String>,
    pub n_rows: usize,
    pub n_cols: usize,
    /// Row-major values.
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_cols..(i + 1) * self.n_cols]
    }
}

/// Per-supervoxel sample mean and sample s.d. (1/(n-1); zero for singleton
/// supervoxels) of each coefficient mode. Output is row-major
/// `n_supervoxels x 2*n_modes`, means first.
pub fn supervoxel_stats(map: &SupervoxelMap, coeffs: &[f64], n_modes: usize) -> Result<Vec<f64>> {
    if coeffs.len() != map.n_voxels() * n_modes {
        return Err(Error::Parameter(format!(
            "coefficient field length {} does not match {} voxels x {n_modes} modes",
            coeffs.len(),
            map.n_voxels()
        )));
    }
    let n_sv = map.n_supervoxels();
    let mut sum = vec![0f64; n_sv * n_modes];
    let mut sum_sq = vec![0f64; n_sv * n_modes];
    for (v, &l) in map.labels.iter().enumerate() {
        let s = l as usize * n_modes;
        for k in 0..n_modes {
            let b = coeffs[v * n_modes + k];
            sum[s + k] += b;
            sum_sq[s + k] += b * b;
        }
    }
    let mut out = vec![0f64; n_sv * 2 * n_modes];
    for sv in 0..n_sv {
        let n = map.sizes[sv] as f64;
        for k in 0..n_modes {
            let mean = sum[sv * n_modes + k] / n;
            out[sv * 2 * n_modes + k] = mean;
            let sd = if map.sizes[sv] > 1 {
                let var = (sum_sq[sv * n_modes + k] - n * mean * mean) / (n - 1.0);
                var.max(0.0).sqrt()
            } else {
                0.0
            };
            out[sv * 2 * n_modes + n_modes + k] = sd;
        }
    }
    Ok(out)
}

/// For each supervoxel, the adjacent neighbor best aligned with each of the
/// six axis directions (by centroid unit vector); the supervoxel itself
/// substitutes when no neighbor points that way. Ties break to the smaller
/// id by scan order.
pub fn direction_neighbors(map: &SupervoxelMap) -> Vec<[u32; 6]> {
    let n_sv = map.n_supervoxels();
    let mut out = vec![[0u32; 6]; n_sv];
    for i in 0..n_sv {
        let ci = map.centroids_mm[i];
        let mut slots = [i as u32; 6];
        let mut best = [0.0f64; 6]; // require strictly positive alignment
        for &j in &map.adjacency[i] {
            let cj = map.centroids_mm[j as usize];
            let d = [cj[0] - ci[0], cj[1] - ci[1], cj[2] - ci[2]];
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if norm == 0.0 {
                continue;
            }
            for (s, dir) in DIRECTIONS.iter().enumerate() {
                let dot = (d[0] * dir[0] + d[1] * dir[1] + d[2] * dir[2]) / norm;
                if dot > best[s] {
                    best[s] = dot;
                    slots[s] = j;
                }
            }
        }
        out[i] = slots;
    }
    out
}

/// Gradient-magnitude analogue per statistic column:
/// `sqrt(sum_axes (f(dir+) - f(dir-))^2)`. Self-substituted slots use the
/// center's own value.
pub fn neighborhood_gradient(stats: &[f64], n_cols: usize, dirs: &[[u32; 6]]) -> Vec<f64> {
    let n_sv = dirs.len();
    assert_eq!(stats.len(), n_sv * n_cols);
    let mut out = vec![0f64; n_sv * n_cols];
    for i in 0..n_sv {
        for c in 0..n_cols {
            let f = |sv: u32| stats[sv as usize * n_cols + c];
            let mut acc = 0.0;
            for axis in 0..3 {
                let d = f(dirs[i][2 * axis]) - f(dirs[i][2 * axis + 1]);
                acc += d * d;
            }
            out[i * n_cols + c] = acc.sqrt();
        }
    }
    out
}

/// Per-column affine normalization learned from training rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnScale {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    pub constant: Vec<bool>,
}

impl ColumnScale {
    pub fn fit(rows: &[f64], n_cols: usize) -> Self {
        let mut min = vec![f64::INFINITY; n_cols];
        let mut max = vec![f64::NEG_INFINITY; n_cols];
        for row in rows.chunks_exact(n_cols) {
            for c in 0..n_cols {
                min[c] = min[c].min(row[c]);
                max[c] = max[c].max(row[c]);
            }
        }
        let constant = (0..n_cols).map(|c| !(max[c] > min[c])).collect();
        ColumnScale { min, max, constant }
    }

    /// Maps values into [0, 1] by the training range, clamping out-of-range
    /// (unseen-data) values to [-0.5, 1.5]. Constant columns map to 0.5.
    pub fn apply(&self, rows: &[f64]) -> Vec<f64> {
        let n_cols = self.min.len();
        let mut out = Vec::with_capacity(rows.len());
        for row in rows.chunks_exact(n_cols) {
            for c in 0..n_cols {
                if self.constant[c] {
                    out.push(0.5);
                } else {
                    let v = (row[c] - self.min[c]) / (self.max[c] - self.min[c]);
                    out.push(v.clamp(-0.5, 1.5));
                }
            }
        }
        out
    }
}

/// The two-stage feature normalizer. By default the base statistics are
/// normalized first and gradients computed on the normalized columns so all
/// axes contribute comparably; `gradient_before_normalization` switches to
/// computing gradients on raw statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub base: ColumnScale,
    pub grad: ColumnScale,
    pub gradient_before_normalization: bool,
}

/// Fits the normalizer over training cases (each `(stats, dirs)` with
/// `2*n_modes` stat columns) and returns it. Use [`build_features`] to
/// produce the final 20-column matrices for both training and unseen cases.
pub fn fit_normalizer(
    cases: &[(&[f64], &[[u32; 6]])],
    n_stat_cols: usize,
    gradient_before_normalization: bool,
) -> Result<FeatureNormalizer> {
    if cases.is_empty() {
        return Err(Error::Degenerate("no training cases for normalization".into()));
    }
    let mut all_stats = Vec::new();
    for (stats, _) in cases {
        all_stats.extend_from_slice(stats);
    }
    let base = ColumnScale::fit(&all_stats, n_stat_cols);

    let mut all_grads = Vec::new();
    for (stats, dirs) in cases {
        let grads = if gradient_before_normalization {
            neighborhood_gradient(stats, n_stat_cols, dirs)
        } else {
            let norm = base.apply(stats);
            neighborhood_gradient(&norm, n_stat_cols, dirs)
        };
        all_grads.extend_from_slice(&grads);
    }
    let grad = ColumnScale::fit(&all_grads, n_stat_cols);
    Ok(FeatureNormalizer {
        base,
        grad,
        gradient_before_normalization,
    })
}

/// Assembles the final normalized feature matrix for one case.
pub fn build_features(
    stats: &[f64],
    dirs: &[[u32; 6]],
    n_modes: usize,
    normalizer: &FeatureNormalizer,
) -> FeatureMatrix {
    let n_stat_cols = 2 * n_modes;
    let n_rows = dirs.len();
    let norm_base = normalizer.base.apply(stats);
    let grads = if normalizer.gradient_before_normalization {
        neighborhood_gradient(stats, n_stat_cols, dirs)
    } else {
        neighborhood_gradient(&norm_base, n_stat_cols, dirs)
    };
    let norm_grad = normalizer.grad.apply(&grads);

    let n_cols = 2 * n_stat_cols;
    let mut values = Vec::with_capacity(n_rows * n_cols);
    for i in 0..n_rows {
        values.extend_from_slice(&norm_base[i * n_stat_cols..(i + 1) * n_stat_cols]);
        values.extend_from_slice(&norm_grad[i * n_stat_cols..(i + 1) * n_stat_cols]);
    }
    let mut column_names = Vec::with_capacity(n_cols);
    for prefix in ["mean_b", "sd_b"] {
        for k in 1..=n_modes {
            column_names.push(format!("{prefix}{k}"));
        }
    }
    for prefix in ["grad_mean_b", "grad_sd_b"] {
        for k in 1..=n_modes {
            column_names.push(format!("{prefix}{k}"));
        }
    }
    FeatureMatrix {
        column_names,
        n_rows,
        n_cols,
        values,
    }
}
