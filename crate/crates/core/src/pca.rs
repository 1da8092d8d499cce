//! Principal component decomposition of per-voxel enhancement curves.
//!
//! The basis is fitted from the sample covariance of (pre-smoothed) curves
//! via a dense symmetric eigensolve on the TxT covariance matrix, with a
//! deterministic sign convention so repeated fits agree bit-for-bit.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An orthonormal PCA basis over curves of length `t_len`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean_curve: Vec<f64>,
    /// `m` orthonormal rows of length `t_len`, by descending eigenvalue.
    pub components: Vec<Vec<f64>>,
    /// Eigenvalues for the retained components, descending, non-negative.
    pub eigenvalues: Vec<f64>,
    /// Sum of all `t_len` eigenvalues (total variance of the inputs).
    pub total_variance: f64,
}

impl PcaBasis {
    pub fn t_len(&self) -> usize {
        self.mean_curve.len()
    }

    pub fn n_modes(&self) -> usize {
        self.components.len()
    }

    /// Fraction of total variance captured by the first `k` modes.
    pub fn explained_fraction(&self, k: usize) -> f64 {
        if self.total_variance <= 0.0 {
            return 0.0;
        }
        self.eigenvalues.iter().take(k).sum::<f64>() / self.total_variance
    }
}

/// 1D Gaussian smoothing with sigma = 1 sample (kernel radius 3,
/// renormalized at the curve ends).
pub fn smooth_curve(curve: &[f64]) -> Vec<f64> {
    const RADIUS: i64 = 3;
    let n = curve.len() as i64;
    let weights: Vec<f64> = (-RADIUS..=RADIUS)
        .map(|k| (-0.5 * (k * k) as f64).exp())
        .collect();
    (0..n)
        .map(|i| {
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (j, w) in weights.iter().enumerate() {
                let k = i + j as i64 - RADIUS;
                if k >= 0 && k < n {
                    acc += w * curve[k as usize];
                    wsum += w;
                }
            }
            acc / wsum
        })
        .collect()
}

/// Fits the top-`m` principal components of `curves` (flat row-major,
/// `curves.len() / t_len` rows). Curves are expected pre-smoothed; see
/// [`smooth_curve`]. Covariance uses the 1/(N-1) estimator.
pub fn fit_pca(curves: &[f64], t_len: usize, m: usize) -> Result<PcaBasis> {
    if t_len == 0 || curves.len() % t_len != 0 {
        return Err(Error::Parameter(format!(
            "curve buffer length {} is not a multiple of t_len {t_len}",
            curves.len()
        )));
    }
    let n = curves.len() / t_len;
    if n < 2 {
        return Err(Error::Degenerate(format!(
            "PCA needs at least 2 curves, got {n}"
        )));
    }
    if m > t_len {
        return Err(Error::Parameter(format!(
            "requested {m} modes from curves of length {t_len}"
        )));
    }

    let mut mean = vec![0.0f64; t_len];
    for row in curves.chunks_exact(t_len) {
        for (m_i, &v) in mean.iter_mut().zip(row) {
            *m_i += v;
        }
    }
    for m_i in mean.iter_mut() {
        *m_i /= n as f64;
    }

    let mut cov = DMatrix::<f64>::zeros(t_len, t_len);
    let mut centered = vec![0.0f64; t_len];
    for row in curves.chunks_exact(t_len) {
        for (c, (&v, &mu)) in centered.iter_mut().zip(row.iter().zip(&mean)) {
            *c = v - mu;
        }
        for i in 0..t_len {
            for j in i..t_len {
                cov[(i, j)] += centered[i] * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..t_len {
        for j in i..t_len {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let total_variance = eig.eigenvalues.iter().sum::<f64>().max(0.0);
    let mut order: Vec<usize> = (0..t_len).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());

    let mut components = Vec::with_capacity(m);
    let mut eigenvalues = Vec::with_capacity(m);
    for &k in order.iter().take(m) {
        let col = eig.eigenvectors.column(k);
        let mut comp: Vec<f64> = col.iter().copied().collect();
        // Deterministic sign: the largest-magnitude entry is positive.
        let mut pivot = 0;
        for (i, v) in comp.iter().enumerate() {
            if v.abs() > comp[pivot].abs() {
                pivot = i;
            }
        }
        if comp[pivot] < 0.0 {
            for v in comp.iter_mut() {
                *v = -*v;
            }
        }
        components.push(comp);
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }

    Ok(PcaBasis {
        mean_curve: mean,
        components,
        eigenvalues,
        total_variance,
    })
}

/// Coefficients `b_k = <component_k, curve - mean_curve>`.
pub fn project(basis: &PcaBasis, curve: &[f64]) -> Result<Vec<f64>> {
    if curve.len() != basis.t_len() {
        return Err(Error::Parameter(format!(
            "curve length {} does not match basis length {}",
            curve.len(),
            basis.t_len()
        )));
    }
    Ok(basis
        .components
        .iter()
        .map(|comp| {
            comp.iter()
                .zip(curve.iter().zip(&basis.mean_curve))
                .map(|(&c, (&x, &mu))| c * (x - mu))
                .sum()
        })
        .collect())
}

/// Projects a flat buffer of curves (row-major) in one pass; returns the
/// row-major `n x m` coefficient field.
pub fn project_all(basis: &PcaBasis, curves: &[f64], t_len: usize) -> Result<Vec<f64>> {
    if t_len != basis.t_len() || curves.len() % t_len != 0 {
        return Err(Error::Parameter(format!(
            "curve buffer of {} values does not match basis length {}",
            curves.len(),
            basis.t_len()
        )));
    }
    let m = basis.n_modes();
    let mut out = Vec::with_capacity(curves.len() / t_len * m);
    for row in curves.chunks_exact(t_len) {
        for comp in &basis.components {
            let mut acc = 0.0;
            for ((&c, &x), &mu) in comp.iter().zip(row).zip(&basis.mean_curve) {
                acc += c * (x - mu);
            }
            out.push(acc);
        }
    }
    Ok(out)
}

/// Curve reconstruction `mean + sum_k b_k * component_k`.
pub fn reconstruct(basis: &PcaBasis, coeffs: &[f64]) -> Result<Vec<f64>> {
    if coeffs.len() != basis.n_modes() {
        return Err(Error::Parameter(format!(
            "coefficient count {} does not match basis mode count {}",
            coeffs.len(),
            basis.n_modes()
        )));
    }
    let mut out = basis.mean_curve.clone();
    for (b, comp) in coeffs.iter().zip(&basis.components) {
        for (o, &c) in out.iter_mut().zip(comp) {
            *o += b * c;
        }
    }
    Ok(out)
}

/// Per-mode affine scaling parameters mapping observed coefficient ranges
/// onto [0, 1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeScaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
    /// Modes whose range was degenerate (mapped to the 0.5 constant).
    pub constant: Vec<bool>,
}

/// Normalizes a per-voxel coefficient field (flat row-major, `m` modes per
/// voxel) to [0, 1] per mode. Degenerate modes map to 0.5 and are flagged.
pub fn normalize_modes(coeffs: &[f64], m: usize) -> Result<(Vec<f64>, ModeScaling)> {
    if m == 0 || coeffs.len() % m != 0 {
        return Err(Error::Parameter(format!(
            "coefficient buffer length {} is not a multiple of {m}",
            coeffs.len()
        )));
    }
    let mut min = vec![f64::INFINITY; m];
    let mut max = vec![f64::NEG_INFINITY; m];
    for row in coeffs.chunks_exact(m) {
        for k in 0..m {
            min[k] = min[k].min(row[k]);
            max[k] = max[k].max(row[k]);
        }
    }
    let constant: Vec<bool> = (0..m).map(|k| !(max[k] > min[k])).collect();
    let mut out = Vec::with_capacity(coeffs.len());
    for row in coeffs.chunks_exact(m) {
        for k in 0..m {
            if constant[k] {
                out.push(0.5);
            } else {
                out.push((row[k] - min[k]) / (max[k] - min[k]));
            }
        }
    }
    Ok((out, ModeScaling { min, max, constant }))
}
