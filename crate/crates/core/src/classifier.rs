//! Multi-class linear discriminant analysis over supervoxel features, and
//! the training-label generator that condenses partial expert-mask overlaps
//! into one label per supervoxel.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::supervoxel_stats;
use crate::supervoxel::SupervoxelMap;
use crate::volume::{LABEL_BACKGROUND, LABEL_BLADDER, LABEL_LUMEN, LABEL_TUMOUR};

pub const DEFAULT_LAMBDA_REG: f64 = 1e-4;

/// Gaussian class-conditional model with a shared (pooled) covariance.
///
/// The pooled covariance uses the 1/N estimator so duplicating the training
/// set leaves the model unchanged; a small ridge `lambda_reg * trace/d` on
/// the diagonal keeps degenerate phantom features solvable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LdaModel {
    pub classes: Vec<u8>,
    pub means: Vec<Vec<f64>>,
    /// Row-major d x d pooled covariance (after ridge).
    pub covariance: Vec<f64>,
    pub priors: Vec<f64>,
    pub lambda_reg: f64,
}

/// Per-supervoxel class probabilities; rows sum to 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartPotentials {
    pub classes: Vec<u8>,
    pub n_rows: usize,
    /// Row-major `n_rows x classes.len()`.
    pub probs: Vec<f64>,
}

impl PartPotentials {
    pub fn class_column(&self, class: u8) -> Option<Vec<f64>> {
        let c = self.classes.iter().position(|&k| k == class)?;
        let n_c = self.classes.len();
        Some((0..self.n_rows).map(|r| self.probs[r * n_c + c]).collect())
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let n_c = self.classes.len();
        &self.probs[r * n_c..(r + 1) * n_c]
    }
}

pub fn train_lda(x: &[f64], n_cols: usize, y: &[u8], lambda_reg: f64) -> Result<LdaModel> {
    if n_cols == 0 || x.len() != y.len() * n_cols {
        return Err(Error::Parameter(format!(
            "feature matrix of {} values does not match {} labels x {n_cols} columns",
            x.len(),
            y.len()
        )));
    }
    let mut classes: Vec<u8> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Degenerate(format!(
            "LDA needs at least 2 classes, got {:?}",
            classes
        )));
    }
    let n = y.len();
    let k = classes.len();

    let mut counts = vec![0usize; k];
    let mut means = vec![vec![0f64; n_cols]; k];
    for (row, &label) in x.chunks_exact(n_cols).zip(y) {
        let c = classes.iter().position(|&l| l == label).unwrap();
        counts[c] += 1;
        for (m, &v) in means[c].iter_mut().zip(row) {
            *m += v;
        }
    }
    for (c, count) in counts.iter().enumerate() {
        if *count < 2 {
            return Err(Error::Degenerate(format!(
                "class {} has {count} training sample(s); need at least 2",
                classes[c]
            )));
        }
        for m in means[c].iter_mut() {
            *m /= *count as f64;
        }
    }

    // Pooled within-class scatter, 1/N.
    let mut cov = vec![0f64; n_cols * n_cols];
    let mut centered = vec![0f64; n_cols];
    for (row, &label) in x.chunks_exact(n_cols).zip(y) {
        let c = classes.iter().position(|&l| l == label).unwrap();
        for (cv, (&v, &m)) in centered.iter_mut().zip(row.iter().zip(&means[c])) {
            *cv = v - m;
        }
        for i in 0..n_cols {
            for j in i..n_cols {
                cov[i * n_cols + j] += centered[i] * centered[j];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    let mut trace = 0.0;
    for i in 0..n_cols {
        for j in i..n_cols {
            let v = cov[i * n_cols + j] * inv_n;
            cov[i * n_cols + j] = v;
            cov[j * n_cols + i] = v;
        }
        trace += cov[i * n_cols + i];
    }
    let ridge = lambda_reg * (trace / n_cols as f64).max(1e-12);
    for i in 0..n_cols {
        cov[i * n_cols + i] += ridge;
    }

    let priors: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    Ok(LdaModel {
        classes,
        means,
        covariance: cov,
        priors,
        lambda_reg,
    })
}

/// Posterior class probabilities under the shared-covariance Gaussian
/// model: softmax of the linear discriminant scores.
pub fn predict_proba(model: &LdaModel, x: &[f64], n_cols: usize) -> Result<PartPotentials> {
    let d = model.means[0].len();
    if n_cols != d {
        return Err(Error::Parameter(format!(
            "feature count {n_cols} does not match model dimension {d}"
        )));
    }
    if x.len() % n_cols != 0 {
        return Err(Error::Parameter(format!(
            "feature buffer length {} is not a multiple of {n_cols}",
            x.len()
        )));
    }
    let sigma = DMatrix::from_row_slice(d, d, &model.covariance);
    let chol = Cholesky::new(sigma).ok_or_else(|| {
        Error::Degenerate("pooled covariance is not positive definite".into())
    })?;
    // w_c = Sigma^-1 mu_c ; b_c = -mu_c.w_c/2 + ln pi_c
    let k = model.classes.len();
    let mut w = Vec::with_capacity(k);
    let mut b = Vec::with_capacity(k);
    for (c, mean) in model.means.iter().enumerate() {
        let mu = DVector::from_column_slice(mean);
        let wc = chol.solve(&mu);
        b.push(-0.5 * mu.dot(&wc) + model.priors[c].max(f64::MIN_POSITIVE).ln());
        w.push(wc);
    }

    let n_rows = x.len() / n_cols;
    let mut probs = Vec::with_capacity(n_rows * k);
    for row in x.chunks_exact(n_cols) {
        let mut scores = Vec::with_capacity(k);
        for c in 0..k {
            let s: f64 = w[c].iter().zip(row).map(|(wi, xi)| wi * xi).sum::<f64>() + b[c];
            scores.push(s);
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        probs.extend(exps.iter().map(|e| e / z));
    }
    Ok(PartPotentials {
        classes: model.classes.clone(),
        n_rows,
        probs,
    })
}

/// Result of condensing expert voxel labels onto supervoxels.
#[derive(Debug, Clone)]
pub struct TrainingLabels {
    pub labels: Vec<u8>,
    pub warnings: Vec<String>,
}

/// Assigns one class per supervoxel from expert overlap fractions:
/// majority (>= 50%) overlaps take the class directly; borderline overlaps
/// in [10%, 50%) are arbitrated by a two-class linear discriminant on mean
/// PCA features, trained on this volume's majority supervoxels against
/// clean background; everything else is background.
pub fn make_training_labels(
    map: &SupervoxelMap,
    expert_roi: &[u8],
    coeffs: &[f64],
    n_modes: usize,
    lambda_reg: f64,
) -> Result<TrainingLabels> {
    if expert_roi.len() != map.n_voxels() {
        return Err(Error::Parameter(format!(
            "expert mask of {} voxels does not align with map of {}",
            expert_roi.len(),
            map.n_voxels()
        )));
    }
    let n_sv = map.n_supervoxels();
    let part_classes = [LABEL_TUMOUR, LABEL_LUMEN, LABEL_BLADDER];

    // Overlap counts per supervoxel and part class.
    let mut counts = vec![[0usize; 3]; n_sv];
    for (v, &l) in expert_roi.iter().enumerate() {
        if let Some(c) = part_classes.iter().position(|&p| p == l) {
            counts[map.labels[v] as usize][c] += 1;
        }
    }

    let mut labels = vec![LABEL_BACKGROUND; n_sv];
    let mut borderline: Vec<(usize, usize)> = Vec::new(); // (sv, class slot)
    let mut clean_background = vec![false; n_sv];
    for sv in 0..n_sv {
        let size = map.sizes[sv] as f64;
        // Best class by overlap count; slots are ordered tumour, lumen,
        // bladder so a strict comparison applies the tie precedence.
        let mut best = 0usize;
        for c in 1..3 {
            if counts[sv][c] > counts[sv][best] {
                best = c;
            }
        }
        let frac = counts[sv][best] as f64 / size;
        if frac >= 0.5 {
            labels[sv] = part_classes[best];
        } else if frac >= 0.1 {
            borderline.push((sv, best));
        } else {
            clean_background[sv] = true;
        }
    }

    // Mean PCA features per supervoxel (the first n_modes stat columns).
    let stats = supervoxel_stats(map, coeffs, n_modes)?;
    let mean_of = |sv: usize| &stats[sv * 2 * n_modes..sv * 2 * n_modes + n_modes];

    let mut warnings = Vec::new();
    for slot in 0..3 {
        let class = part_classes[slot];
        let pending: Vec<usize> = borderline
            .iter()
            .filter(|&&(_, s)| s == slot)
            .map(|&(sv, _)| sv)
            .collect();
        if pending.is_empty() {
            continue;
        }
        let positives: Vec<usize> = (0..n_sv).filter(|&sv| labels[sv] == class).collect();
        let negatives: Vec<usize> = (0..n_sv).filter(|&sv| clean_background[sv]).collect();
        if positives.len() < 2 || negatives.len() < 2 {
            warnings.push(format!(
                "class {class}: no usable >=50% supervoxels to arbitrate {} borderline supervoxel(s); defaulting to background",
                pending.len()
            ));
            continue;
        }
        let mut x = Vec::with_capacity((positives.len() + negatives.len()) * n_modes);
        let mut y = Vec::with_capacity(positives.len() + negatives.len());
        for &sv in positives.iter().chain(&negatives) {
            x.extend_from_slice(mean_of(sv));
            y.push(if labels[sv] == class { class } else { LABEL_BACKGROUND });
        }
        let lda = train_lda(&x, n_modes, &y, lambda_reg)?;
        let mut q = Vec::with_capacity(pending.len() * n_modes);
        for &sv in &pending {
            q.extend_from_slice(mean_of(sv));
        }
        let pot = predict_proba(&lda, &q, n_modes)?;
        for (i, &sv) in pending.iter().enumerate() {
            let row = pot.row(i);
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(c, _)| c)
                .unwrap();
            labels[sv] = pot.classes[best];
        }
    }

    Ok(TrainingLabels { labels, warnings })
}
