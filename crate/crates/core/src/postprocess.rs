//! From belief maps to binary segmentations and scores: thresholding with
//! largest-connected-component filtering, Dice overlap, voxelwise
//! sensitivity/specificity, and ROC/AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::components_26;
use crate::volume::{LabelVolume, VolumeHeader, LABEL_TUMOUR};

/// Thresholds a per-voxel belief field at `t` (mask = belief >= t) and
/// keeps only the largest 26-connected component (ties broken by smallest
/// minimal linear index). Returns the binary label volume and a flag set
/// when nothing survived the threshold.
pub fn threshold_and_lcc(
    belief: &[f64],
    header: &VolumeHeader,
    t: f64,
) -> Result<(LabelVolume, bool)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Parameter(format!(
            "threshold must lie in [0, 1], got {t}"
        )));
    }
    if belief.len() != header.n_spatial() {
        return Err(Error::Parameter(format!(
            "belief field of {} values does not match {} voxels",
            belief.len(),
            header.n_spatial()
        )));
    }
    let dims = header.spatial_dims();
    let mask: Vec<u32> = belief.iter().map(|&b| (b >= t) as u32).collect();
    let comps = components_26(&mask, dims, Some(0));
    let mut labels = vec![0u8; belief.len()];
    let no_detection = comps.is_empty();
    if let Some(best) = comps.iter().max_by(|a, b| {
        a.size()
            .cmp(&b.size())
            .then(b.min_linear().cmp(&a.min_linear()))
    }) {
        for &v in &best.voxels {
            labels[v] = LABEL_TUMOUR;
        }
    }
    let mut h = header.clone();
    h.dims[3] = 1;
    Ok((LabelVolume::new(h, labels, LABEL_TUMOUR)?, no_detection))
}

/// Dice similarity coefficient `2|X n Y| / (|X| + |Y|)`. Two empty masks
/// agree on absence and score 1; empty against non-empty scores 0.
pub fn dsc(a: &[bool], b: &[bool]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "mask lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Correct-detection rule: DSC strictly above 20%.
pub fn detection_flag(dsc_value: f64) -> bool {
    dsc_value > 0.2
}

/// Sensitivity and specificity of a binary mask against a truth mask.
pub fn sensitivity_specificity(pred: &[bool], truth: &[bool]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Parameter("mask lengths differ".into()));
    }
    let (mut tp, mut fp, mut tn, mut fne) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fne += 1,
        }
    }
    let sens = if tp + fne > 0 {
        tp as f64 / (tp + fne) as f64
    } else {
        1.0
    };
    let spec = if tn + fp > 0 {
        tn as f64 / (tn + fp) as f64
    } else {
        1.0
    };
    Ok((sens, spec))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// An ROC sweep: thresholds strictly decreasing, so sensitivity is
/// non-decreasing along the list. `auc` is the trapezoidal integral of
/// sensitivity against (1 - specificity), anchored at (0,0) and (1,1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Sweeps thresholds over the sorted unique belief values (subsampled to
/// `n_thresholds`, always including 0 and 1) with mask = belief >= t.
pub fn roc(belief: &[f64], truth: &[bool], n_thresholds: usize) -> Result<RocCurve> {
    if belief.len() != truth.len() {
        return Err(Error::Parameter("belief and truth lengths differ".into()));
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate(
            "ROC needs at least one positive and one negative voxel".into(),
        ));
    }

    let mut uniq: Vec<f64> = belief.to_vec();
    uniq.sort_by(|a, b| b.partial_cmp(a).unwrap());
    uniq.dedup();
    let mut thresholds: Vec<f64> = if n_thresholds > 0 && uniq.len() > n_thresholds {
        let step = (uniq.len() - 1) as f64 / (n_thresholds - 1).max(1) as f64;
        (0..n_thresholds)
            .map(|i| uniq[(i as f64 * step).round() as usize])
            .collect()
    } else {
        uniq
    };
    thresholds.push(0.0);
    thresholds.push(1.0);
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();

    // Sort samples by belief descending; cumulative counts give TP/FP at
    // each threshold in one pass.
    let mut order: Vec<usize> = (0..belief.len()).collect();
    order.sort_by(|&a, &b| belief[b].partial_cmp(&belief[a]).unwrap());
    let mut points = Vec::with_capacity(thresholds.len());
    let mut i = 0usize;
    let mut tp = 0usize;
    let mut fp = 0usize;
    for &t in &thresholds {
        while i < order.len() && belief[order[i]] >= t {
            if truth[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            sensitivity: tp as f64 / n_pos as f64,
            specificity: (n_neg - fp) as f64 / n_neg as f64,
        });
    }

    let auc = trapezoid_auc(&points);
    Ok(RocCurve { points, auc })
}

/// Trapezoidal integral of sensitivity vs (1 - specificity) with (0,0) and
/// (1,1) anchors.
fn trapezoid_auc(points: &[RocPoint]) -> f64 {
    let mut xy: Vec<(f64, f64)> = Vec::with_capacity(points.len() + 2);
    xy.push((0.0, 0.0));
    for p in points {
        xy.push((1.0 - p.specificity, p.sensitivity));
    }
    xy.push((1.0, 1.0));
    let mut auc = 0.0;
    for w in xy.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        auc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    auc
}

/// Mann-Whitney form of the AUC: the probability that a random positive
/// outranks a random negative, ties counting one half. O(P*N); test oracle.
pub fn pairwise_auc(belief: &[f64], truth: &[bool]) -> f64 {
    let pos: Vec<f64> = belief
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t)
        .map(|(&b, _)| b)
        .collect();
    let neg: Vec<f64> = belief
        .iter()
        .zip(truth)
        .filter(|(_, &t)| !t)
        .map(|(&b, _)| b)
        .collect();
    let mut acc = 0.0;
    for &p in &pos {
        for &q in &neg {
            acc += if p > q {
                1.0
            } else if p == q {
                0.5
            } else {
                0.0
            };
        }
    }
    acc / (pos.len() as f64 * neg.len() as f64)
}
