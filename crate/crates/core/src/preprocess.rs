//! Conversion of a raw dynamic volume into normalized signal-enhancement
//! form: Otsu-based ROI reduction, injection-time detection, per-voxel SE
//! computation with 80th-percentile scaling, and temporal resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{IndexBox, Volume4D, VolumeHeader};

/// Fraction of the volume maximum below which a baseline counts as air.
const EPSILON_BASELINE_FRACTION: f64 = 1e-6;

/// A signal-enhancement volume. `data` shares the layout of [`Volume4D`];
/// voxels whose baseline was at the air floor carry SE 0 and are flagged
/// in `air_mask`.
#[derive(Debug, Clone)]
pub struct SEVolume {
    pub header: VolumeHeader,
    pub data: Vec<f32>,
    /// First enhanced frame; frames `[0, injection_index)` are baseline.
    pub injection_index: usize,
    /// The 80th-percentile divisor applied to all SE values.
    pub norm_scale: f64,
    /// Per-voxel air flag (baseline below the epsilon floor).
    pub air_mask: Vec<bool>,
}

impl SEVolume {
    pub fn curve(&self, voxel: usize) -> impl Iterator<Item = f32> + '_ {
        let n = self.header.n_spatial();
        (0..self.header.dims[3]).map(move |t| self.data[voxel + t * n])
    }
}

/// Sidecar metadata written next to a persisted SE volume.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SEMeta {
    pub injection_index: usize,
    pub norm_scale: f64,
    pub roi: IndexBox,
    pub full_dims: [usize; 4],
}

/// Otsu threshold over a 256-bin histogram of `values`.
pub fn otsu_threshold(values: &[f32]) -> Result<f32> {
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Err(Error::Degenerate(
            "cannot threshold: single-intensity histogram".into(),
        ));
    }
    const BINS: usize = 256;
    let scale = BINS as f64 / (hi - lo) as f64;
    let mut hist = [0u64; BINS];
    for &v in values {
        let b = (((v - lo) as f64) * scale) as usize;
        hist[b.min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    let mut best = (0.0f64, 0usize);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, i);
        }
    }
    if best.0 == 0.0 {
        return Err(Error::Degenerate(
            "cannot threshold: zero between-class variance".into(),
        ));
    }
    // Upper edge of the winning bin; foreground is strictly above.
    Ok(lo + ((best.1 + 1) as f64 / scale) as f32)
}

/// ROI bounding box: Otsu threshold on the time-mean volume, tight box of
/// above-threshold voxels, then a fixed shrink (1/3 of the width from each
/// side, 1/4 of the height from the top, 1/8 from the bottom; z untouched).
/// Row 0 is the top.
pub fn otsu_roi(v: &Volume4D) -> Result<IndexBox> {
    let mean = v.time_mean();
    let thr = otsu_threshold(&mean)?;
    let dims = v.header.spatial_dims();
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    let mut i = 0;
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if mean[i] > thr {
                    any = true;
                    lo[0] = lo[0].min(x);
                    lo[1] = lo[1].min(y);
                    lo[2] = lo[2].min(z);
                    hi[0] = hi[0].max(x + 1);
                    hi[1] = hi[1].max(y + 1);
                    hi[2] = hi[2].max(z + 1);
                }
                i += 1;
            }
        }
    }
    if !any {
        return Err(Error::Degenerate("no voxels above Otsu threshold".into()));
    }
    let shrunk = shrink_roi(&IndexBox::new(lo, hi));
    shrunk.validate(dims)?;
    Ok(shrunk)
}

/// The fixed fractional shrink applied to the Otsu bounding box.
pub fn shrink_roi(bx: &IndexBox) -> IndexBox {
    let w = bx.hi[0] - bx.lo[0];
    let h = bx.hi[1] - bx.lo[1];
    let dx = w / 3;
    let top = h / 4;
    let bottom = h / 8;
    IndexBox::new(
        [bx.lo[0] + dx, bx.lo[1] + top, bx.lo[2]],
        [bx.hi[0] - dx, bx.hi[1] - bottom, bx.hi[2]],
    )
}

/// Frame where enhancement begins: argmax over `t in [1, T)` of the
/// forward difference of the spatial-mean curve; earliest index wins ties.
pub fn detect_injection(v: &Volume4D) -> Result<usize> {
    let t_len = v.header.dims[3];
    if t_len < 3 {
        return Err(Error::Degenerate(format!(
            "injection detection needs T >= 3, got {t_len}"
        )));
    }
    let means: Vec<f64> = (0..t_len).map(|t| v.frame_mean(t)).collect();
    let mut best_t = 1;
    let mut best_diff = f64::NEG_INFINITY;
    for t in 1..t_len {
        let d = means[t] - means[t - 1];
        if d > best_diff {
            best_diff = d;
            best_t = t;
        }
    }
    Ok(best_t)
}

/// Per-voxel SE conversion: baseline = mean of frames `[0, injection_index)`,
/// `SE(t) = (signal - baseline) / baseline`, then division by the
/// 80th percentile (nearest-rank) of per-voxel maximum SE. The percentile is
/// taken over the volume as given, so callers crop to the ROI first; voxels
/// flagged as air are excluded from the percentile support.
pub fn to_se(v: &Volume4D, injection_index: usize) -> Result<SEVolume> {
    let t_len = v.header.dims[3];
    if injection_index < 1 || injection_index >= t_len {
        return Err(Error::Parameter(format!(
            "injection index {injection_index} outside [1, {t_len})"
        )));
    }
    let n = v.header.n_spatial();
    let vol_max = v.data.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let eps = EPSILON_BASELINE_FRACTION * vol_max.abs().max(f64::MIN_POSITIVE);

    let mut se = vec![0.0f32; v.data.len()];
    let mut air = vec![false; n];
    let mut max_se = Vec::with_capacity(n);
    for voxel in 0..n {
        let mut baseline = 0.0f64;
        for t in 0..injection_index {
            baseline += v.data[voxel + t * n] as f64;
        }
        baseline /= injection_index as f64;
        if baseline <= eps {
            air[voxel] = true;
            continue; // SE stays 0 everywhere for this voxel
        }
        let mut vmax = f64::NEG_INFINITY;
        for t in 0..t_len {
            let s = (v.data[voxel + t * n] as f64 - baseline) / baseline;
            se[voxel + t * n] = s as f32;
            vmax = vmax.max(s);
        }
        max_se.push(vmax);
    }
    if max_se.is_empty() {
        return Err(Error::Degenerate("all voxels flagged as air".into()));
    }
    let norm_scale = nearest_rank_percentile(&mut max_se, 80.0);
    if !(norm_scale > 0.0) {
        return Err(Error::Degenerate(format!(
            "non-positive SE normalization scale {norm_scale}"
        )));
    }
    for s in se.iter_mut() {
        *s = (*s as f64 / norm_scale) as f32;
    }
    Ok(SEVolume {
        header: v.header.clone(),
        data: se,
        injection_index,
        norm_scale,
        air_mask: air,
    })
}

/// Nearest-rank percentile: value at rank `ceil(p/100 * N)` of the sorted
/// sample (1-based). Sorts its input.
pub fn nearest_rank_percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = ((p / 100.0) * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// Per-voxel linear interpolation onto the grid `t0 + k*dt_target`, spanning
/// the original time range with no extrapolation. A target equal to the
/// source interval returns the input unchanged.
pub fn resample_time(se: &SEVolume, dt_target_s: f64) -> Result<SEVolume> {
    let t_len = se.header.dims[3];
    if t_len < 2 {
        return Err(Error::Degenerate("temporal resampling needs T >= 2".into()));
    }
    if !(dt_target_s > 0.0) {
        return Err(Error::Parameter(format!(
            "target frame interval must be positive, got {dt_target_s}"
        )));
    }
    let dt = se.header.dt_s;
    if (dt - dt_target_s).abs() <= 1e-9 * dt.max(dt_target_s) {
        return Ok(se.clone());
    }
    let span = (t_len - 1) as f64 * dt;
    let t_new = (span / dt_target_s + 1e-9).floor() as usize + 1;
    if t_new < 2 {
        return Err(Error::Degenerate(format!(
            "resampling to {dt_target_s} s leaves fewer than 2 frames"
        )));
    }
    let n = se.header.n_spatial();
    let mut data = vec![0.0f32; n * t_new];
    for k in 0..t_new {
        let ts = k as f64 * dt_target_s;
        let pos = ts / dt;
        let i0 = (pos.floor() as usize).min(t_len - 1);
        let i1 = (i0 + 1).min(t_len - 1);
        let frac = (pos - i0 as f64).clamp(0.0, 1.0);
        for voxel in 0..n {
            let a = se.data[voxel + i0 * n] as f64;
            let b = se.data[voxel + i1 * n] as f64;
            data[voxel + k * n] = (a + frac * (b - a)) as f32;
        }
    }
    let mut header = se.header.clone();
    header.dims[3] = t_new;
    header.dt_s = dt_target_s;
    // Frames strictly before the first enhanced original sample stay baseline.
    let baseline_span = (se.injection_index - 1) as f64 * dt;
    let injection_index = ((baseline_span / dt_target_s + 1e-9).floor() as usize + 1)
        .clamp(1, t_new - 1);
    Ok(SEVolume {
        header,
        data,
        injection_index,
        norm_scale: se.norm_scale,
        air_mask: se.air_mask.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;

    fn vol(dims: [usize; 4], data: Vec<f32>) -> Volume4D {
        Volume4D::new(VolumeHeader::new(dims, [1.0, 1.0, 1.0], 15.0), data).unwrap()
    }

    #[test]
    fn shrink_matches_fraction_arithmetic() {
        // Width 120: remove 40 per side -> extent 40.
        let bx = shrink_roi(&IndexBox::new([0, 0, 0], [120, 80, 10]));
        assert_eq!(bx.lo[0], 40);
        assert_eq!(bx.hi[0], 80);
        // Height 80: keep rows [20, 70).
        assert_eq!(bx.lo[1], 20);
        assert_eq!(bx.hi[1], 70);
        // z untouched.
        assert_eq!((bx.lo[2], bx.hi[2]), (0, 10));
    }

    #[test]
    fn otsu_roi_contained_in_foreground_box() {
        // 20x16x4 volume with a bright block; ROI must sit inside it.
        let dims = [20, 16, 4, 1];
        let mut data = vec![1.0f32; 20 * 16 * 4];
        for z in 0..4 {
            for y in 2..14 {
                for x in 4..16 {
                    data[x + 20 * (y + 16 * z)] = 100.0;
                }
            }
        }
        let v = vol(dims, data);
        let roi = otsu_roi(&v).unwrap();
        let fg = IndexBox::new([4, 2, 0], [16, 14, 4]);
        assert!(fg.contains(&roi), "{roi:?} not inside {fg:?}");
        // Width 12 -> remove 4 per side; height 12 -> remove 3 top, 1 bottom.
        assert_eq!(roi, IndexBox::new([8, 5, 0], [12, 13, 4]));
    }

    #[test]
    fn otsu_rejects_uniform_volume() {
        let v = vol([4, 4, 1, 1], vec![7.0; 16]);
        assert!(matches!(otsu_roi(&v), Err(Error::Degenerate(_))));
    }

    #[test]
    fn injection_at_steepest_mean_gradient() {
        // Mean curve [100,100,101,150,180] -> steepest rise at t=3.
        let means = [100.0f32, 100.0, 101.0, 150.0, 180.0];
        let data: Vec<f32> = means.iter().flat_map(|&m| vec![m; 4]).collect();
        let v = vol([2, 2, 1, 5], data);
        assert_eq!(detect_injection(&v).unwrap(), 3);
    }

    #[test]
    fn injection_tie_breaks_to_earliest() {
        let data: Vec<f32> = std::iter::repeat(50.0).take(4 * 4).collect();
        let v = vol([2, 2, 1, 4], data);
        assert_eq!(detect_injection(&v).unwrap(), 1);
    }

    #[test]
    fn injection_single_step() {
        let data: Vec<f32> = [10.0f32, 20.0, 20.0].iter().flat_map(|&m| vec![m; 4]).collect();
        let v = vol([2, 2, 1, 3], data);
        assert_eq!(detect_injection(&v).unwrap(), 1);
    }

    #[test]
    fn se_formula_before_scaling() {
        // Single voxel [100,100,200], injection 2: raw SE [0,0,1].
        let v = vol([1, 1, 1, 3], vec![100.0, 100.0, 200.0]);
        let se = to_se(&v, 2).unwrap();
        // Only voxel: max SE = 1.0, so norm_scale = 1.0 and values are raw.
        assert_eq!(se.norm_scale, 1.0);
        let curve: Vec<f32> = se.curve(0).collect();
        assert_eq!(curve, vec![0.0, 0.0, 1.0]);
        assert!(!se.air_mask[0]);
    }

    #[test]
    fn air_voxel_flagged_and_zeroed() {
        // Voxel 0 is air (baseline 0), voxel 1 enhances.
        let v = vol(
            [2, 1, 1, 3],
            vec![0.0, 100.0, 0.0, 100.0, 0.0, 150.0],
        );
        let se = to_se(&v, 2).unwrap();
        assert!(se.air_mask[0]);
        assert!(!se.air_mask[1]);
        assert!(se.curve(0).all(|s| s == 0.0));
    }

    #[test]
    fn percentile_scaling_by_sorting_oracle() {
        // 5 voxels with max SE 0.2,0.5,1.0,2.0,4.0; 80th percentile
        // (nearest rank: ceil(0.8*5)=4th) = 2.0, so SE is halved.
        let peaks = [0.2f32, 0.5, 1.0, 2.0, 4.0];
        let mut data = vec![100.0f32; 5]; // t=0 baseline
        data.extend(peaks.iter().map(|p| 100.0 * (1.0 + p))); // t=1
        data.extend(std::iter::repeat(100.0).take(5)); // t=2
        let v = vol([5, 1, 1, 3], data);
        let se = to_se(&v, 1).unwrap();
        assert!((se.norm_scale - 2.0).abs() < 1e-9);
        let t1: Vec<f32> = (0..5).map(|vx| se.data[vx + 5]).collect();
        for (got, want) in t1.iter().zip(peaks.iter().map(|p| p / 2.0)) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn se_rank_order_preserved_by_scaling() {
        let peaks = [0.3f32, 1.4, 0.9, 2.5, 0.1, 1.1];
        let mut data = vec![100.0f32; 6];
        data.extend(peaks.iter().map(|p| 100.0 * (1.0 + p)));
        let v = vol([6, 1, 1, 2], data);
        let se = to_se(&v, 1).unwrap();
        let t1: Vec<f32> = (0..6).map(|vx| se.data[vx + 6]).collect();
        let mut order: Vec<usize> = (0..6).collect();
        order.sort_by(|&a, &b| peaks[a].partial_cmp(&peaks[b]).unwrap());
        let mut order_se: Vec<usize> = (0..6).collect();
        order_se.sort_by(|&a, &b| t1[a].partial_cmp(&t1[b]).unwrap());
        assert_eq!(order, order_se);
    }

    fn se_volume(times_dt: f64, curve: &[f32]) -> SEVolume {
        let mut header = VolumeHeader::new([1, 1, 1, curve.len()], [1.0; 3], times_dt);
        header.kind = VolumeKind::Scalar;
        SEVolume {
            header,
            data: curve.to_vec(),
            injection_index: 1,
            norm_scale: 1.0,
            air_mask: vec![false],
        }
    }

    #[test]
    fn linear_resampling_matches_hand_value() {
        // Times [0,15,30], values [0,1,2], target 12s: value at t=12 is 0.8.
        let se = se_volume(15.0, &[0.0, 1.0, 2.0]);
        let out = resample_time(&se, 12.0).unwrap();
        assert_eq!(out.header.dims[3], 3); // 0, 12, 24
        assert!((out.data[1] - 0.8).abs() < 1e-6);
        assert!((out.data[2] - 1.6).abs() < 1e-6);
    }

    #[test]
    fn resample_identity_when_dt_matches() {
        let se = se_volume(12.0, &[0.0, 0.5, 1.0]);
        let out = resample_time(&se, 12.0).unwrap();
        assert_eq!(out.data, se.data);
        assert_eq!(out.header.dims, se.header.dims);
    }

    #[test]
    fn resampled_endpoints_equal_original() {
        // Property over a few random-ish curves: first sample preserved and
        // final sample preserved whenever the new grid lands on the endpoint.
        for seed in 0..5u32 {
            let curve: Vec<f32> = (0..7)
                .map(|i| ((i as f32 + seed as f32) * 0.9).sin())
                .collect();
            let se = se_volume(10.0, &curve);
            let out = resample_time(&se, 12.0).unwrap();
            assert_eq!(out.data[0], curve[0]);
            let last_t = (out.header.dims[3] - 1) as f64 * 12.0;
            assert!(last_t <= 60.0 + 1e-9);
            if (last_t - 60.0).abs() < 1e-9 {
                let last = out.data[out.header.dims[3] - 1];
                assert!((last - curve[6]).abs() < 1e-6);
            }
        }
    }
}
