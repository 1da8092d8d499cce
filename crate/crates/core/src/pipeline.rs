//! Pipeline orchestration: per-case preparation (ROI, SE conversion,
//! clustering, graph construction), model training, held-out segmentation,
//! evaluation, and leave-one-out cross-validation over a cohort.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, PartPotentials};
use crate::error::{Error, Result};
use crate::features::{self, FeatureMatrix};
use crate::grid;
use crate::model::SegModel;
use crate::parts::{self, BeliefMap, SpatialConfig};
use crate::pca;
use crate::postprocess::{self, RocCurve};
use crate::preprocess::{self, SEVolume};
use crate::supervoxel::{self, SlicParams, SupervoxelMap};
use crate::volume::{
    crop, crop_labels, embed_labels, IndexBox, LabelVolume, Volume4D, VolumeHeader,
    LABEL_BACKGROUND, LABEL_BLADDER, LABEL_LUMEN, LABEL_TUMOUR,
};

const EVAL_ROC_THRESHOLDS: usize = 256;

/// All pipeline parameters with their published defaults
/// (c = 0.05, S_n = 350, T_s = 0.5, T_p = 0.15, 12 s frames).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineParams {
    pub compactness: f64,
    pub supervoxel_size: usize,
    pub t_s: f64,
    pub t_p: f64,
    pub dt_target_s: f64,
    /// Normalized modes used for clustering.
    pub clustering_modes: usize,
    /// Shared-basis modes used for classification features.
    pub feature_modes: usize,
    pub slic_max_iters: usize,
    pub slic_tol_mm: f64,
    pub perturb_seeds: bool,
    pub lambda_reg: f64,
    pub epsilon_msg: f64,
    pub sigma_floor_mm: f64,
    pub prior_sigma_floor: f64,
    pub gradient_before_normalization: bool,
    pub unary_weight: f64,
    pub pairwise_weight: f64,
    pub roc_thresholds: usize,
}

impl Default for PipelineParams {
    fn default() -> Self {
        PipelineParams {
            compactness: 0.05,
            supervoxel_size: 350,
            t_s: 0.5,
            t_p: 0.15,
            dt_target_s: 12.0,
            clustering_modes: 3,
            feature_modes: 5,
            slic_max_iters: 10,
            slic_tol_mm: 0.1,
            perturb_seeds: false,
            lambda_reg: classifier::DEFAULT_LAMBDA_REG,
            epsilon_msg: parts::DEFAULT_EPSILON_MSG,
            sigma_floor_mm: parts::DEFAULT_SIGMA_FLOOR_MM,
            prior_sigma_floor: parts::DEFAULT_PRIOR_SIGMA_FLOOR,
            gradient_before_normalization: false,
            unary_weight: 1.0,
            pairwise_weight: 1.0,
            roc_thresholds: 256,
        }
    }
}

impl PipelineParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("t_s", self.t_s), ("t_p", self.t_p)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Parameter(format!("{name} = {v} outside [0, 1]")));
            }
        }
        if !(self.dt_target_s > 0.0) {
            return Err(Error::Parameter(format!(
                "dt_target_s must be positive, got {}",
                self.dt_target_s
            )));
        }
        if self.clustering_modes == 0 || self.feature_modes == 0 {
            return Err(Error::Parameter("mode counts must be >= 1".into()));
        }
        self.slic_params().validate()
    }

    pub fn slic_params(&self) -> SlicParams {
        SlicParams {
            size_voxels: self.supervoxel_size,
            compactness: self.compactness,
            n_features: self.clustering_modes,
            max_iters: self.slic_max_iters,
            tol_mm: self.slic_tol_mm,
            perturb_seeds: self.perturb_seeds,
        }
    }

    fn spatial_config(&self) -> SpatialConfig {
        SpatialConfig {
            sigma_floor_mm: self.sigma_floor_mm,
            prior_sigma_floor: self.prior_sigma_floor,
            epsilon_msg: self.epsilon_msg,
            unary_weight: self.unary_weight,
            pairwise_weight: self.pairwise_weight,
            ..SpatialConfig::default()
        }
    }
}

/// Everything that depends only on one case and the fold-independent
/// parameters: the ROI-cropped SE volume, the smoothed per-voxel curves,
/// the supervoxel map with adjacency and direction neighbors, and the
/// truth restricted to the ROI.
pub struct CaseArtifacts {
    pub id: String,
    pub se: SEVolume,
    pub roi: IndexBox,
    pub full_header: VolumeHeader,
    /// Smoothed SE curves, row-major `roi_voxels x T`.
    pub curves: Vec<f64>,
    pub map: SupervoxelMap,
    pub dirs: Vec<[u32; 6]>,
    pub truth_roi: Option<Vec<u8>>,
    pub truth_full: Option<LabelVolume>,
}

/// Gathers the per-voxel SE curves of a volume and smooths each one;
/// row-major `n_voxels x T`.
pub fn curves_from_se(se: &SEVolume) -> Vec<f64> {
    let n_vox = se.header.n_spatial();
    let t_len = se.header.dims[3];
    let mut curves = Vec::with_capacity(n_vox * t_len);
    let mut raw = vec![0.0f64; t_len];
    for v in 0..n_vox {
        for (t, r) in raw.iter_mut().enumerate() {
            *r = se.data[v + t * n_vox] as f64;
        }
        curves.extend_from_slice(&pca::smooth_curve(&raw));
    }
    curves
}

/// Runs preprocessing and over-segmentation for one case.
pub fn prepare_case(
    id: &str,
    scan: &Volume4D,
    truth: Option<&LabelVolume>,
    params: &PipelineParams,
    roi_override: Option<IndexBox>,
) -> Result<CaseArtifacts> {
    params.validate()?;
    let roi = match roi_override {
        Some(b) => {
            b.validate(scan.header.spatial_dims())?;
            b
        }
        None => preprocess::otsu_roi(scan)?,
    };
    let cropped = crop(scan, &roi)?;
    let injection = preprocess::detect_injection(&cropped)?;
    let se = preprocess::to_se(&cropped, injection)?;
    let se = preprocess::resample_time(&se, params.dt_target_s)?;
    if let Some(t) = truth {
        if t.header.spatial_dims() != scan.header.spatial_dims() {
            return Err(Error::Malformed(format!(
                "case {id}: truth dims {:?} do not match scan {:?}",
                t.header.dims, scan.header.dims
            )));
        }
    }
    prepare_from_se(id, se, roi, scan.header.clone(), truth, params)
}

/// Clustering and graph construction on an already-preprocessed SE volume
/// (which covers the ROI grid). `roi` places it inside `full_header` for
/// re-embedding; the truth is given on the full grid.
pub fn prepare_from_se(
    id: &str,
    se: SEVolume,
    roi: IndexBox,
    full_header: VolumeHeader,
    truth: Option<&LabelVolume>,
    params: &PipelineParams,
) -> Result<CaseArtifacts> {
    params.validate()?;
    if se.header.spatial_dims() != roi.extent() {
        return Err(Error::Parameter(format!(
            "case {id}: SE dims {:?} do not match ROI extent {:?}",
            se.header.spatial_dims(),
            roi.extent()
        )));
    }
    let t_len = se.header.dims[3];
    let curves = curves_from_se(&se);

    // Per-case basis for clustering; normalized modes feed SLIC.
    let cluster_basis = pca::fit_pca(&curves, t_len, params.clustering_modes.min(t_len))?;
    let coeffs = pca::project_all(&cluster_basis, &curves, t_len)?;
    let (slic_features, _) = pca::normalize_modes(&coeffs, cluster_basis.n_modes())?;

    let roi_dims = se.header.spatial_dims();
    let mut slic = params.slic_params();
    slic.n_features = cluster_basis.n_modes();
    let mut map = supervoxel::run_slic(
        &slic_features,
        &se.header,
        &slic,
        &IndexBox::full(roi_dims),
    )?;
    supervoxel::build_adjacency(&mut map);
    let dirs = features::direction_neighbors(&map);

    let (truth_roi, truth_full) = match truth {
        Some(t) => {
            let cropped_truth = crop_labels(t, &roi)?;
            (Some(cropped_truth.labels), Some(t.clone()))
        }
        None => (None, None),
    };

    Ok(CaseArtifacts {
        id: id.to_string(),
        se,
        roi,
        full_header,
        curves,
        map,
        dirs,
        truth_roi,
        truth_full,
    })
}

/// Trains the full model (reference basis, normalizer, LDA, parts) from
/// prepared cases with ground truth. The reference basis comes from the
/// first training case.
pub fn train_model(
    cases: &[&CaseArtifacts],
    params: &PipelineParams,
) -> Result<(SegModel, Vec<String>)> {
    if cases.is_empty() {
        return Err(Error::Degenerate("no training cases".into()));
    }
    let mut warnings = Vec::new();
    let t_len = cases[0].se.header.dims[3];
    for c in cases {
        if c.se.header.dims[3] != t_len {
            return Err(Error::Malformed(format!(
                "case {} has {} frames after resampling; expected {t_len}",
                c.id, c.se.header.dims[3]
            )));
        }
        if c.truth_roi.is_none() {
            return Err(Error::Parameter(format!(
                "training case {} has no ground truth",
                c.id
            )));
        }
    }

    let basis = pca::fit_pca(&cases[0].curves, t_len, params.feature_modes.min(t_len))?;
    let n_modes = basis.n_modes();

    let mut per_case_stats = Vec::with_capacity(cases.len());
    let mut per_case_labels = Vec::with_capacity(cases.len());
    for c in cases {
        let coeffs = pca::project_all(&basis, &c.curves, t_len)?;
        let stats = features::supervoxel_stats(&c.map, &coeffs, n_modes)?;
        let tl = classifier::make_training_labels(
            &c.map,
            c.truth_roi.as_ref().unwrap(),
            &coeffs,
            n_modes,
            params.lambda_reg,
        )?;
        for w in tl.warnings {
            warnings.push(format!("case {}: {w}", c.id));
        }
        per_case_stats.push(stats);
        per_case_labels.push(tl.labels);
    }

    // A child part class needs at least two pooled supervoxels to train the
    // classifier; singletons are demoted to background (and the part drops
    // out of the spatial model downstream).
    let mut class_counts = [0usize; 4];
    for labels in &per_case_labels {
        for &l in labels {
            class_counts[l as usize] += 1;
        }
    }
    for class in [LABEL_LUMEN, LABEL_BLADDER] {
        if class_counts[class as usize] == 1 {
            warnings.push(format!(
                "class {class} has a single training supervoxel; demoted to background"
            ));
            for labels in per_case_labels.iter_mut() {
                for l in labels.iter_mut() {
                    if *l == class {
                        *l = LABEL_BACKGROUND;
                    }
                }
            }
        }
    }

    let stat_refs: Vec<(&[f64], &[[u32; 6]])> = cases
        .iter()
        .zip(&per_case_stats)
        .map(|(c, s)| (s.as_slice(), c.dirs.as_slice()))
        .collect();
    let normalizer = features::fit_normalizer(
        &stat_refs,
        2 * n_modes,
        params.gradient_before_normalization,
    )?;

    let mut x = Vec::new();
    let mut y = Vec::new();
    for ((c, stats), labels) in cases.iter().zip(&per_case_stats).zip(&per_case_labels) {
        let fm = features::build_features(stats, &c.dirs, n_modes, &normalizer);
        x.extend_from_slice(&fm.values);
        y.extend_from_slice(labels);
    }
    let lda = classifier::train_lda(&x, 4 * n_modes, &y, params.lambda_reg)?;

    let spatial_cases: Vec<(&SupervoxelMap, &[u8])> = cases
        .iter()
        .zip(&per_case_labels)
        .map(|(c, l)| (&c.map, l.as_slice()))
        .collect();
    let spatial = parts::train_spatial(&spatial_cases, &params.spatial_config())?;
    warnings.extend(spatial.warnings);

    Ok((
        SegModel {
            pca_basis: basis,
            normalizer,
            lda,
            parts: spatial.model,
            params: params.clone(),
        },
        warnings,
    ))
}

/// Segmentation outputs for one case, on both the ROI grid and re-embedded
/// into the full scan grid.
pub struct SegmentOutput {
    pub features: FeatureMatrix,
    pub potentials: PartPotentials,
    pub beliefs: BeliefMap,
    /// Per-ROI-voxel tumour probability from the classifier alone.
    pub unary_voxel: Vec<f64>,
    /// Per-ROI-voxel tumour belief after pieces-of-parts.
    pub belief_voxel: Vec<f64>,
    /// Pieces-of-parts segmentation (threshold T_p + largest component).
    pub seg_parts: LabelVolume,
    /// Supervoxel-only segmentation (threshold T_s + largest component).
    pub seg_sv: LabelVolume,
    /// Supervoxel-only segmentation at T_p without post-processing.
    pub seg_sv_raw: LabelVolume,
    pub no_detection_parts: bool,
    pub no_detection_sv: bool,
}

pub fn segment_case(case: &CaseArtifacts, model: &SegModel) -> Result<SegmentOutput> {
    let params = &model.params;
    let t_len = case.se.header.dims[3];
    let n_modes = model.pca_basis.n_modes();
    let coeffs = pca::project_all(&model.pca_basis, &case.curves, t_len)?;
    let stats = features::supervoxel_stats(&case.map, &coeffs, n_modes)?;
    let fm = features::build_features(&stats, &case.dirs, n_modes, &model.normalizer);
    let potentials = classifier::predict_proba(&model.lda, &fm.values, fm.n_cols)?;

    let unary_sv = potentials
        .class_column(model.parts.root_class)
        .ok_or_else(|| Error::Internal("classifier lacks the root class".into()))?;
    let mut beliefs = parts::collect_evidence(&potentials, &case.map, &model.parts)?;
    parts::distribute_evidence(&mut beliefs, &potentials, &case.map, &model.parts)?;

    let unary_voxel = case.map.broadcast(&unary_sv);
    let belief_voxel = case.map.broadcast(&beliefs.root);

    let roi_header = &case.se.header;
    let (seg_parts_roi, none_parts) =
        postprocess::threshold_and_lcc(&belief_voxel, roi_header, params.t_p)?;
    let (seg_sv_roi, none_sv) =
        postprocess::threshold_and_lcc(&unary_voxel, roi_header, params.t_s)?;
    let raw_labels: Vec<u8> = unary_voxel
        .iter()
        .map(|&p| (p >= params.t_p) as u8 * LABEL_TUMOUR)
        .collect();
    let mut raw_header = roi_header.clone();
    raw_header.dims[3] = 1;
    let seg_sv_raw_roi = LabelVolume::new(raw_header, raw_labels, LABEL_TUMOUR)?;

    Ok(SegmentOutput {
        features: fm,
        potentials,
        beliefs,
        unary_voxel,
        belief_voxel,
        seg_parts: embed_labels(&seg_parts_roi, &case.full_header, &case.roi)?,
        seg_sv: embed_labels(&seg_sv_roi, &case.full_header, &case.roi)?,
        seg_sv_raw: embed_labels(&seg_sv_raw_roi, &case.full_header, &case.roi)?,
        no_detection_parts: none_parts,
        no_detection_sv: none_sv,
    })
}

/// Broadcasts an ROI field into the full grid with zeros outside.
pub fn embed_field(field: &[f64], full: &VolumeHeader, roi: &IndexBox) -> Vec<f64> {
    let full_dims = full.spatial_dims();
    let e = roi.extent();
    let mut out = vec![0.0; full.n_spatial()];
    for z in 0..e[2] {
        for y in 0..e[1] {
            for x in 0..e[0] {
                let src = grid::linear([x, y, z], e);
                let dst = grid::linear([x + roi.lo[0], y + roi.lo[1], z + roi.lo[2]], full_dims);
                out[dst] = field[src];
            }
        }
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dsc_parts: f64,
    pub dsc_sv: f64,
    pub dsc_sv_raw: f64,
    pub auc_parts: f64,
    pub auc_sv: f64,
    pub sensitivity_parts: f64,
    pub specificity_parts: f64,
    pub detected_parts: bool,
    pub detected_sv: bool,
    pub detected_sv_raw: bool,
}

/// Voxelwise metrics of a segmentation output against the case's ground
/// truth, on the full grid.
pub fn evaluate_case(case: &CaseArtifacts, out: &SegmentOutput) -> Result<CaseMetrics> {
    let truth = case
        .truth_full
        .as_ref()
        .ok_or_else(|| Error::Parameter(format!("case {} has no ground truth", case.id)))?;
    let truth_mask = truth.mask_of(LABEL_TUMOUR);
    let parts_mask = out.seg_parts.mask_of(LABEL_TUMOUR);
    let sv_mask = out.seg_sv.mask_of(LABEL_TUMOUR);
    let raw_mask = out.seg_sv_raw.mask_of(LABEL_TUMOUR);

    let dsc_parts = postprocess::dsc(&parts_mask, &truth_mask)?;
    let dsc_sv = postprocess::dsc(&sv_mask, &truth_mask)?;
    let dsc_sv_raw = postprocess::dsc(&raw_mask, &truth_mask)?;
    let (sens, spec) = postprocess::sensitivity_specificity(&parts_mask, &truth_mask)?;

    let belief_full = embed_field(&out.belief_voxel, &case.full_header, &case.roi);
    let unary_full = embed_field(&out.unary_voxel, &case.full_header, &case.roi);
    let auc_parts = postprocess::roc(&belief_full, &truth_mask, EVAL_ROC_THRESHOLDS)?.auc;
    let auc_sv = postprocess::roc(&unary_full, &truth_mask, EVAL_ROC_THRESHOLDS)?.auc;

    Ok(CaseMetrics {
        id: case.id.clone(),
        dsc_parts,
        dsc_sv,
        dsc_sv_raw,
        auc_parts,
        auc_sv,
        sensitivity_parts: sens,
        specificity_parts: spec,
        detected_parts: postprocess::detection_flag(dsc_parts),
        detected_sv: postprocess::detection_flag(dsc_sv),
        detected_sv_raw: postprocess::detection_flag(dsc_sv_raw),
    })
}

/// Per-case ROC table for the pieces-of-parts beliefs (full grid).
pub fn roc_for_case(case: &CaseArtifacts, out: &SegmentOutput, n_thresholds: usize) -> Result<RocCurve> {
    let truth = case
        .truth_full
        .as_ref()
        .ok_or_else(|| Error::Parameter("no ground truth".into()))?;
    let belief_full = embed_field(&out.belief_voxel, &case.full_header, &case.roi);
    postprocess::roc(&belief_full, &truth.mask_of(LABEL_TUMOUR), n_thresholds)
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossvalSummary {
    pub n_cases: usize,
    pub median_dsc_parts: f64,
    pub median_dsc_sv: f64,
    pub median_dsc_sv_raw: f64,
    pub detections_parts: usize,
    pub detections_sv: usize,
    pub detections_sv_raw: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CrossvalReport {
    pub rows: Vec<CaseMetrics>,
    /// Pieces-of-parts ROC table per case, aligned with `rows`.
    pub roc_curves: Vec<RocCurve>,
    pub summary: CrossvalSummary,
    pub warnings: Vec<String>,
}

pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Leave-one-out cross-validation: for each case, trains on the remaining
/// cases and evaluates the held-out one. Folds run in parallel; the report
/// rows keep the input order.
pub fn crossval(cases: &[CaseArtifacts], params: &PipelineParams) -> Result<CrossvalReport> {
    if cases.len() < 3 {
        return Err(Error::Degenerate(format!(
            "cross-validation needs at least 3 cases, got {}",
            cases.len()
        )));
    }
    if let Some(bad) = cases.iter().find(|c| c.truth_roi.is_none()) {
        return Err(Error::Parameter(format!(
            "case {} has no ground truth",
            bad.id
        )));
    }
    let fold_results: Vec<Result<(CaseMetrics, RocCurve, Vec<String>)>> = (0..cases.len())
        .into_par_iter()
        .map(|i| {
            let training: Vec<&CaseArtifacts> = cases
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, c)| c)
                .collect();
            let (model, warnings) = train_model(&training, params)?;
            let out = segment_case(&cases[i], &model)?;
            let metrics = evaluate_case(&cases[i], &out)?;
            let roc = roc_for_case(&cases[i], &out, params.roc_thresholds)?;
            Ok((metrics, roc, warnings))
        })
        .collect();

    let mut rows = Vec::with_capacity(cases.len());
    let mut roc_curves = Vec::with_capacity(cases.len());
    let mut warnings = Vec::new();
    for (i, r) in fold_results.into_iter().enumerate() {
        let (m, roc, w) =
            r.map_err(|e| Error::Internal(format!("fold {} ({}): {e}", i, cases[i].id)))?;
        warnings.extend(w.into_iter().map(|w| format!("fold {}: {w}", cases[i].id)));
        rows.push(m);
        roc_curves.push(roc);
    }

    let summary = CrossvalSummary {
        n_cases: rows.len(),
        median_dsc_parts: median(&rows.iter().map(|r| r.dsc_parts).collect::<Vec<_>>()),
        median_dsc_sv: median(&rows.iter().map(|r| r.dsc_sv).collect::<Vec<_>>()),
        median_dsc_sv_raw: median(&rows.iter().map(|r| r.dsc_sv_raw).collect::<Vec<_>>()),
        detections_parts: rows.iter().filter(|r| r.detected_parts).count(),
        detections_sv: rows.iter().filter(|r| r.detected_sv).count(),
        detections_sv_raw: rows.iter().filter(|r| r.detected_sv_raw).count(),
    };
    Ok(CrossvalReport {
        rows,
        roc_curves,
        summary,
        warnings,
    })
}

/// Deterministic CSV rendering of per-case metrics.
pub fn metrics_csv(rows: &[CaseMetrics]) -> String {
    let mut s = String::from(
        "case,dsc_pieces_of_parts,dsc_supervoxel,dsc_supervoxel_raw,auc_pieces_of_parts,auc_supervoxel,sensitivity,specificity,detected_pieces_of_parts,detected_supervoxel,detected_supervoxel_raw\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
            r.id,
            r.dsc_parts,
            r.dsc_sv,
            r.dsc_sv_raw,
            r.auc_parts,
            r.auc_sv,
            r.sensitivity_parts,
            r.specificity_parts,
            r.detected_parts as u8,
            r.detected_sv as u8,
            r.detected_sv_raw as u8
        ));
    }
    s
}

pub fn summary_csv(summary: &CrossvalSummary) -> String {
    format!(
        "n_cases,median_dsc_pieces_of_parts,median_dsc_supervoxel,median_dsc_supervoxel_raw,detections_pieces_of_parts,detections_supervoxel,detections_supervoxel_raw\n{},{:.6},{:.6},{:.6},{},{},{}\n",
        summary.n_cases,
        summary.median_dsc_parts,
        summary.median_dsc_sv,
        summary.median_dsc_sv_raw,
        summary.detections_parts,
        summary.detections_sv,
        summary.detections_sv_raw
    )
}

pub fn roc_csv(curve: &RocCurve) -> String {
    let mut s = String::from("threshold,sensitivity,specificity\n");
    for p in &curve.points {
        s.push_str(&format!(
            "{:.6},{:.6},{:.6}\n",
            p.threshold, p.sensitivity, p.specificity
        ));
    }
    s
}
