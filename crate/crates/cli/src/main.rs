//! `perfseg`: phantom generation, preprocessing, supervoxel clustering,
//! model training, segmentation, evaluation, and leave-one-out
//! cross-validation over a case directory.
//!
//! Exit codes: 0 ok, 2 configuration error, 3 data error, 4 internal.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use perfseg_core::error::{Error, Result};
use perfseg_core::model::{read_model, write_model, SegModel};
use perfseg_core::phantom::{self, PhantomSpec};
use perfseg_core::pipeline::{self, CaseArtifacts, PipelineParams};
use perfseg_core::postprocess;
use perfseg_core::preprocess::{self, SEMeta, SEVolume};
use perfseg_core::supervoxel;
use perfseg_core::volume::{self, IndexBox, VolumeKind, LABEL_TUMOUR};
use perfseg_core::{features, pca};

#[derive(Parser)]
#[command(name = "perfseg", version, about = "Perfusion-supervoxel segmentation of dynamic contrast-enhanced volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic 4D phantom case (or a cohort of them).
    Phantom(PhantomArgs),
    /// ROI reduction, SE conversion and temporal resampling of a raw scan.
    Preprocess(PreprocessArgs),
    /// Perfusion-supervoxel over-segmentation of an SE volume.
    Supervoxel(SupervoxelArgs),
    /// Per-supervoxel feature extraction with a trained model's basis.
    Features(FeaturesArgs),
    /// Train a model (basis, normalizer, classifier, parts) from a case directory.
    Train(TrainArgs),
    /// Segment a case with a trained model.
    Segment(SegmentArgs),
    /// Score a segmentation (or belief volume) against ground truth.
    Evaluate(EvaluateArgs),
    /// Leave-one-out cross-validation over a case directory.
    Crossval(CrossvalArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2.0)]
    noise: f64,
    /// Add a decoy enhancing structure far from the lumen.
    #[arg(long)]
    decoy: bool,
    /// Generate this many jittered cases into case<NN>/ subdirectories.
    #[arg(long)]
    cohort: Option<usize>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12.0)]
    dt: f64,
    /// "auto" (Otsu) or explicit x0,x1,y0,y1,z0,z1.
    #[arg(long, default_value = "auto")]
    roi: String,
}

#[derive(Args)]
struct SupervoxelArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 350)]
    size: usize,
    #[arg(long, default_value_t = 0.05)]
    compactness: f64,
    #[arg(long, default_value_t = 3)]
    modes: usize,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    se: PathBuf,
    #[arg(long)]
    sv: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    cases: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentArgs {
    #[arg(long)]
    model: PathBuf,
    /// An SE volume by default; a raw dynamic scan with --preprocess.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    ts: Option<f64>,
    #[arg(long)]
    tp: Option<f64>,
    /// Treat the input as a raw scan and run the full pipeline.
    #[arg(long)]
    preprocess: bool,
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    roc: Option<PathBuf>,
    /// Write SE, supervoxel and probability intermediates next to --out.
    #[arg(long)]
    keep_intermediates: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    seg: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    roc: Option<PathBuf>,
    /// Threshold applied when --seg is a belief volume.
    #[arg(long, default_value_t = 0.15)]
    threshold: f64,
}

#[derive(Args)]
struct CrossvalArgs {
    #[arg(long)]
    cases: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Supervoxel(a) => cmd_supervoxel(a),
        Command::Features(a) => cmd_features(a),
        Command::Train(a) => cmd_train(a),
        Command::Segment(a) => cmd_segment(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Crossval(a) => cmd_crossval(a),
    }
}

fn load_params(config: Option<&Path>) -> Result<PipelineParams> {
    let Some(path) = config else {
        return Ok(PipelineParams::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let params: PipelineParams = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text).map_err(|e| Error::Parameter(format!("{path:?}: {e}")))?
    } else {
        toml::from_str(&text).map_err(|e| Error::Parameter(format!("{path:?}: {e}")))?
    };
    params.validate()?;
    Ok(params)
}

fn write_phantom_case(spec: &PhantomSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let case = phantom::generate(spec)?;
    volume::write_volume(&case.scan, &dir.join("scan.json"))?;
    volume::write_labels(&case.truth, &dir.join("gt.json"))?;
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    match a.cohort {
        None => {
            let mut spec = PhantomSpec::for_seed(a.seed);
            spec.sigma_noise = a.noise;
            if a.decoy {
                spec = spec.with_decoy();
            }
            write_phantom_case(&spec, &a.out)?;
            println!("wrote phantom case (seed {}) to {}", a.seed, a.out.display());
        }
        Some(n) => {
            for i in 0..n {
                let mut spec = PhantomSpec::for_seed(a.seed + i as u64);
                spec.sigma_noise = a.noise;
                if a.decoy {
                    spec = spec.with_decoy();
                }
                write_phantom_case(&spec, &a.out.join(format!("case{i:02}")))?;
            }
            println!("wrote {n} phantom cases to {}", a.out.display());
        }
    }
    Ok(())
}

fn parse_roi(text: &str) -> Result<Option<IndexBox>> {
    if text == "auto" {
        return Ok(None);
    }
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parameter(format!("ROI '{text}': {e}")))?;
    if parts.len() != 6 {
        return Err(Error::Parameter(format!(
            "ROI '{text}' must be x0,x1,y0,y1,z0,z1"
        )));
    }
    Ok(Some(IndexBox::new(
        [parts[0], parts[2], parts[4]],
        [parts[1], parts[3], parts[5]],
    )))
}

fn meta_path(se_path: &Path) -> PathBuf {
    se_path.with_extension("meta.json")
}

fn cmd_preprocess(a: PreprocessArgs) -> Result<()> {
    if !(a.dt > 0.0) {
        return Err(Error::Parameter(format!("--dt must be positive, got {}", a.dt)));
    }
    let scan = volume::read_volume(&a.input)?;
    let roi = match parse_roi(&a.roi)? {
        Some(b) => {
            b.validate(scan.header.spatial_dims())?;
            b
        }
        None => preprocess::otsu_roi(&scan)?,
    };
    let cropped = volume::crop(&scan, &roi)?;
    let injection = preprocess::detect_injection(&cropped)?;
    let se = preprocess::to_se(&cropped, injection)?;
    let se = preprocess::resample_time(&se, a.dt)?;

    let vol = perfseg_core::volume::Volume4D::new(se.header.clone(), se.data.clone())?;
    volume::write_volume(&vol, &a.out)?;
    let meta = SEMeta {
        injection_index: se.injection_index,
        norm_scale: se.norm_scale,
        roi,
        full_dims: scan.header.dims,
    };
    let meta_text = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Internal(format!("meta serialization: {e}")))?;
    let mp = meta_path(&a.out);
    fs::write(&mp, meta_text).map_err(|e| Error::io(&mp, e))?;
    println!(
        "SE volume {:?} (injection frame {}, norm scale {:.4}, ROI {:?}..{:?})",
        se.header.dims, se.injection_index, se.norm_scale, roi.lo, roi.hi
    );
    Ok(())
}

/// Reads a persisted SE volume back into [`SEVolume`] form (the meta file
/// restores injection/scale when present).
fn load_se(path: &Path) -> Result<(SEVolume, Option<SEMeta>)> {
    let vol = volume::read_volume(path)?;
    let meta: Option<SEMeta> = match fs::read_to_string(meta_path(path)) {
        Ok(text) => Some(
            serde_json::from_str(&text)
                .map_err(|e| Error::Malformed(format!("{:?}: {e}", meta_path(path))))?,
        ),
        Err(_) => None,
    };
    let n = vol.header.n_spatial();
    let se = SEVolume {
        header: vol.header,
        data: vol.data,
        injection_index: meta.as_ref().map_or(1, |m| m.injection_index),
        norm_scale: meta.as_ref().map_or(1.0, |m| m.norm_scale),
        air_mask: vec![false; n],
    };
    Ok((se, meta))
}

fn cmd_supervoxel(a: SupervoxelArgs) -> Result<()> {
    let (se, _) = load_se(&a.input)?;
    let t_len = se.header.dims[3];
    let curves = pipeline::curves_from_se(&se);
    let basis = pca::fit_pca(&curves, t_len, a.modes.min(t_len))?;
    let coeffs = pca::project_all(&basis, &curves, t_len)?;
    let (feats, _) = pca::normalize_modes(&coeffs, basis.n_modes())?;
    let params = supervoxel::SlicParams {
        size_voxels: a.size,
        compactness: a.compactness,
        n_features: basis.n_modes(),
        ..Default::default()
    };
    let dims = se.header.spatial_dims();
    let mut map = supervoxel::run_slic(&feats, &se.header, &params, &IndexBox::full(dims))?;
    supervoxel::build_adjacency(&mut map);
    supervoxel::write_supervoxels(&map, &a.out)?;
    println!(
        "{} supervoxels over {:?} ({} iterations)",
        map.n_supervoxels(),
        dims,
        map.energy_history.len()
    );
    Ok(())
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let model = read_model(&a.model)?;
    let (se, _) = load_se(&a.se)?;
    let map = supervoxel::read_supervoxels(&a.sv)?;
    if map.dims != se.header.spatial_dims() {
        return Err(Error::Parameter(format!(
            "supervoxel map dims {:?} do not match SE volume {:?}",
            map.dims,
            se.header.spatial_dims()
        )));
    }
    let t_len = se.header.dims[3];
    let curves = pipeline::curves_from_se(&se);
    let coeffs = pca::project_all(&model.pca_basis, &curves, t_len)?;
    let n_modes = model.pca_basis.n_modes();
    let stats = features::supervoxel_stats(&map, &coeffs, n_modes)?;
    let dirs = features::direction_neighbors(&map);
    let fm = features::build_features(&stats, &dirs, n_modes, &model.normalizer);
    let text = serde_json::to_string(&fm)
        .map_err(|e| Error::Internal(format!("feature serialization: {e}")))?;
    fs::write(&a.out, text).map_err(|e| Error::io(&a.out, e))?;
    println!("{} rows x {} features", fm.n_rows, fm.n_cols);
    Ok(())
}

/// Case directories are subdirectories containing scan.json; gt.json is
/// the ground truth. Sorted by name for determinism.
fn discover_cases(dir: &Path) -> Result<Vec<(String, PathBuf, Option<PathBuf>)>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let scan = path.join("scan.json");
        if !scan.is_file() {
            continue;
        }
        let gt = path.join("gt.json");
        let name = entry.file_name().to_string_lossy().into_owned();
        out.push((name, scan, gt.is_file().then_some(gt)));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    if out.is_empty() {
        return Err(Error::Parameter(format!(
            "no case directories with scan.json under {}",
            dir.display()
        )));
    }
    Ok(out)
}

fn prepare_cohort(
    cases: &[(String, PathBuf, Option<PathBuf>)],
    params: &PipelineParams,
    require_truth: bool,
) -> Result<Vec<CaseArtifacts>> {
    let usable: Vec<&(String, PathBuf, Option<PathBuf>)> = cases
        .iter()
        .filter(|(name, _, gt)| {
            if gt.is_none() {
                eprintln!("warning: case {name} has no gt.json; skipped");
            }
            !require_truth || gt.is_some()
        })
        .collect();
    usable
        .par_iter()
        .map(|(name, scan_path, gt_path)| {
            let scan = volume::read_volume(scan_path)?;
            let truth = gt_path.as_ref().map(|p| volume::read_labels(p)).transpose()?;
            pipeline::prepare_case(name, &scan, truth.as_ref(), params, None)
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let params = load_params(a.config.as_deref())?;
    let cases = discover_cases(&a.cases)?;
    let arts = prepare_cohort(&cases, &params, true)?;
    let refs: Vec<&CaseArtifacts> = arts.iter().collect();
    let (model, warnings) = pipeline::train_model(&refs, &params)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    write_model(&model, &a.out)?;
    println!(
        "trained on {} cases ({} supervoxel rows); model written to {}",
        arts.len(),
        arts.iter().map(|c| c.map.n_supervoxels()).sum::<usize>(),
        a.out.display()
    );
    Ok(())
}

fn segment_artifacts(
    a: &SegmentArgs,
    model: &SegModel,
) -> Result<(CaseArtifacts, pipeline::SegmentOutput)> {
    let truth = a.truth.as_ref().map(|p| volume::read_labels(p)).transpose()?;
    let art = if a.preprocess {
        let scan = volume::read_volume(&a.input)?;
        pipeline::prepare_case("case", &scan, truth.as_ref(), &model.params, None)?
    } else {
        let (se, meta) = load_se(&a.input)?;
        let se_dims = se.header.spatial_dims();
        let (roi, full_header) = match &meta {
            Some(m) => {
                let mut full = se.header.clone();
                full.dims = m.full_dims;
                (m.roi, full)
            }
            None => (IndexBox::full(se_dims), se.header.clone()),
        };
        // The truth lives on the full grid; without a meta file it must
        // match the SE grid directly.
        if let Some(t) = &truth {
            if t.header.spatial_dims() != full_header.spatial_dims() {
                return Err(Error::Parameter(format!(
                    "truth dims {:?} do not match case grid {:?} (is se.meta.json present?)",
                    t.header.spatial_dims(),
                    full_header.spatial_dims()
                )));
            }
        }
        pipeline::prepare_from_se("case", se, roi, full_header, truth.as_ref(), &model.params)?
    };
    let out = pipeline::segment_case(&art, model)?;
    Ok((art, out))
}

fn cmd_segment(a: SegmentArgs) -> Result<()> {
    if !a.model.is_file() {
        return Err(Error::Parameter(format!(
            "model file {} does not exist",
            a.model.display()
        )));
    }
    let mut model = read_model(&a.model)?;
    if let Some(ts) = a.ts {
        model.params.t_s = ts;
    }
    if let Some(tp) = a.tp {
        model.params.t_p = tp;
    }
    model.params.validate()?;

    let (art, out) = segment_artifacts(&a, &model)?;
    volume::write_labels(&out.seg_parts, &a.out)?;

    let stem = a.out.with_extension("");
    let stem = stem.to_string_lossy();
    let belief_full = pipeline::embed_field(&out.belief_voxel, &art.full_header, &art.roi);
    let mut belief_header = art.full_header.clone();
    belief_header.dims[3] = 1;
    belief_header.kind = VolumeKind::Scalar;
    let belief_vol =
        perfseg_core::volume::Volume4D::new(belief_header, belief_full.iter().map(|&v| v as f32).collect())?;
    volume::write_volume(&belief_vol, Path::new(&format!("{stem}_belief.json")))?;

    if a.keep_intermediates {
        let se_vol =
            perfseg_core::volume::Volume4D::new(art.se.header.clone(), art.se.data.clone())?;
        volume::write_volume(&se_vol, Path::new(&format!("{stem}_se.json")))?;
        supervoxel::write_supervoxels(&art.map, Path::new(&format!("{stem}_sv.json")))?;
        volume::write_labels(&out.seg_sv, Path::new(&format!("{stem}_seg_sv.json")))?;
        let fm_text = serde_json::to_string(&out.features)
            .map_err(|e| Error::Internal(format!("feature serialization: {e}")))?;
        fs::write(format!("{stem}_features.json"), fm_text)
            .map_err(|e| Error::io(a.out.clone(), e))?;
    }

    if out.no_detection_parts {
        eprintln!("warning: no voxel reached the pieces-of-parts threshold");
    }
    if let Some(metrics_path) = &a.metrics {
        let m = pipeline::evaluate_case(&art, &out)?;
        fs::write(metrics_path, pipeline::metrics_csv(&[m]))
            .map_err(|e| Error::io(metrics_path, e))?;
    }
    if let Some(roc_path) = &a.roc {
        let curve = pipeline::roc_for_case(&art, &out, model.params.roc_thresholds)?;
        fs::write(roc_path, pipeline::roc_csv(&curve)).map_err(|e| Error::io(roc_path, e))?;
    }
    println!(
        "segmentation written to {} ({} tumour voxels)",
        a.out.display(),
        out.seg_parts.labels.iter().filter(|&&l| l == LABEL_TUMOUR).count()
    );
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let truth = volume::read_labels(&a.truth)?;
    let truth_mask = truth.mask_of(LABEL_TUMOUR);

    // A label volume is scored directly; a scalar volume is a belief field
    // that is thresholded (T + largest component) and also yields a ROC.
    let text = fs::read_to_string(&a.seg).map_err(|e| Error::io(&a.seg, e))?;
    let header: perfseg_core::volume::VolumeHeader =
        serde_json::from_str(&text).map_err(|e| Error::Malformed(format!("{:?}: {e}", a.seg)))?;
    if header.spatial_dims() != truth.header.spatial_dims() {
        return Err(Error::Malformed(format!(
            "segmentation dims {:?} do not match truth {:?}",
            header.spatial_dims(),
            truth.header.spatial_dims()
        )));
    }
    let (pred_mask, belief): (Vec<bool>, Option<Vec<f64>>) = match header.kind {
        VolumeKind::Label => {
            let seg = volume::read_labels(&a.seg)?;
            (seg.mask_of(LABEL_TUMOUR), None)
        }
        VolumeKind::Scalar => {
            let vol = volume::read_volume(&a.seg)?;
            if vol.header.dims[3] != 1 {
                return Err(Error::Malformed(
                    "belief volume must be static (T = 1)".into(),
                ));
            }
            let belief: Vec<f64> = vol.data.iter().map(|&v| v as f64).collect();
            let (seg, _) = postprocess::threshold_and_lcc(&belief, &vol.header, a.threshold)?;
            (seg.mask_of(LABEL_TUMOUR), Some(belief))
        }
    };

    let d = postprocess::dsc(&pred_mask, &truth_mask)?;
    let (sens, spec) = postprocess::sensitivity_specificity(&pred_mask, &truth_mask)?;
    let curve = match &belief {
        Some(b) => postprocess::roc(b, &truth_mask, 256)?,
        None => {
            let b: Vec<f64> = pred_mask.iter().map(|&m| m as u8 as f64).collect();
            postprocess::roc(&b, &truth_mask, 256)?
        }
    };
    let csv = format!(
        "case,dsc,sensitivity,specificity,auc,detected\n{},{:.6},{:.6},{:.6},{:.6},{}\n",
        a.seg.file_stem().unwrap_or_default().to_string_lossy(),
        d,
        sens,
        spec,
        curve.auc,
        postprocess::detection_flag(d) as u8
    );
    fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;
    if let Some(roc_path) = &a.roc {
        fs::write(roc_path, pipeline::roc_csv(&curve)).map_err(|e| Error::io(roc_path, e))?;
    }
    println!("DSC {d:.4}, AUC {:.4}", curve.auc);
    Ok(())
}

fn cmd_crossval(a: CrossvalArgs) -> Result<()> {
    let params = load_params(a.config.as_deref())?;
    let cases = discover_cases(&a.cases)?;
    let arts = prepare_cohort(&cases, &params, true)?;
    let report = pipeline::crossval(&arts, &params)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let metrics = a.out.join("metrics.csv");
    fs::write(&metrics, pipeline::metrics_csv(&report.rows))
        .map_err(|e| Error::io(&metrics, e))?;
    let summary = a.out.join("summary.csv");
    fs::write(&summary, pipeline::summary_csv(&report.summary))
        .map_err(|e| Error::io(&summary, e))?;
    for (row, curve) in report.rows.iter().zip(&report.roc_curves) {
        let p = a.out.join(format!("roc_{}.csv", row.id));
        fs::write(&p, pipeline::roc_csv(curve)).map_err(|e| Error::io(&p, e))?;
    }
    println!(
        "{} cases: median DSC {:.4} (pieces-of-parts) vs {:.4} (supervoxel); detections {}/{} vs {}/{}",
        report.summary.n_cases,
        report.summary.median_dsc_parts,
        report.summary.median_dsc_sv,
        report.summary.detections_parts,
        report.summary.n_cases,
        report.summary.detections_sv,
        report.summary.n_cases
    );
    Ok(())
}
