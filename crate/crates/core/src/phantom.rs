//! Synthetic 4D DCE-like phantoms with known labels: an elliptic "body"
//! containing a rectum-like tube (non-enhancing lumen, moderately enhancing
//! wall), a fast-enhancing tumour annulus wrapped partway around the lumen,
//! a late-enhancing bladder, and optionally a decoy structure far from the
//! lumen that mimics the tumour's local appearance. Everything is
//! deterministic in the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid;
use crate::volume::{
    LabelVolume, Volume4D, VolumeHeader, LABEL_BLADDER, LABEL_LUMEN, LABEL_TUMOUR,
};

pub const BASELINE_SIGNAL: f64 = 100.0;
pub const AIR_SIGNAL: f64 = 5.0;

/// Internal tissue legend of the phantom (finer than the ground-truth
/// labels; the decoy is background in the ground truth).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Tissue {
    Air = 0,
    Background = 1,
    Wall = 2,
    Tumour = 3,
    Lumen = 4,
    Bladder = 5,
    DecoyCore = 6,
    DecoyShell = 7,
    DecoyWall = 8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 4],
    pub spacing_mm: [f64; 3],
    pub dt_s: f64,
    pub seed: u64,
    pub sigma_noise: f64,
    /// First enhanced frame.
    pub injection_frame: usize,
    pub body_center_mm: [f64; 2],
    pub body_radii_mm: [f64; 2],
    /// Shared center of the lumen tube and tumour annulus (x, y).
    pub ring_center_mm: [f64; 2],
    pub lumen_radius_mm: f64,
    pub wall_outer_radius_mm: f64,
    /// The rectum tube spans z in [0, tube_z_top_mm].
    pub tube_z_top_mm: f64,
    pub tumour_outer_radius_mm: f64,
    /// Angular coverage of the annulus: [gap_center + half_gap,
    /// gap_center + 360 - half_gap), degrees from +x.
    pub tumour_gap_center_deg: f64,
    pub tumour_gap_half_deg: f64,
    pub tumour_z_center_mm: f64,
    pub tumour_z_half_mm: f64,
    pub bladder_center_mm: [f64; 3],
    pub bladder_radii_mm: [f64; 3],
    /// Optional decoy: non-enhancing core, tumour-like shell, wall-like rim.
    pub decoy_center_mm: Option<[f64; 3]>,
    pub decoy_radii_mm: [f64; 3],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 24, 20],
            spacing_mm: [1.0, 1.0, 2.0],
            dt_s: 12.0,
            seed: 0,
            sigma_noise: 2.0,
            injection_frame: 4,
            body_center_mm: [32.0, 32.0],
            body_radii_mm: [30.0, 28.0],
            ring_center_mm: [32.0, 38.0],
            lumen_radius_mm: 3.0,
            wall_outer_radius_mm: 5.0,
            tube_z_top_mm: 26.0,
            tumour_outer_radius_mm: 9.0,
            tumour_gap_center_deg: 270.0,
            tumour_gap_half_deg: 30.0,
            tumour_z_center_mm: 13.0,
            tumour_z_half_mm: 8.0,
            bladder_center_mm: [32.0, 30.0, 37.0],
            bladder_radii_mm: [6.0, 5.0, 6.0],
            decoy_center_mm: None,
            decoy_radii_mm: [2.0, 5.0, 6.5],
        }
    }
}

impl PhantomSpec {
    /// A cohort member: the base geometry jittered deterministically from
    /// the seed. The fixed fractional ROI crop pinches the usable x range
    /// and the rectum tube must stay z-below the bladder, so the jitter
    /// amplitudes are the largest that keep every structure disjoint and
    /// inside the ROI for all seeds.
    pub fn for_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b97f4a7c15));
        let mut spec = PhantomSpec {
            seed,
            ..Default::default()
        };
        spec.ring_center_mm[0] += rng.random_range(-1.0..1.0);
        spec.ring_center_mm[1] += rng.random_range(-2.0..2.0);
        spec.tumour_z_center_mm += rng.random_range(-3.0..3.0);
        spec.tumour_gap_center_deg += rng.random_range(-20.0..20.0);
        spec.bladder_center_mm[0] += rng.random_range(-2.0..2.0);
        spec.bladder_center_mm[1] += rng.random_range(-1.0..1.0);
        spec.bladder_center_mm[2] += rng.random_range(-4.0..4.0);
        spec
    }

    pub fn with_decoy(mut self) -> Self {
        self.decoy_center_mm = Some([38.0, 49.0, 40.0]);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.dims[3] < 3 || self.injection_frame < 1 || self.injection_frame >= self.dims[3] {
            return Err(Error::Parameter(format!(
                "injection frame {} incompatible with {} frames",
                self.injection_frame, self.dims[3]
            )));
        }
        if self.sigma_noise < 0.0 {
            return Err(Error::Parameter("negative noise sigma".into()));
        }
        let extent = [
            self.dims[0] as f64 * self.spacing_mm[0],
            self.dims[1] as f64 * self.spacing_mm[1],
            self.dims[2] as f64 * self.spacing_mm[2],
        ];
        for a in 0..2 {
            let lo = self.ring_center_mm[a] - self.tumour_outer_radius_mm;
            let hi = self.ring_center_mm[a] + self.tumour_outer_radius_mm;
            if lo < 0.0 || hi > extent[a] {
                return Err(Error::Parameter(format!(
                    "tumour annulus leaves the volume on axis {a}"
                )));
            }
        }
        for a in 0..3 {
            let lo = self.bladder_center_mm[a] - self.bladder_radii_mm[a];
            let hi = self.bladder_center_mm[a] + self.bladder_radii_mm[a];
            if lo < -1e-9 || hi > extent[a] + 1e-9 {
                return Err(Error::Parameter(format!(
                    "bladder leaves the volume on axis {a}"
                )));
            }
        }
        Ok(())
    }
}

/// The generated case: dynamic scan, ground-truth labels, and the internal
/// tissue map (for tests; `truth` is the 4-class legend).
#[derive(Debug, Clone)]
pub struct PhantomCase {
    pub scan: Volume4D,
    pub truth: LabelVolume,
    pub tissue: Vec<Tissue>,
}

fn tissue_at(spec: &PhantomSpec, pos: [f64; 3]) -> Result<Tissue> {
    let [x, y, z] = pos;
    let bx = (x - spec.body_center_mm[0]) / spec.body_radii_mm[0];
    let by = (y - spec.body_center_mm[1]) / spec.body_radii_mm[1];
    if bx * bx + by * by > 1.0 {
        return Ok(Tissue::Air);
    }

    let dx = x - spec.ring_center_mm[0];
    let dy = y - spec.ring_center_mm[1];
    let r = (dx * dx + dy * dy).sqrt();
    let in_tube_z = z <= spec.tube_z_top_mm;
    let mut ring = None;
    if in_tube_z && r <= spec.lumen_radius_mm {
        ring = Some(Tissue::Lumen);
    } else if r > spec.lumen_radius_mm {
        let in_tumour_z = (z - spec.tumour_z_center_mm).abs() <= spec.tumour_z_half_mm;
        let angle = dy.atan2(dx).to_degrees().rem_euclid(360.0);
        let gap = (angle - spec.tumour_gap_center_deg).rem_euclid(360.0);
        let in_arc = gap >= spec.tumour_gap_half_deg && gap <= 360.0 - spec.tumour_gap_half_deg;
        if in_tumour_z && in_arc && r <= spec.tumour_outer_radius_mm {
            ring = Some(Tissue::Tumour);
        } else if in_tube_z && r <= spec.wall_outer_radius_mm {
            ring = Some(Tissue::Wall);
        }
    }

    let b = &spec.bladder_center_mm;
    let br = &spec.bladder_radii_mm;
    let bq = ((x - b[0]) / br[0]).powi(2) + ((y - b[1]) / br[1]).powi(2)
        + ((z - b[2]) / br[2]).powi(2);
    let in_bladder = bq <= 1.0;
    if let Some(t) = ring {
        if in_bladder {
            return Err(Error::Parameter(
                "phantom structures overlap: bladder intersects the rectum complex".into(),
            ));
        }
        return Ok(t);
    }
    if in_bladder {
        return Ok(Tissue::Bladder);
    }

    if let Some(d) = spec.decoy_center_mm {
        let dist =
            ((x - d[0]).powi(2) + (y - d[1]).powi(2) + (z - d[2]).powi(2)).sqrt();
        if dist <= spec.decoy_radii_mm[2] {
            let t = if dist <= spec.decoy_radii_mm[0] {
                Tissue::DecoyCore
            } else if dist <= spec.decoy_radii_mm[1] {
                Tissue::DecoyShell
            } else {
                Tissue::DecoyWall
            };
            return Ok(t);
        }
    }
    Ok(Tissue::Background)
}

/// Noiseless SE template of a tissue at frame `t` (amplitude jitter applied
/// separately for tumour-like tissues).
pub fn template(tissue: Tissue, t: usize, n_frames: usize, injection: usize) -> f64 {
    if matches!(tissue, Tissue::Air | Tissue::Lumen | Tissue::DecoyCore) {
        return 0.0;
    }
    if matches!(tissue, Tissue::Bladder) {
        // Late ramp starting at 60% of the scan.
        let start = (0.6 * n_frames as f64).ceil() as usize;
        if t < start {
            return 0.0;
        }
        return 2.0 * (t - start + 1) as f64 / (n_frames - start) as f64;
    }
    if t < injection {
        return 0.0;
    }
    let k = (t - injection) as f64;
    let span = (n_frames - injection) as f64;
    match tissue {
        Tissue::Background => 0.1 * (k + 1.0) / span,
        Tissue::Wall | Tissue::DecoyWall => 0.5 * (1.0 - (-(k + 1.0) / 2.5).exp()),
        Tissue::Tumour | Tissue::DecoyShell => {
            let wash_in = 1.0 - (-(k + 1.0) / 1.5).exp();
            let washout = if k > 6.0 {
                1.0 - 0.25 * (k - 6.0) / (span - 7.0).max(1.0)
            } else {
                1.0
            };
            wash_in * washout
        }
        _ => unreachable!(),
    }
}

/// Standard normal via Box-Muller on the ChaCha stream.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomCase> {
    spec.validate()?;
    let header = VolumeHeader::new(spec.dims, spec.spacing_mm, spec.dt_s);
    let n_spatial = header.n_spatial();
    let n_frames = spec.dims[3];
    let dims3 = header.spatial_dims();

    let mut tissue = Vec::with_capacity(n_spatial);
    for v in 0..n_spatial {
        let pos = header.voxel_center_mm(grid::unravel(v, dims3));
        tissue.push(tissue_at(spec, pos)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // Per-voxel amplitude jitter (+-30%) for tumour-like tissue, drawn in
    // voxel order for reproducibility.
    let amp: Vec<f64> = tissue
        .iter()
        .map(|&t| {
            if matches!(t, Tissue::Tumour | Tissue::DecoyShell) {
                1.0 + rng.random_range(-0.3..0.3)
            } else {
                1.0
            }
        })
        .collect();

    let mut data = vec![0.0f32; n_spatial * n_frames];
    for t in 0..n_frames {
        for v in 0..n_spatial {
            let tis = tissue[v];
            let base = if tis == Tissue::Air {
                AIR_SIGNAL
            } else {
                BASELINE_SIGNAL
            };
            let se = amp[v] * template(tis, t, n_frames, spec.injection_frame);
            let noise = if spec.sigma_noise > 0.0 {
                spec.sigma_noise * normal(&mut rng)
            } else {
                0.0
            };
            data[v + t * n_spatial] = (base * (1.0 + se) + noise) as f32;
        }
    }
    let scan = Volume4D::new(header.clone(), data)?;

    let labels: Vec<u8> = tissue
        .iter()
        .map(|&t| match t {
            Tissue::Tumour => LABEL_TUMOUR,
            Tissue::Lumen => LABEL_LUMEN,
            Tissue::Bladder => LABEL_BLADDER,
            _ => 0,
        })
        .collect();
    let mut lh = header;
    lh.dims[3] = 1;
    let truth = LabelVolume::new(lh, labels, LABEL_BLADDER)?;
    Ok(PhantomCase {
        scan,
        truth,
        tissue,
    })
}

/// Generates a cohort of jittered cases from consecutive seeds.
pub fn cohort(n: usize, base_seed: u64, sigma_noise: f64) -> Result<Vec<(PhantomSpec, PhantomCase)>> {
    (0..n)
        .map(|i| {
            let mut spec = PhantomSpec::for_seed(base_seed + i as u64);
            spec.sigma_noise = sigma_noise;
            let case = generate(&spec)?;
            Ok((spec, case))
        })
        .collect()
}
