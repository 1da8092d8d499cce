//! The pieces-of-parts refinement: a tree-structured graphical model with a
//! root part (tumour) and child parts (lumen, bladder) in which every
//! supervoxel is a candidate for every part. Two-way belief propagation —
//! a collect sweep into the root and a distribute sweep back out — turns
//! classifier potentials plus learned 3D offset Gaussians into per-candidate
//! marginals.
//!
//! Belief and message fields are max-normalized so fixed thresholds are
//! comparable across cases; messages are floored at a small epsilon so the
//! distribute-phase division is always defined.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::PartPotentials;
use crate::error::{Error, Result};
use crate::supervoxel::SupervoxelMap;
use crate::volume::{LABEL_BLADDER, LABEL_LUMEN, LABEL_TUMOUR};

pub const DEFAULT_EPSILON_MSG: f64 = 1e-6;
pub const DEFAULT_SIGMA_FLOOR_MM: f64 = 5.0;
pub const DEFAULT_PRIOR_SIGMA_FLOOR: f64 = 0.05;

/// Separable 3D Gaussian over child-minus-root centroid offsets, in mm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OffsetGaussian {
    pub mean_mm: [f64; 3],
    pub sigma_mm: [f64; 3],
}

impl OffsetGaussian {
    /// Density at `offset`, up to the constant normalization factor.
    #[inline]
    pub fn density(&self, offset: [f64; 3]) -> f64 {
        let mut e = 0.0;
        for a in 0..3 {
            let z = (offset[a] - self.mean_mm[a]) / self.sigma_mm[a];
            e += z * z;
        }
        (-0.5 * e).exp()
    }
}

/// 1D Gaussian prior over a part's relative superior-inferior position
/// `(z - z_roi_center) / z_roi_extent`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocationPrior {
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChildPart {
    pub class: u8,
    pub offset: OffsetGaussian,
    pub location_prior: Option<LocationPrior>,
}

/// The learned parts model: root class, per-child offset Gaussians and
/// optional location priors, plus inference knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartsModel {
    pub root_class: u8,
    pub children: Vec<ChildPart>,
    pub epsilon_msg: f64,
    /// Exponent on unary terms; 1.0 is the plain product.
    pub unary_weight: f64,
    /// Exponent on pairwise (message) terms; 1.0 is the plain product.
    pub pairwise_weight: f64,
}

/// Per-candidate beliefs after inference. Each field is max-normalized to
/// 1 unless it was everywhere zero, in which case it is flagged.
#[derive(Debug, Clone)]
pub struct BeliefMap {
    pub root: Vec<f64>,
    pub children: Vec<Vec<f64>>,
    /// Collect-phase messages per child (normalized, floored); retained for
    /// the distribute phase and diagnostics.
    pub messages: Vec<Vec<f64>>,
    pub root_all_zero: bool,
    pub child_all_zero: Vec<bool>,
    /// Children whose potentials were all zero during collect.
    pub degenerate_messages: Vec<bool>,
}

fn max_normalize(field: &mut [f64]) -> bool {
    let max = field.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return false;
    }
    for v in field.iter_mut() {
        *v /= max;
    }
    true
}

/// Child potentials with the location prior (if any) multiplied in.
/// Applied identically by belief propagation and the enumeration oracle.
fn weighted_child_potentials(
    pot: &PartPotentials,
    map: &SupervoxelMap,
    model: &PartsModel,
) -> Result<Vec<Vec<f64>>> {
    let z_extent = map.dims[2] as f64 * map.spacing_mm[2];
    let z_center = z_extent / 2.0;
    model
        .children
        .iter()
        .map(|child| {
            let mut psi = pot.class_column(child.class).ok_or_else(|| {
                Error::Parameter(format!(
                    "potentials carry no class {} for a child part",
                    child.class
                ))
            })?;
            if let Some(prior) = &child.location_prior {
                for (sv, p) in psi.iter_mut().enumerate() {
                    let rel = (map.centroids_mm[sv][2] - z_center) / z_extent;
                    let z = (rel - prior.mean) / prior.sigma;
                    *p *= (-0.5 * z * z).exp();
                }
            }
            Ok(psi)
        })
        .collect()
}

/// Collect-evidence sweep: for every root candidate, each child's message
/// sums its candidates' potential-weighted offset densities (excluding the
/// root candidate itself); the root belief is the unary times the product
/// of normalized, epsilon-floored messages, max-normalized.
pub fn collect_evidence(
    pot: &PartPotentials,
    map: &SupervoxelMap,
    model: &PartsModel,
) -> Result<BeliefMap> {
    let n = map.n_supervoxels();
    if pot.n_rows != n {
        return Err(Error::Parameter(format!(
            "potentials for {} supervoxels do not align with map of {n}",
            pot.n_rows
        )));
    }
    if !(model.epsilon_msg > 0.0 && model.epsilon_msg <= 1e-3) {
        return Err(Error::Parameter(format!(
            "epsilon_msg must lie in (0, 1e-3], got {}",
            model.epsilon_msg
        )));
    }
    let psi_root = pot.class_column(model.root_class).ok_or_else(|| {
        Error::Parameter(format!(
            "potentials carry no class {} for the root part",
            model.root_class
        ))
    })?;
    let psi_children = weighted_child_potentials(pot, map, model)?;

    let mut messages = Vec::with_capacity(model.children.len());
    let mut degenerate = Vec::with_capacity(model.children.len());
    for (child, psi_c) in model.children.iter().zip(&psi_children) {
        let mut field: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|r| {
                let cr = map.centroids_mm[r];
                let mut m = 0.0;
                for (s, &p) in psi_c.iter().enumerate() {
                    if s == r || p == 0.0 {
                        continue;
                    }
                    let cs = map.centroids_mm[s];
                    m += child.offset.density([cs[0] - cr[0], cs[1] - cr[1], cs[2] - cr[2]]) * p;
                }
                m
            })
            .collect();
        let nonzero = max_normalize(&mut field);
        degenerate.push(!nonzero);
        for v in field.iter_mut() {
            *v = v.max(model.epsilon_msg);
        }
        messages.push(field);
    }

    let mut root: Vec<f64> = (0..n)
        .map(|r| {
            let mut b = psi_root[r].powf(model.unary_weight);
            for m in &messages {
                b *= m[r].powf(model.pairwise_weight);
            }
            b
        })
        .collect();
    let root_all_zero = !max_normalize(&mut root);

    Ok(BeliefMap {
        root,
        children: Vec::new(),
        messages,
        root_all_zero,
        child_all_zero: Vec::new(),
        degenerate_messages: degenerate,
    })
}

/// Distribute-evidence sweep: sends the root beliefs back to each child
/// (dividing out that child's own collect message) and updates the child
/// beliefs; max-normalized per child.
pub fn distribute_evidence(
    beliefs: &mut BeliefMap,
    pot: &PartPotentials,
    map: &SupervoxelMap,
    model: &PartsModel,
) -> Result<()> {
    let n = map.n_supervoxels();
    if beliefs.root.len() != n || beliefs.messages.len() != model.children.len() {
        return Err(Error::Parameter(
            "distribute phase requires the collect-phase belief map".into(),
        ));
    }
    let psi_children = weighted_child_potentials(pot, map, model)?;

    beliefs.children.clear();
    beliefs.child_all_zero.clear();
    for ((child, psi_c), msg) in model
        .children
        .iter()
        .zip(&psi_children)
        .zip(&beliefs.messages)
    {
        // bel_r / m^-_{c->r}, with the message exponent applied once.
        let upstream: Vec<f64> = beliefs
            .root
            .iter()
            .zip(msg)
            .map(|(&b, &m)| b / m.powf(model.pairwise_weight))
            .collect();
        let mut field: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|c| {
                let cc = map.centroids_mm[c];
                let mut m_up = 0.0;
                for (r, &u) in upstream.iter().enumerate() {
                    if r == c || u == 0.0 {
                        continue;
                    }
                    let cr = map.centroids_mm[r];
                    let density = child
                        .offset
                        .density([cc[0] - cr[0], cc[1] - cr[1], cc[2] - cr[2]]);
                    m_up += density * u;
                }
                psi_c[c].powf(model.unary_weight) * m_up.powf(model.pairwise_weight)
            })
            .collect();
        let nonzero = max_normalize(&mut field);
        beliefs.child_all_zero.push(!nonzero);
        beliefs.children.push(field);
    }
    Ok(())
}

/// Spatial training: per case, a part's location is the unweighted mean of
/// its member-supervoxel centroids; child-minus-root offsets across cases
/// fit per-axis Gaussians (sample s.d., floored). Parts with a location
/// prior configuration (bladder) also fit a relative-z Gaussian.
pub struct SpatialTraining {
    pub model: PartsModel,
    pub warnings: Vec<String>,
}

pub struct SpatialConfig {
    pub sigma_floor_mm: f64,
    pub prior_sigma_floor: f64,
    pub epsilon_msg: f64,
    pub unary_weight: f64,
    pub pairwise_weight: f64,
    /// Classes that receive a relative-z location prior.
    pub prior_classes: Vec<u8>,
}

impl Default for SpatialConfig {
    fn default() -> Self {
        SpatialConfig {
            sigma_floor_mm: DEFAULT_SIGMA_FLOOR_MM,
            prior_sigma_floor: DEFAULT_PRIOR_SIGMA_FLOOR,
            epsilon_msg: DEFAULT_EPSILON_MSG,
            unary_weight: 1.0,
            pairwise_weight: 1.0,
            prior_classes: vec![LABEL_BLADDER],
        }
    }
}

fn part_centroid(map: &SupervoxelMap, labels: &[u8], class: u8) -> Option<[f64; 3]> {
    let mut acc = [0.0f64; 3];
    let mut count = 0usize;
    for (sv, &l) in labels.iter().enumerate() {
        if l == class {
            for a in 0..3 {
                acc[a] += map.centroids_mm[sv][a];
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    Some([
        acc[0] / count as f64,
        acc[1] / count as f64,
        acc[2] / count as f64,
    ])
}

fn mean_sd(samples: &[f64], floor: f64) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sd = if samples.len() > 1 {
        (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd.max(floor))
}

pub fn train_spatial(
    cases: &[(&SupervoxelMap, &[u8])],
    config: &SpatialConfig,
) -> Result<SpatialTraining> {
    if cases.len() < 2 {
        return Err(Error::Degenerate(format!(
            "spatial training needs at least 2 cases, got {}",
            cases.len()
        )));
    }
    let child_classes = [LABEL_LUMEN, LABEL_BLADDER];
    let mut warnings = Vec::new();
    let mut children = Vec::new();
    for &class in &child_classes {
        let mut offsets: Vec<[f64; 3]> = Vec::new();
        let mut rel_z: Vec<f64> = Vec::new();
        for (i, (map, labels)) in cases.iter().enumerate() {
            let Some(root) = part_centroid(map, labels, LABEL_TUMOUR) else {
                warnings.push(format!("case {i}: no root part; skipped"));
                continue;
            };
            let Some(child) = part_centroid(map, labels, class) else {
                warnings.push(format!("case {i}: no part of class {class}; skipped"));
                continue;
            };
            offsets.push([child[0] - root[0], child[1] - root[1], child[2] - root[2]]);
            let z_extent = map.dims[2] as f64 * map.spacing_mm[2];
            rel_z.push((child[2] - z_extent / 2.0) / z_extent);
        }
        if offsets.is_empty() {
            // A part that never appears cannot constrain anything; drop the
            // child rather than failing the whole model.
            warnings.push(format!(
                "part class {class} absent from all training cases; child dropped"
            ));
            continue;
        }
        let mut mean_mm = [0.0f64; 3];
        let mut sigma_mm = [0.0f64; 3];
        for a in 0..3 {
            let axis: Vec<f64> = offsets.iter().map(|o| o[a]).collect();
            let (m, s) = mean_sd(&axis, config.sigma_floor_mm);
            mean_mm[a] = m;
            sigma_mm[a] = s;
        }
        let location_prior = if config.prior_classes.contains(&class) {
            let (m, s) = mean_sd(&rel_z, config.prior_sigma_floor);
            Some(LocationPrior { mean: m, sigma: s })
        } else {
            None
        };
        children.push(ChildPart {
            class,
            offset: OffsetGaussian { mean_mm, sigma_mm },
            location_prior,
        });
    }
    if children.is_empty() {
        return Err(Error::Degenerate(
            "no child part has any training data".into(),
        ));
    }
    Ok(SpatialTraining {
        model: PartsModel {
            root_class: LABEL_TUMOUR,
            children,
            epsilon_msg: config.epsilon_msg,
            unary_weight: config.unary_weight,
            pairwise_weight: config.pairwise_weight,
        },
        warnings,
    })
}

/// Exact marginals by exhaustive enumeration over all part assignments
/// (distinct supervoxels per part), for instances of at most 20
/// supervoxels. This is the test oracle for the two BP sweeps.
pub fn enumerate_oracle(
    pot: &PartPotentials,
    map: &SupervoxelMap,
    model: &PartsModel,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let n = map.n_supervoxels();
    if n > 20 {
        return Err(Error::Parameter(format!(
            "enumeration oracle limited to 20 supervoxels, got {n}"
        )));
    }
    let psi_root = pot.class_column(model.root_class).ok_or_else(|| {
        Error::Parameter("potentials carry no root class".into())
    })?;
    let psi_children = weighted_child_potentials(pot, map, model)?;
    let p = model.children.len();

    let mut root_marginal = vec![0.0f64; n];
    let mut child_marginals = vec![vec![0.0f64; n]; p];

    // Depth-first over child assignments, all distinct and != root.
    fn recurse(
        depth: usize,
        r: usize,
        weight: f64,
        chosen: &mut Vec<usize>,
        model: &PartsModel,
        psi_children: &[Vec<f64>],
        map: &SupervoxelMap,
        root_marginal: &mut [f64],
        child_marginals: &mut [Vec<f64>],
    ) {
        let n = root_marginal.len();
        if depth == psi_children.len() {
            root_marginal[r] += weight;
            for (c, &s) in chosen.iter().enumerate() {
                child_marginals[c][s] += weight;
            }
            return;
        }
        let cr = map.centroids_mm[r];
        for s in 0..n {
            if s == r || chosen.contains(&s) {
                continue;
            }
            let psi = psi_children[depth][s];
            if psi == 0.0 {
                continue;
            }
            let cs = map.centroids_mm[s];
            let density = model.children[depth]
                .offset
                .density([cs[0] - cr[0], cs[1] - cr[1], cs[2] - cr[2]]);
            let w = weight
                * psi.powf(model.unary_weight)
                * density.powf(model.pairwise_weight);
            if w == 0.0 {
                continue;
            }
            chosen.push(s);
            recurse(
                depth + 1,
                r,
                w,
                chosen,
                model,
                psi_children,
                map,
                root_marginal,
                child_marginals,
            );
            chosen.pop();
        }
    }

    for r in 0..n {
        let w = psi_root[r].powf(model.unary_weight);
        if w == 0.0 {
            continue;
        }
        let mut chosen = Vec::with_capacity(p);
        recurse(
            0,
            r,
            w,
            &mut chosen,
            model,
            &psi_children,
            map,
            &mut root_marginal,
            &mut child_marginals,
        );
    }

    max_normalize(&mut root_marginal);
    for m in child_marginals.iter_mut() {
        max_normalize(m);
    }
    Ok((root_marginal, child_marginals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::PartPotentials;

    fn map_with_centroids(centroids: Vec<[f64; 3]>) -> SupervoxelMap {
        let n = centroids.len();
        SupervoxelMap {
            dims: [n, 1, 4],
            spacing_mm: [1.0, 1.0, 2.0],
            labels: (0..n * 4).map(|v| (v % n) as u32).collect(),
            centroids_mm: centroids,
            sizes: vec![4; n],
            mean_features: vec![Vec::new(); n],
            adjacency: vec![Vec::new(); n],
            energy_history: Vec::new(),
        }
    }

    fn potentials(rows: Vec<[f64; 4]>) -> PartPotentials {
        PartPotentials {
            classes: vec![0, 1, 2, 3],
            n_rows: rows.len(),
            probs: rows.into_iter().flatten().collect(),
        }
    }

    fn model(mu_lumen: [f64; 3], mu_bladder: [f64; 3], sigma: f64) -> PartsModel {
        PartsModel {
            root_class: LABEL_TUMOUR,
            children: vec![
                ChildPart {
                    class: LABEL_LUMEN,
                    offset: OffsetGaussian {
                        mean_mm: mu_lumen,
                        sigma_mm: [sigma; 3],
                    },
                    location_prior: None,
                },
                ChildPart {
                    class: LABEL_BLADDER,
                    offset: OffsetGaussian {
                        mean_mm: mu_bladder,
                        sigma_mm: [sigma; 3],
                    },
                    location_prior: None,
                },
            ],
            epsilon_msg: DEFAULT_EPSILON_MSG,
            unary_weight: 1.0,
            pairwise_weight: 1.0,
        }
    }

    #[test]
    fn perfect_geometry_beats_wrong_geometry() {
        // A at origin with lumen B and bladder C at exactly the learned
        // offsets; D has the same unary but no supporting geometry.
        let map = map_with_centroids(vec![
            [0.0, 0.0, 0.0],    // A: root candidate
            [10.0, 0.0, 0.0],   // B: lumen candidate
            [0.0, -30.0, 0.0],  // C: bladder candidate
            [60.0, 60.0, 4.0],  // D: decoy root candidate
        ]);
        let pot = potentials(vec![
            [0.1, 0.9, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.1, 0.9, 0.0, 0.0],
        ]);
        let m = model([10.0, 0.0, 0.0], [0.0, -30.0, 0.0], 8.0);
        let beliefs = collect_evidence(&pot, &map, &m).unwrap();
        assert!((beliefs.root[0] - 1.0).abs() < 1e-12, "{:?}", beliefs.root);
        assert!(beliefs.root[3] < 1e-6, "{:?}", beliefs.root);
    }

    #[test]
    fn all_zero_child_potentials_degrade_to_unary() {
        let map = map_with_centroids(vec![
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [20.0, 0.0, 0.0],
        ]);
        let pot = potentials(vec![
            [0.5, 0.5, 0.0, 0.0],
            [0.2, 0.8, 0.0, 0.0],
            [0.9, 0.1, 0.0, 0.0],
        ]);
        let m = model([5.0, 0.0, 0.0], [0.0, -20.0, 0.0], 10.0);
        let beliefs = collect_evidence(&pot, &map, &m).unwrap();
        assert!(beliefs.degenerate_messages.iter().all(|&d| d));
        // bel_r proportional to psi_r exactly: max-normalized unary.
        assert!((beliefs.root[1] - 1.0).abs() < 1e-12);
        assert!((beliefs.root[0] - 0.5 / 0.8).abs() < 1e-12);
        assert!((beliefs.root[2] - 0.1 / 0.8).abs() < 1e-12);
    }

    #[test]
    fn single_supervoxel_falls_back_to_unary() {
        let map = map_with_centroids(vec![[0.0, 0.0, 0.0]]);
        let pot = potentials(vec![[0.3, 0.7, 0.0, 0.0]]);
        let m = model([5.0, 0.0, 0.0], [0.0, -20.0, 0.0], 10.0);
        let beliefs = collect_evidence(&pot, &map, &m).unwrap();
        assert_eq!(beliefs.root, vec![1.0]);
        assert!(beliefs.degenerate_messages.iter().all(|&d| d));
    }

    #[test]
    fn distribute_identifies_child_candidates() {
        let map = map_with_centroids(vec![
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, -30.0, 0.0],
        ]);
        let pot = potentials(vec![
            [0.1, 0.9, 0.0, 0.0],
            [0.2, 0.0, 0.8, 0.0],
            [0.2, 0.0, 0.0, 0.8],
        ]);
        let m = model([10.0, 0.0, 0.0], [0.0, -30.0, 0.0], 8.0);
        let mut beliefs = collect_evidence(&pot, &map, &m).unwrap();
        distribute_evidence(&mut beliefs, &pot, &map, &m).unwrap();
        assert!((beliefs.children[0][1] - 1.0).abs() < 1e-12);
        assert!((beliefs.children[1][2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_child_potential_flags_child_beliefs() {
        let map = map_with_centroids(vec![[0.0; 3], [10.0, 0.0, 0.0]]);
        let pot = potentials(vec![[0.5, 0.5, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0]]);
        let m = model([10.0, 0.0, 0.0], [0.0, -30.0, 0.0], 8.0);
        let mut beliefs = collect_evidence(&pot, &map, &m).unwrap();
        distribute_evidence(&mut beliefs, &pot, &map, &m).unwrap();
        assert!(beliefs.child_all_zero.iter().all(|&z| z));
        assert!(beliefs.children[0].iter().all(|&b| b == 0.0));
    }

    /// Geometrically separated instance: root cluster near the origin,
    /// lumen cluster at +x, bladder cluster at -y, unaries zero outside
    /// each part's own cluster so the oracle's distinctness constraint is
    /// inactive.
    fn separated_instance(
        seed: u64,
    ) -> (SupervoxelMap, PartPotentials, PartsModel) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n_root = 3 + (seed as usize % 3);
        let n_lumen = 3 + (seed as usize % 2);
        let n_bladder = 3;
        let mut centroids = Vec::new();
        let mut rows = Vec::new();
        let spread = 8.0;
        for _ in 0..n_root {
            centroids.push([
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            ]);
            rows.push([0.1, 0.3 + rng.random_range(0.0..0.7), 0.0, 0.0]);
        }
        for _ in 0..n_lumen {
            centroids.push([
                40.0 + rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            ]);
            rows.push([0.1, 0.0, 0.3 + rng.random_range(0.0..0.7), 0.0]);
        }
        for _ in 0..n_bladder {
            centroids.push([
                rng.random_range(-spread..spread),
                -50.0 + rng.random_range(-spread..spread),
                rng.random_range(-spread..spread),
            ]);
            rows.push([0.1, 0.0, 0.0, 0.3 + rng.random_range(0.0..0.7)]);
        }
        let map = map_with_centroids(centroids);
        let pot = potentials(rows);
        let m = model([40.0, 0.0, 0.0], [0.0, -50.0, 0.0], 12.0);
        (map, pot, m)
    }

    #[test]
    fn bp_matches_enumeration_on_separated_instances() {
        for seed in 0..10u64 {
            let (map, pot, m) = separated_instance(seed);
            let mut beliefs = collect_evidence(&pot, &map, &m).unwrap();
            distribute_evidence(&mut beliefs, &pot, &map, &m).unwrap();
            let (root_oracle, child_oracle) = enumerate_oracle(&pot, &map, &m).unwrap();
            for (i, (&b, &o)) in beliefs.root.iter().zip(&root_oracle).enumerate() {
                assert!(
                    (b - o).abs() <= 1e-9 * o.max(1e-30),
                    "seed {seed} root {i}: bp {b} vs oracle {o}"
                );
            }
            for c in 0..2 {
                for (i, (&b, &o)) in beliefs.children[c].iter().zip(&child_oracle[c]).enumerate() {
                    assert!(
                        (b - o).abs() <= 1e-9 * o.max(1e-30),
                        "seed {seed} child {c} candidate {i}: bp {b} vs oracle {o}"
                    );
                }
            }
        }
    }

    #[test]
    fn oracle_symmetric_candidates_share_the_maximum() {
        // Two root candidates in perfect symmetry (each sees one exact-offset
        // child and one 20 mm off): both marginals hit 1.
        let map = map_with_centroids(vec![
            [0.0, 0.0, 0.0],
            [0.0, 20.0, 0.0],
            [10.0, 0.0, 0.0],
            [10.0, 20.0, 0.0],
            [0.0, -30.0, 0.0],
            [0.0, -10.0, 0.0],
        ]);
        let pot = potentials(vec![
            [0.1, 0.9, 0.0, 0.0],
            [0.1, 0.9, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 1.0],
        ]);
        let m = model([10.0, 0.0, 0.0], [0.0, -30.0, 0.0], 8.0);
        let (root, _) = enumerate_oracle(&pot, &map, &m).unwrap();
        assert!((root[0] - 1.0).abs() < 1e-9);
        assert!((root[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn oracle_concentrates_on_deterministic_potentials() {
        let map = map_with_centroids(vec![
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, -30.0, 0.0],
            [25.0, 25.0, 0.0],
        ]);
        let pot = potentials(vec![
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
            [1.0, 0.0, 0.0, 0.0],
        ]);
        let m = model([10.0, 0.0, 0.0], [0.0, -30.0, 0.0], 8.0);
        let (root, children) = enumerate_oracle(&pot, &map, &m).unwrap();
        assert_eq!(root[0], 1.0);
        assert!(root[1] == 0.0 && root[3] == 0.0);
        assert_eq!(children[0][1], 1.0);
        assert_eq!(children[1][2], 1.0);
    }

    #[test]
    fn translation_invariance() {
        let (map, pot, m) = separated_instance(3);
        let beliefs = collect_evidence(&pot, &map, &m).unwrap();
        let mut shifted = map.clone();
        for c in shifted.centroids_mm.iter_mut() {
            c[0] += 123.0;
            c[1] -= 55.0;
            c[2] += 7.5;
        }
        let beliefs2 = collect_evidence(&pot, &shifted, &m).unwrap();
        for (a, b) in beliefs.root.iter().zip(&beliefs2.root) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_a_unary_does_not_demote_it() {
        let (map, mut pot, m) = separated_instance(5);
        let beliefs = collect_evidence(&pot, &map, &m).unwrap();
        let ratio_before = beliefs.root[0] / beliefs.root[1];
        // Raise candidate 0's root-class potential.
        pot.probs[0 * 4 + 1] = (pot.probs[0 * 4 + 1] * 2.0).min(1.0);
        let beliefs2 = collect_evidence(&pot, &map, &m).unwrap();
        let ratio_after = beliefs2.root[0] / beliefs2.root[1];
        assert!(ratio_after + 1e-12 >= ratio_before);
    }

    #[test]
    fn uninformative_geometry_recovers_unary_ranking() {
        // Equal child potentials everywhere make the messages constant, so
        // the root ranking equals the unary ranking exactly.
        let map = map_with_centroids(vec![
            [0.0, 0.0, 0.0],
            [15.0, 0.0, 0.0],
            [0.0, 25.0, 0.0],
            [40.0, 40.0, 8.0],
        ]);
        let pot = potentials(vec![
            [0.2, 0.35, 0.3, 0.3],
            [0.2, 0.9, 0.3, 0.3],
            [0.2, 0.1, 0.3, 0.3],
            [0.2, 0.6, 0.3, 0.3],
        ]);
        let m = model([0.0; 3], [0.0; 3], 1e9);
        let beliefs = collect_evidence(&pot, &map, &m).unwrap();
        let mut by_belief: Vec<usize> = (0..4).collect();
        by_belief.sort_by(|&a, &b| beliefs.root[b].partial_cmp(&beliefs.root[a]).unwrap());
        assert_eq!(by_belief, vec![1, 3, 0, 2]);
    }

    #[test]
    fn train_spatial_matches_hand_arithmetic() {
        // Two cases, identical offsets: sigma floors at 5 mm.
        let mk_case = |root: [f64; 3], lumen: [f64; 3], bladder: [f64; 3]| {
            map_with_centroids(vec![root, lumen, bladder])
        };
        let labels: Vec<u8> = vec![LABEL_TUMOUR, LABEL_LUMEN, LABEL_BLADDER];
        let a = mk_case([0.0; 3], [10.0, 20.0, 0.0], [0.0, -30.0, 0.0]);
        let b = mk_case([5.0, 5.0, 5.0], [15.0, 25.0, 5.0], [5.0, -25.0, 5.0]);
        let out = train_spatial(
            &[(&a, &labels), (&b, &labels)],
            &SpatialConfig::default(),
        )
        .unwrap();
        let lumen = &out.model.children[0];
        assert_eq!(lumen.offset.mean_mm, [10.0, 20.0, 0.0]);
        assert_eq!(lumen.offset.sigma_mm, [5.0, 5.0, 5.0]);
    }

    #[test]
    fn train_spatial_sample_sd_with_two_offsets() {
        // Offsets (0,0,0) and (0,0,20): mu_z = 10, sigma_z = sqrt(200).
        let labels: Vec<u8> = vec![LABEL_TUMOUR, LABEL_LUMEN, LABEL_BLADDER];
        let a = map_with_centroids(vec![[0.0; 3], [0.0, 0.0, 0.0], [0.0, -30.0, 0.0]]);
        let b = map_with_centroids(vec![[0.0; 3], [0.0, 0.0, 20.0], [0.0, -30.0, 0.0]]);
        let out = train_spatial(
            &[(&a, &labels), (&b, &labels)],
            &SpatialConfig::default(),
        )
        .unwrap();
        let lumen = &out.model.children[0];
        assert!((lumen.offset.mean_mm[2] - 10.0).abs() < 1e-12);
        assert!((lumen.offset.sigma_mm[2] - 200.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn train_spatial_skips_cases_missing_a_part() {
        let labels_full: Vec<u8> = vec![LABEL_TUMOUR, LABEL_LUMEN, LABEL_BLADDER];
        let labels_missing: Vec<u8> = vec![LABEL_TUMOUR, LABEL_LUMEN, 0];
        let a = map_with_centroids(vec![[0.0; 3], [10.0, 0.0, 0.0], [0.0, -30.0, 0.0]]);
        let b = map_with_centroids(vec![[0.0; 3], [10.0, 0.0, 0.0], [0.0, -30.0, 0.0]]);
        let out = train_spatial(
            &[(&a, &labels_full), (&b, &labels_missing)],
            &SpatialConfig::default(),
        )
        .unwrap();
        assert!(out.warnings.iter().any(|w| w.contains("class 3")));
        // Single usable bladder case: sigma floored.
        assert_eq!(out.model.children[1].offset.sigma_mm, [5.0, 5.0, 5.0]);
    }

    #[test]
    fn bladder_prior_suppresses_wrong_z() {
        let mut m = model([10.0, 0.0, 0.0], [0.0, -30.0, 0.0], 8.0);
        m.children[1].location_prior = Some(LocationPrior {
            mean: -0.25,
            sigma: 0.05,
        });
        // Two bladder candidates: one at the learned relative z, one far.
        let map = map_with_centroids(vec![
            [0.0, 0.0, 4.0],
            [10.0, 0.0, 4.0],
            [0.0, -30.0, 2.0],   // rel z = (2-4)/8 = -0.25: matches prior
            [0.0, -30.0, 6.0],   // rel z = +0.25: 10 sigma away
        ]);
        let pot = potentials(vec![
            [0.1, 0.9, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 0.9],
            [0.0, 0.0, 0.0, 0.9],
        ]);
        let mut beliefs = collect_evidence(&pot, &map, &m).unwrap();
        distribute_evidence(&mut beliefs, &pot, &map, &m).unwrap();
        assert!((beliefs.children[1][2] - 1.0).abs() < 1e-9);
        assert!(beliefs.children[1][3] < 1e-3, "{:?}", beliefs.children[1]);
    }
}
