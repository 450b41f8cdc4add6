//! Deterministic synthetic multi-phase CT studies with planted lesions.
//!
//! The abdomen is a uniform soft-tissue block with an ellipsoidal liver.
//! HCC lesions follow a wash-in / wash-out contrast pattern, TACE-treated
//! lesions are uniformly hyperdense (lipiodol), and cysts are hypodense in
//! every phase. Lesions are ellipsoids with a one-voxel linear edge ramp and
//! are annotated with the tight box of the voxels they touch.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Box3, LesionKind};
use crate::io::{self, DatasetIndex, Dtype, IndexEntry};
use crate::phase::{Phase, PhaseSet};
use crate::volume::{linear_index, LesionAnnotation, Mask, Study, Volume};

/// One value per contrast phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseValues {
    pub nc: f64,
    pub ap: f64,
    pub vp: f64,
    pub dp: f64,
}

impl PhaseValues {
    pub const fn uniform(v: f64) -> PhaseValues {
        PhaseValues { nc: v, ap: v, vp: v, dp: v }
    }

    pub fn get(&self, p: Phase) -> f64 {
        match p {
            Phase::NC => self.nc,
            Phase::AP => self.ap,
            Phase::VP => self.vp,
            Phase::DP => self.dp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub liver_center: [f64; 3],
    /// Semi-axes in voxels.
    pub liver_axes: [f64; 3],
    pub body_hu: PhaseValues,
    pub parenchyma_hu: PhaseValues,
    /// HCC enhancement relative to parenchyma.
    pub hcc_delta_hu: PhaseValues,
    pub tace_hu: f64,
    pub cyst_hu: f64,
    /// Inclusive range of HCC lesions per target study.
    pub hcc_per_target: [usize; 2],
    /// Inclusive range of cysts per study.
    pub cysts_per_study: [usize; 2],
    pub tace_in_target_prob: f64,
    pub tace_only_control_frac: f64,
    /// In-plane / through-plane semi-axis ranges in voxels.
    pub hcc_radius_xy: [f64; 2],
    pub hcc_radius_z: [f64; 2],
    pub tace_radius_xy: [f64; 2],
    pub tace_radius_z: [f64; 2],
    pub cyst_radius_xy: [f64; 2],
    pub cyst_radius_z: [f64; 2],
    pub noise_sigma: f64,
    /// Bright single-voxel speckles planted per HCC box, as a fraction of its voxels.
    pub speckle_fraction: f64,
    pub speckle_hu: f64,
    pub max_placement_attempts: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            dims: [48, 48, 12],
            spacing: [1.0, 1.0, 5.0],
            liver_center: [24.0, 24.0, 6.0],
            liver_axes: [20.0, 18.0, 5.5],
            body_hu: PhaseValues { nc: 40.0, ap: 55.0, vp: 65.0, dp: 60.0 },
            parenchyma_hu: PhaseValues { nc: 55.0, ap: 70.0, vp: 100.0, dp: 90.0 },
            hcc_delta_hu: PhaseValues { nc: -6.0, ap: 40.0, vp: -25.0, dp: -25.0 },
            tace_hu: 350.0,
            cyst_hu: 15.0,
            hcc_per_target: [1, 2],
            cysts_per_study: [0, 2],
            tace_in_target_prob: 0.25,
            tace_only_control_frac: 0.25,
            hcc_radius_xy: [3.0, 5.5],
            hcc_radius_z: [1.0, 2.0],
            tace_radius_xy: [2.5, 4.5],
            tace_radius_z: [1.0, 1.5],
            cyst_radius_xy: [2.5, 4.5],
            cyst_radius_z: [1.0, 1.5],
            noise_sigma: 10.0,
            speckle_fraction: 0.005,
            speckle_hu: 400.0,
            max_placement_attempts: 500,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.dims.contains(&0) || !self.spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return bad("phantom grid must be nonempty with positive spacing");
        }
        if !(self.tace_hu > 200.0) {
            return bad("tace_hu must exceed 200 HU so treated lesions trigger the classifier");
        }
        for r in [
            self.hcc_radius_xy,
            self.hcc_radius_z,
            self.tace_radius_xy,
            self.tace_radius_z,
            self.cyst_radius_xy,
            self.cyst_radius_z,
        ] {
            if !(r[0] > 0.0 && r[0] <= r[1]) {
                return bad("lesion radius ranges must be positive and ordered");
            }
        }
        if self.hcc_per_target[0] == 0 || self.hcc_per_target[0] > self.hcc_per_target[1] {
            return bad("hcc_per_target must be an ordered range starting at >= 1");
        }
        if self.cysts_per_study[0] > self.cysts_per_study[1] {
            return bad("cysts_per_study must be ordered");
        }
        if !(self.noise_sigma >= 0.0) || !(0.0..0.01).contains(&self.speckle_fraction) {
            return bad("noise_sigma must be >= 0 and speckle_fraction in [0, 0.01)");
        }
        for p in [self.tace_in_target_prob, self.tace_only_control_frac] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        Ok(())
    }

    fn liver_rho2(&self, p: [f64; 3]) -> f64 {
        (0..3).map(|a| ((p[a] - self.liver_center[a]) / self.liver_axes[a]).powi(2)).sum()
    }

    /// Exact liver mask: voxel centers inside the ellipsoid.
    pub fn liver_mask(&self) -> Mask {
        let d = self.dims;
        let mut data = Vec::with_capacity(d.iter().product());
        for z in 0..d[2] {
            for y in 0..d[1] {
                for x in 0..d[0] {
                    data.push(self.liver_rho2(voxel_center(x, y, z)) <= 1.0);
                }
            }
        }
        Mask::new(d, data).expect("mask sized from dims")
    }
}

fn voxel_center(x: usize, y: usize, z: usize) -> [f64; 3] {
    [x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5]
}

/// What to plant in one study.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyPlan {
    pub id: String,
    pub n_hcc: usize,
    pub n_tace: usize,
    pub n_cyst: usize,
    pub phases: PhaseSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BlobKind {
    Hcc,
    Tace,
    Cyst,
}

#[derive(Debug, Clone, Copy)]
struct Blob {
    kind: BlobKind,
    center: [f64; 3],
    radii: [f64; 3],
    bbox: [[usize; 2]; 3],
}

impl Blob {
    /// Edge-ramp weight in [0, 1]: 1 deep inside, 0 outside, linear across
    /// one voxel of (first-order) distance to the surface.
    fn weight(&self, p: [f64; 3]) -> f64 {
        let d = [0, 1, 2].map(|a| p[a] - self.center[a]);
        let rho = (0..3).map(|a| (d[a] / self.radii[a]).powi(2)).sum::<f64>().sqrt();
        if rho == 0.0 {
            return 1.0;
        }
        let grad = (0..3).map(|a| (d[a] / self.radii[a].powi(2)).powi(2)).sum::<f64>().sqrt() / rho;
        let dist = (rho - 1.0) / grad;
        (0.5 - dist).clamp(0.0, 1.0)
    }

    fn annotation_box(&self) -> Box3 {
        let b = self.bbox;
        Box3::new(
            [b[0][0] as f64, b[1][0] as f64, b[2][0] as f64],
            [b[0][1] as f64, b[1][1] as f64, b[2][1] as f64],
        )
        .expect("nonempty blob box")
    }

    fn overlaps(&self, other: &Blob, margin: usize) -> bool {
        (0..3).all(|a| {
            self.bbox[a][0] < other.bbox[a][1] + margin && other.bbox[a][0] < self.bbox[a][1] + margin
        })
    }
}

/// Tight voxel box of nonzero weight, or `None` if it leaves the grid or is empty.
fn blob_box(center: [f64; 3], radii: [f64; 3], dims: [usize; 3]) -> Option<[[usize; 2]; 3]> {
    let probe = Blob { kind: BlobKind::Hcc, center, radii, bbox: [[0, 0]; 3] };
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let touches_edge = |a: usize| center[a] - radii[a] - 1.0 < 0.0 || center[a] + radii[a] + 1.0 > dims[a] as f64;
    if (0..3).any(touches_edge) {
        return None;
    }
    let range = |a: usize| {
        let l = (center[a] - radii[a] - 1.0).floor() as usize;
        let h = ((center[a] + radii[a] + 1.0).ceil() as usize).min(dims[a]);
        l..h
    };
    for z in range(2) {
        for y in range(1) {
            for x in range(0) {
                if probe.weight(voxel_center(x, y, z)) > 0.0 {
                    for (a, i) in [x, y, z].into_iter().enumerate() {
                        lo[a] = lo[a].min(i);
                        hi[a] = hi[a].max(i + 1);
                    }
                }
            }
        }
    }
    (lo[0] < hi[0]).then(|| [[lo[0], hi[0]], [lo[1], hi[1]], [lo[2], hi[2]]])
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn place_blob(cfg: &PhantomConfig, rng: &mut ChaCha8Rng, kind: BlobKind, placed: &[Blob]) -> Result<Blob> {
    let (rxy, rz) = match kind {
        BlobKind::Hcc => (cfg.hcc_radius_xy, cfg.hcc_radius_z),
        BlobKind::Tace => (cfg.tace_radius_xy, cfg.tace_radius_z),
        BlobKind::Cyst => (cfg.cyst_radius_xy, cfg.cyst_radius_z),
    };
    for _ in 0..cfg.max_placement_attempts {
        let radii = [sample_range(rng, rxy), sample_range(rng, rxy), sample_range(rng, rz)];
        let center = [0, 1, 2].map(|a| {
            let c = cfg.liver_center[a];
            let h = cfg.liver_axes[a];
            rng.random_range(c - h..c + h)
        });
        let Some(bbox) = blob_box(center, radii, cfg.dims) else { continue };
        let blob = Blob { kind, center, radii, bbox };
        // every voxel of the annotation box must lie in the liver
        let corners_in_liver = (0..8).all(|c| {
            let p = [0, 1, 2].map(|a| {
                let [l, h] = bbox[a];
                if c >> a & 1 == 0 { l as f64 + 0.5 } else { h as f64 - 0.5 }
            });
            cfg.liver_rho2(p) <= 1.0
        });
        if !corners_in_liver {
            continue;
        }
        if placed.iter().any(|o| blob.overlaps(o, 1)) {
            continue;
        }
        return Ok(blob);
    }
    Err(Error::PlacementFailed(cfg.max_placement_attempts))
}

/// Renders one study. Deterministic in `(cfg, plan, seed)`.
pub fn generate_study(cfg: &PhantomConfig, plan: &StudyPlan, seed: u64) -> Result<Study> {
    cfg.validate()?;
    if plan.phases.is_empty() {
        return Err(Error::InvalidConfig("study plan selects no phases".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blobs: Vec<Blob> = Vec::new();
    for (kind, n) in [(BlobKind::Hcc, plan.n_hcc), (BlobKind::Tace, plan.n_tace), (BlobKind::Cyst, plan.n_cyst)] {
        for _ in 0..n {
            let b = place_blob(cfg, &mut rng, kind, &blobs)?;
            blobs.push(b);
        }
    }
    let mask = cfg.liver_mask();
    let dims = cfg.dims;
    let n_vox: usize = dims.iter().product();

    // lesion weights are phase independent
    let mut weights: Vec<Vec<(usize, f64)>> = Vec::with_capacity(blobs.len());
    for b in &blobs {
        let mut w = Vec::new();
        for z in b.bbox[2][0]..b.bbox[2][1] {
            for y in b.bbox[1][0]..b.bbox[1][1] {
                for x in b.bbox[0][0]..b.bbox[0][1] {
                    let v = b.weight(voxel_center(x, y, z));
                    if v > 0.0 {
                        w.push((linear_index(dims, x, y, z), v));
                    }
                }
            }
        }
        weights.push(w);
    }

    // speckles: the same voxels in every phase
    let mut speckles = Vec::new();
    for b in blobs.iter().filter(|b| b.kind == BlobKind::Hcc) {
        let size: Vec<usize> = (0..3).map(|a| b.bbox[a][1] - b.bbox[a][0]).collect();
        let count = (cfg.speckle_fraction * (size[0] * size[1] * size[2]) as f64).floor() as usize;
        for _ in 0..count {
            let p = [0, 1, 2].map(|a| rng.random_range(b.bbox[a][0]..b.bbox[a][1]));
            speckles.push(linear_index(dims, p[0], p[1], p[2]));
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut volumes = BTreeMap::new();
    // every phase consumes noise so a study's content does not depend on the phase subset
    for p in Phase::ALL {
        let paren = cfg.parenchyma_hu.get(p);
        let mut data: Vec<f64> = mask
            .data()
            .iter()
            .map(|&inside| if inside { paren } else { cfg.body_hu.get(p) })
            .collect();
        for (b, w) in blobs.iter().zip(&weights) {
            for &(i, wt) in w {
                data[i] = match b.kind {
                    BlobKind::Hcc => paren + wt * cfg.hcc_delta_hu.get(p),
                    BlobKind::Tace => (1.0 - wt) * paren + wt * cfg.tace_hu,
                    BlobKind::Cyst => (1.0 - wt) * paren + wt * cfg.cyst_hu,
                };
            }
        }
        if cfg.noise_sigma > 0.0 {
            for v in data.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        for &i in &speckles {
            data[i] = cfg.speckle_hu;
        }
        // stored as int16: round and normalize -0.0
        for v in data.iter_mut() {
            *v = v.round().clamp(-1024.0, 3071.0) + 0.0;
        }
        debug_assert_eq!(data.len(), n_vox);
        if plan.phases.contains(p) {
            volumes.insert(p, Volume::new(dims, cfg.spacing, p, data)?);
        }
    }

    let lesions = blobs
        .iter()
        .filter_map(|b| {
            let kind = match b.kind {
                BlobKind::Hcc => LesionKind::Hcc,
                BlobKind::Tace => LesionKind::Tace,
                BlobKind::Cyst => return None,
            };
            Some(LesionAnnotation { bbox: b.annotation_box(), kind })
        })
        .collect();
    Study::new(plan.id.clone(), volumes, Some(mask), lesions)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRequest {
    pub name: String,
    pub n_target: usize,
    pub n_control: usize,
}

impl SplitRequest {
    pub fn new(name: &str, n_target: usize, n_control: usize) -> SplitRequest {
        SplitRequest { name: name.to_string(), n_target, n_control }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    /// `(split name, study)` in generation order; ids are unique.
    pub studies: Vec<(String, Study)>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Vec<&Study> {
        self.studies.iter().filter(|(s, _)| s == name).map(|(_, st)| st).collect()
    }
}

/// Study plans for every split, drawn from one seeded stream.
pub fn plan_dataset(cfg: &PhantomConfig, splits: &[SplitRequest], seed: u64) -> Vec<(String, StudyPlan, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut next_id = 0usize;
    for split in splits {
        for i in 0..split.n_target + split.n_control {
            let target = i < split.n_target;
            let n_hcc = if target { rng.random_range(cfg.hcc_per_target[0]..=cfg.hcc_per_target[1]) } else { 0 };
            let tace_p = if target { cfg.tace_in_target_prob } else { cfg.tace_only_control_frac };
            let n_tace = usize::from(rng.random_bool(tace_p));
            let n_cyst = rng.random_range(cfg.cysts_per_study[0]..=cfg.cysts_per_study[1]);
            let study_seed = rng.random::<u64>();
            let plan = StudyPlan {
                id: format!("study_{next_id:04}"),
                n_hcc,
                n_tace,
                n_cyst,
                phases: PhaseSet::FULL,
            };
            next_id += 1;
            out.push((split.name.clone(), plan, study_seed));
        }
    }
    out
}

pub fn generate_dataset(cfg: &PhantomConfig, splits: &[SplitRequest], seed: u64) -> Result<Dataset> {
    let studies = plan_dataset(cfg, splits, seed)
        .into_iter()
        .map(|(split, plan, s)| Ok((split, generate_study(cfg, &plan, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { studies })
}

/// Writes `<root>/index.json` and `<root>/studies/<id>/...`.
pub fn write_dataset(root: &Path, ds: &Dataset) -> Result<()> {
    let mut entries = Vec::with_capacity(ds.studies.len());
    for (split, study) in &ds.studies {
        let rel = format!("studies/{}", study.id());
        io::save_study(study, &root.join(&rel), Dtype::Int16Le)?;
        entries.push(IndexEntry { id: study.id().to_string(), split: split.clone(), dir: rel });
    }
    io::write_index(&root.join(io::INDEX_FILE), &DatasetIndex { version: 1, studies: entries })
}
