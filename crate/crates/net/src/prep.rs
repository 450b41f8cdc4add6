//! Study preparation shared by training and inference.

use std::collections::BTreeMap;

use hpvd_core::volume::{normalize, resample, resampled_dims, Interpolation};
use hpvd_core::{Box3, LesionAnnotation, Mask, Phase, PhaseSet, PhaseStats, Study, Volume};

use crate::error::Result;
use crate::model::PhaseInputs;
use crate::tensor::Tensor;

/// Per-axis factor from resampled voxel coordinates back to the original
/// grid.
pub fn to_original_scale(spacing: [f64; 3], target: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| target[a] / spacing[a])
}

fn resample_mask(m: &Mask, spacing: [f64; 3], target: [f64; 3]) -> Result<Mask> {
    let as_vol = Volume::new(m.dims(), spacing, Phase::NC, m.data().iter().map(|b| f64::from(u8::from(*b))).collect())?;
    let r = resample(&as_vol, target, Interpolation::Trilinear)?;
    Ok(Mask::new(r.dims(), r.data().iter().map(|v| *v >= 0.5).collect())?)
}

/// Resamples every volume, the liver mask and the annotations of a study to
/// `target` spacing.
pub fn resample_study(s: &Study, target: [f64; 3], mode: Interpolation) -> Result<Study> {
    let spacing = s.spacing();
    if spacing == target {
        return Ok(s.clone());
    }
    let volumes: BTreeMap<Phase, Volume> =
        s.volumes().iter().map(|(p, v)| Ok((*p, resample(v, target, mode)?))).collect::<Result<_>>()?;
    let dims = resampled_dims(s.dims(), spacing, target);
    let grid = Box3::new([0.0; 3], dims.map(|d| d as f64))?;
    let f = [0, 1, 2].map(|a| spacing[a] / target[a]);
    let lesions = s
        .lesions()
        .iter()
        .filter_map(|l| l.bbox.scale(f).intersection(&grid).map(|bbox| LesionAnnotation { bbox, kind: l.kind }))
        .collect();
    let mask = s.liver_mask().map(|m| resample_mask(m, spacing, target)).transpose()?;
    Ok(Study::new(s.id(), volumes, mask, lesions)?)
}

/// Restricts a study to `phases`, resamples it and normalizes intensities.
pub fn prepare_study(s: &Study, phases: PhaseSet, stats: &PhaseStats, target: [f64; 3], mode: Interpolation) -> Result<Study> {
    let s = if phases == s.phases() { s.clone() } else { s.select_phases(phases)? };
    let s = resample_study(&s, target, mode)?;
    let volumes: BTreeMap<Phase, Volume> =
        s.volumes().iter().map(|(p, v)| Ok((*p, normalize(v, stats)?))).collect::<Result<_>>()?;
    Ok(Study::new(s.id(), volumes, s.liver_mask().cloned(), s.lesions().to_vec())?)
}

/// `[1, 1, D, H, W]` tensor of a volume (x varies fastest in both).
pub fn volume_tensor(v: &Volume) -> Tensor {
    let [x, y, z] = v.dims();
    Tensor::new(vec![1, 1, z, y, x], v.data().to_vec()).expect("volume length matches dims")
}

/// Depth slab `[z0, z1)` of each volume as network inputs.
pub fn slab_inputs(volumes: &BTreeMap<Phase, Volume>, z0: usize, z1: usize) -> Result<PhaseInputs> {
    volumes.iter().map(|(p, v)| Ok((*p, volume_tensor(v).slice_axis(2, z0, z1)?))).collect()
}
