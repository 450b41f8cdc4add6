//! Whole-study inference with depth-wise sliding windows.

use hpvd_core::volume::{sliding_windows, stitch, Interpolation};
use hpvd_core::{Detection, PhaseSet, PhaseStats, Study};
use serde::{Deserialize, Serialize};

use crate::decode::{decode, DecodeConfig};
use crate::error::{NetError, Result};
use crate::model::{forward, Mode};
use crate::params::NetParams;
use crate::prep::{prepare_study, slab_inputs, to_original_scale};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Window depth in slices at the target spacing.
    pub window_depth: usize,
    pub window_overlap: usize,
    pub target_spacing: [f64; 3],
    pub interpolation: Interpolation,
    pub decode: DecodeConfig,
}

impl Default for InferConfig {
    fn default() -> Self {
        InferConfig {
            window_depth: 48,
            window_overlap: 16,
            target_spacing: [1.0, 1.0, 5.0],
            interpolation: Interpolation::Cubic,
            decode: DecodeConfig::default(),
        }
    }
}

/// Head outputs of a full study at the target spacing: `[1, 1, D, H', W']`
/// probabilities and `[1, 3, D, H', W']` log extents.
pub fn predict_maps(study: &Study, params: &NetParams, stats: &PhaseStats, phases: PhaseSet, cfg: &InferConfig) -> Result<(Tensor, Tensor)> {
    if phases.is_empty() {
        return Err(NetError::EmptyPhases);
    }
    let s = prepare_study(study, phases, stats, cfg.target_spacing, cfg.interpolation)?;
    let nz = s.dims()[2];
    let windows = sliding_windows(nz, cfg.window_depth, cfg.window_overlap)?;
    let mut heat_parts = Vec::with_capacity(windows.len());
    let mut size_parts: [Vec<_>; 3] = Default::default();
    let mut out_hw = (0, 0);
    for w in &windows {
        let inputs = slab_inputs(s.volumes(), w.start, w.end)?;
        let out = forward(params, &inputs, Mode::Eval)?;
        let d = out.heatmap.dims5()?;
        out_hw = (d[3], d[4]);
        heat_parts.push((w.clone(), out.heatmap.into_data()));
        let sd = out.size.data();
        let n = d[2] * d[3] * d[4];
        for (c, parts) in size_parts.iter_mut().enumerate() {
            parts.push((w.clone(), sd[c * n..(c + 1) * n].to_vec()));
        }
    }
    let plane = out_hw.0 * out_hw.1;
    let heat = Tensor::new(vec![1, 1, nz, out_hw.0, out_hw.1], stitch(&heat_parts, plane)?)?;
    let mut size = Vec::with_capacity(3 * nz * plane);
    for parts in &size_parts {
        size.extend(stitch(parts, plane)?);
    }
    let size = Tensor::new(vec![1, 3, nz, out_hw.0, out_hw.1], size)?;
    Ok((heat, size))
}

/// Unfiltered detections in the study's original voxel coordinates.
pub fn infer_study(study: &Study, params: &NetParams, stats: &PhaseStats, phases: PhaseSet, cfg: &InferConfig) -> Result<Vec<Detection>> {
    let (heat, size) = predict_maps(study, params, stats, phases, cfg)?;
    let f = to_original_scale(study.spacing(), cfg.target_spacing);
    let dets = decode(&heat, &size, &cfg.decode)?;
    dets.into_iter()
        .map(|d| Ok(Detection::new(d.bbox.scale(f), d.score, d.kind)?))
        .collect()
}
