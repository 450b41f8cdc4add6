//! Raw detections → untreated-HCC findings.
//!
//! Stages run in the order NMS → liver-mask filter → TACE threshold
//! classifier. Filters never move boxes or change scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou3, Box3, Detection, DetectionKind, LesionKind};
use crate::phase::Phase;
use crate::volume::{linear_index, Mask, Study, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub nms_iou: f64,
    pub liver_overlap_min: f64,
    pub tace_hu_threshold: f64,
    pub tace_fraction: f64,
    /// Phases tried in order for the TACE HU test; the first present one is used.
    pub tace_phase_order: Vec<Phase>,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            nms_iou: 0.1,
            liver_overlap_min: 0.30,
            tace_hu_threshold: 200.0,
            tace_fraction: 0.01,
            tace_phase_order: vec![Phase::NC, Phase::DP, Phase::VP, Phase::AP],
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v.is_finite() && (0.0..=1.0).contains(&v);
        if !unit(self.nms_iou) || !unit(self.liver_overlap_min) || !unit(self.tace_fraction) {
            return Err(Error::InvalidConfig("postprocess ratios must lie in [0, 1]".into()));
        }
        if !self.tace_hu_threshold.is_finite() {
            return Err(Error::InvalidConfig("tace_hu_threshold must be finite".into()));
        }
        if self.tace_phase_order.is_empty() {
            return Err(Error::InvalidConfig("tace_phase_order is empty".into()));
        }
        Ok(())
    }
}

/// Indices of `dets` sorted by descending score, ties by original position.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. A detection is dropped iff its IoU with an
/// already kept, higher-ranked detection exceeds `iou_thresh`.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for i in score_order(dets) {
        let d = dets[i];
        if kept.iter().all(|k| iou3(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Fraction of voxels (centers inside the box, clipped to the grid) that are
/// set in `mask`. `None` when the clipped box holds no voxel.
pub fn mask_overlap(b: &Box3, mask: &Mask) -> Option<f64> {
    let [rx, ry, rz] = b.voxel_ranges(mask.dims());
    let total = rx.len() * ry.len() * rz.len();
    if total == 0 {
        return None;
    }
    let mut inside = 0usize;
    for z in rz {
        for y in ry.clone() {
            inside += rx.clone().filter(|&x| mask.get(x, y, z)).count();
        }
    }
    Some(inside as f64 / total as f64)
}

/// Keeps detections whose box overlaps the liver mask by at least `min_overlap`.
/// Boxes entirely outside the grid are dropped.
pub fn liver_filter(dets: &[Detection], mask: Option<&Mask>, min_overlap: f64) -> Vec<Detection> {
    let Some(mask) = mask else {
        return dets.to_vec();
    };
    dets.iter()
        .filter(|d| mask_overlap(&d.bbox, mask).is_some_and(|f| f >= min_overlap))
        .copied()
        .collect()
}

/// Fraction of in-box voxels strictly brighter than `threshold` HU.
pub fn bright_fraction(b: &Box3, v: &Volume, threshold: f64) -> f64 {
    let dims = v.dims();
    let [rx, ry, rz] = b.voxel_ranges(dims);
    let total = rx.len() * ry.len() * rz.len();
    if total == 0 {
        return 0.0;
    }
    let data = v.data();
    let mut bright = 0usize;
    for z in rz {
        for y in ry.clone() {
            let row = linear_index(dims, 0, y, z);
            bright += data[row + rx.start..row + rx.end].iter().filter(|h| **h > threshold).count();
        }
    }
    bright as f64 / total as f64
}

pub fn tace_phase(study: &Study, cfg: &PostprocessConfig) -> Result<Phase> {
    cfg.tace_phase_order
        .iter()
        .copied()
        .find(|p| study.volume(*p).is_some())
        .ok_or(Error::NoUsablePhase)
}

/// TACE iff more than `tace_fraction` of the box exceeds `tace_hu_threshold`.
pub fn tace_classify(det: &Detection, study: &Study, cfg: &PostprocessConfig) -> Result<LesionKind> {
    let phase = tace_phase(study, cfg)?;
    let v = study.volume(phase).ok_or(Error::NoUsablePhase)?;
    if bright_fraction(&det.bbox, v, cfg.tace_hu_threshold) > cfg.tace_fraction {
        Ok(LesionKind::Tace)
    } else {
        Ok(LesionKind::Hcc)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PipelineOutput {
    /// Untreated-HCC findings, descending score.
    pub hcc: Vec<Detection>,
    /// Findings the threshold classifier labelled TACE-treated.
    pub tace: Vec<Detection>,
}

pub fn pipeline(dets: &[Detection], study: &Study, cfg: &PostprocessConfig) -> Result<PipelineOutput> {
    cfg.validate()?;
    let kept = nms(dets, cfg.nms_iou);
    let kept = liver_filter(&kept, study.liver_mask(), cfg.liver_overlap_min);
    let mut out = PipelineOutput::default();
    for d in kept {
        let kind = tace_classify(&d, study, cfg)?;
        let labelled = Detection { kind: DetectionKind::from(kind), ..d };
        match kind {
            LesionKind::Hcc => out.hcc.push(labelled),
            LesionKind::Tace => out.tace.push(labelled),
        }
    }
    Ok(out)
}
