//! Peak extraction from head outputs.

use hpvd_core::{Box3, Detection, DetectionKind};
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::params::ArchConfig;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub k_max: usize,
    pub score_min: f64,
    pub stride: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { k_max: 20, score_min: 0.05, stride: ArchConfig::OUTPUT_STRIDE }
    }
}

/// Largest log extent accepted from the size head (about 3000 voxels).
const MAX_LOG_EXTENT: f64 = 8.0;
const MIN_LOG_EXTENT: f64 = -4.0;

/// Decodes one sample's head outputs (`[1, 1, D, H, W]` heatmap, `[1, 3, D,
/// H, W]` log extents) into boxes in input voxel coordinates.
///
/// Peaks are voxels not exceeded by any of their 26 neighbours; among equal
/// neighbours the lowest linear index wins. Up to `k_max` peaks with score at
/// least `score_min` are kept, highest score first.
pub fn decode(heatmap: &Tensor, size: &Tensor, cfg: &DecodeConfig) -> Result<Vec<Detection>> {
    let hd = heatmap.dims5()?;
    let sd = size.dims5()?;
    if hd[0] != 1 || hd[1] != 1 || sd != [1, 3, hd[2], hd[3], hd[4]] {
        return Err(NetError::Shape(format!("decode of heatmap {hd:?} with size {sd:?}")));
    }
    if cfg.stride == 0 {
        return Err(NetError::Config("decode stride must be positive".into()));
    }
    let [_, _, d, h, w] = hd;
    let hm = heatmap.data();
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut peaks: Vec<(f64, usize, [usize; 3])> = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = idx(z, y, x);
                let v = hm[i];
                if !(v >= cfg.score_min) {
                    continue;
                }
                let mut is_peak = true;
                'nb: for nz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                    for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                        for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                            let j = idx(nz, ny, nx);
                            if j != i && (hm[j] > v || (hm[j] == v && j < i)) {
                                is_peak = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if is_peak {
                    peaks.push((v, i, [x, y, z]));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    peaks.truncate(cfg.k_max);
    let plane = d * h * w;
    let s = cfg.stride as f64;
    peaks
        .into_iter()
        .map(|(score, i, [x, y, z])| {
            let center = [(x as f64 + 0.5) * s, (y as f64 + 0.5) * s, z as f64 + 0.5];
            let extent: [f64; 3] = std::array::from_fn(|a| {
                let l = size.data()[a * plane + i];
                let l = if l.is_finite() { l } else { 0.0 };
                l.clamp(MIN_LOG_EXTENT, MAX_LOG_EXTENT).exp()
            });
            let bbox = Box3::from_center_extent(center, extent)?;
            Ok(Detection::new(bbox, score.clamp(0.0, 1.0), DetectionKind::Unfiltered)?)
        })
        .collect()
}
