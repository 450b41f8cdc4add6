//! CenterNet training targets and loss.

use std::collections::BTreeMap;

use hpvd_core::Box3;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::graph::FocalParams;
use crate::model::{Builder, BnUpdate, Mode, PhaseInputs};
use crate::params::NetParams;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub size_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { focal_alpha: 2.0, focal_beta: 4.0, size_weight: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.focal_alpha, self.focal_beta, self.size_weight].iter().all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(NetError::Config("loss weights must be finite and non-negative".into()))
        }
    }
}

/// One ground-truth center on the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetCenter {
    pub sample: usize,
    /// Output-grid voxel `[x, y, z]`.
    pub voxel: [usize; 3],
    /// Natural log of the box extent in input voxels, `[x, y, z]`.
    pub log_extent: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct CenterTargets {
    /// `[N, 1, D, H, W]` on the output grid; exactly 1 at centers.
    pub heat: Tensor,
    pub centers: Vec<TargetCenter>,
}

impl CenterTargets {
    pub fn num_positives(&self) -> usize {
        self.centers.len()
    }

    fn size_index(&self, c: &TargetCenter, channel: usize) -> usize {
        let [n, _, d, h, w] = self.heat.dims5().expect("rank-5 target");
        debug_assert!(c.sample < n);
        ((((c.sample * 3 + channel) * d) + c.voxel[2]) * h + c.voxel[1]) * w + c.voxel[0]
    }

    /// `(flat index into the size map, target)` pairs.
    pub fn size_entries(&self) -> Vec<(usize, f64)> {
        self.centers
            .iter()
            .flat_map(|c| (0..3).map(move |a| (self.size_index(c, a), c.log_extent[a])))
            .collect()
    }
}

/// Builds Gaussian center targets for a batch.
///
/// `boxes[n]` holds sample `n`'s boxes in input voxel coordinates; `grid` is
/// the output grid `[D, H, W]` and `stride` the in-plane downsampling. The
/// splat radius per axis is a third of the box extent on the output grid,
/// with sigma `(2r + 1) / 6`, truncated at `floor(r)`.
pub fn build_targets(boxes: &[Vec<Box3>], grid: [usize; 3], stride: usize) -> Result<CenterTargets> {
    if grid.contains(&0) || stride == 0 {
        return Err(NetError::Shape(format!("target grid {grid:?} / stride {stride}")));
    }
    let [d, h, w] = grid;
    let dims_xyz = [w, h, d];
    let scale = [stride as f64, stride as f64, 1.0];
    let mut heat = Tensor::zeros(&[boxes.len(), 1, d, h, w]);
    let mut centers = Vec::new();
    for (n, sample) in boxes.iter().enumerate() {
        let mut order: Vec<&Box3> = sample.iter().collect();
        order.sort_by(|a, b| b.volume().total_cmp(&a.volume()));
        let mut taken: BTreeMap<[usize; 3], ()> = BTreeMap::new();
        for b in order {
            let c = b.center();
            let e = b.extent();
            let mut peak = [0usize; 3];
            let mut sigma = [0.0; 3];
            let mut reach = [0isize; 3];
            for a in 0..3 {
                let co = c[a] / scale[a];
                peak[a] = (co.floor().max(0.0) as usize).min(dims_xyz[a] - 1);
                let r = e[a] / scale[a] / 3.0;
                sigma[a] = (2.0 * r + 1.0) / 6.0;
                reach[a] = r.floor() as isize;
            }
            for dz in -reach[2]..=reach[2] {
                for dy in -reach[1]..=reach[1] {
                    for dx in -reach[0]..=reach[0] {
                        let v = [peak[0] as isize + dx, peak[1] as isize + dy, peak[2] as isize + dz];
                        if (0..3).any(|a| v[a] < 0 || v[a] >= dims_xyz[a] as isize) {
                            continue;
                        }
                        let q = [dx as f64, dy as f64, dz as f64];
                        let g = (-(0..3).map(|a| q[a] * q[a] / (2.0 * sigma[a] * sigma[a])).sum::<f64>()).exp();
                        let i = ((n * d + v[2] as usize) * h + v[1] as usize) * w + v[0] as usize;
                        let cell = &mut heat.data_mut()[i];
                        *cell = cell.max(g);
                    }
                }
            }
            if taken.insert(peak, ()).is_none() {
                centers.push(TargetCenter { sample: n, voxel: peak, log_extent: e.map(f64::ln) });
            }
        }
    }
    Ok(CenterTargets { heat, centers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub focal: f64,
    pub size: f64,
}

fn check_target_shapes(heat: &Tensor, size: &Tensor, t: &CenterTargets) -> Result<()> {
    let hd = heat.dims5()?;
    let sd = size.dims5()?;
    if heat.shape() != t.heat.shape() || sd != [hd[0], 3, hd[2], hd[3], hd[4]] {
        return Err(NetError::Shape(format!(
            "heatmap {:?} / size {:?} vs targets {:?}",
            heat.shape(),
            size.shape(),
            t.heat.shape()
        )));
    }
    Ok(())
}

/// Loss on probability-domain outputs: penalty-reduced focal loss on the
/// heatmap plus weighted L1 on log extents at the centers, both divided by
/// the number of centers (at least 1).
pub fn centernet_loss(heatmap: &Tensor, size: &Tensor, targets: &CenterTargets, cfg: &LossConfig) -> Result<LossValue> {
    check_target_shapes(heatmap, size, targets)?;
    let norm = targets.num_positives().max(1) as f64;
    let mut focal = 0.0;
    for (p, t) in heatmap.data().iter().zip(targets.heat.data()) {
        if *t >= 1.0 {
            focal -= (1.0 - p).powf(cfg.focal_alpha) * p.ln();
        } else {
            focal -= (1.0 - t).powf(cfg.focal_beta) * p.powf(cfg.focal_alpha) * (1.0 - p).ln();
        }
    }
    focal /= norm;
    let l1: f64 = targets.size_entries().iter().map(|(i, t)| (size.data()[*i] - t).abs()).sum();
    let size_term = cfg.size_weight * l1 / norm;
    Ok(LossValue { total: focal + size_term, focal, size: size_term })
}

/// Loss, parameter gradients and batch-norm statistics of one training step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: LossValue,
    pub grads: BTreeMap<String, Tensor>,
    pub bn_updates: Vec<BnUpdate>,
}

fn build_loss(b: &mut Builder<'_>, inputs: &PhaseInputs, targets: &CenterTargets, cfg: &LossConfig) -> Result<(crate::graph::Var, LossValue)> {
    cfg.validate()?;
    let (logits, size) = b.build(inputs)?;
    check_target_shapes(b.g.value(logits), b.g.value(size), targets)?;
    let norm = targets.num_positives().max(1) as f64;
    let focal = b.g.focal_loss(logits, targets.heat.clone(), FocalParams { alpha: cfg.focal_alpha, beta: cfg.focal_beta, norm })?;
    let reg = b.g.abs_diff(size, targets.size_entries(), cfg.size_weight / norm)?;
    let total = b.g.sum_scalars(&[focal, reg])?;
    let value = LossValue {
        total: b.g.value(total).data()[0],
        focal: b.g.value(focal).data()[0],
        size: b.g.value(reg).data()[0],
    };
    Ok((total, value))
}

/// Loss value only (used by finite-difference checks).
pub fn loss_value(params: &NetParams, inputs: &PhaseInputs, targets: &CenterTargets, cfg: &LossConfig, mode: Mode) -> Result<LossValue> {
    let mut b = Builder::new(params, mode);
    build_loss(&mut b, inputs, targets, cfg).map(|(_, v)| v)
}

/// Train-mode loss with gradients for every parameter the loss depends on.
/// Parameters of absent phases are not reported.
pub fn loss_and_gradients(params: &NetParams, inputs: &PhaseInputs, targets: &CenterTargets, cfg: &LossConfig) -> Result<StepResult> {
    let mut b = Builder::new(params, Mode::Train);
    let (root, loss) = build_loss(&mut b, inputs, targets, cfg)?;
    if !loss.total.is_finite() {
        return Err(NetError::NonFiniteLoss(loss.total));
    }
    let grads = b.g.backward(root)?;
    let grads = b.param_grads(&grads);
    Ok(StepResult { loss, grads, bn_updates: b.updates })
}
