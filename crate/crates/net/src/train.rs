//! Training loop: random phase subsets, random crops, Adam with a step
//! learning-rate schedule.

use std::collections::BTreeMap;

use hpvd_core::volume::{crop_random, Interpolation};
use hpvd_core::{LesionKind, PhaseSet, PhaseStats, Study};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::loss::{build_targets, loss_and_gradients, LossConfig};
use crate::model::{apply_bn_updates, output_grid, PhaseInputs};
use crate::params::{ArchConfig, NetParams};
use crate::prep::{prepare_study, volume_tensor};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    pub loss: LossConfig,
    pub batches: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Fraction of `batches` after which the rate is divided by `lr_drop_factor`.
    pub lr_drop_fraction: f64,
    pub lr_drop_factor: f64,
    /// Training crop `[x, y, z]` in voxels, clamped to the smallest study.
    pub crop: [usize; 3],
    pub target_spacing: [f64; 3],
    pub interpolation: Interpolation,
    /// Phases used for every batch; `None` draws a random nonempty subset per batch.
    pub fixed_phases: Option<PhaseSet>,
    /// Loss above which training is declared diverged.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: ArchConfig::default(),
            loss: LossConfig::default(),
            batches: 2000,
            batch_size: 4,
            base_lr: 5e-4,
            lr_drop_fraction: 0.5,
            lr_drop_factor: 10.0,
            crop: [32, 32, 12],
            target_spacing: [1.0, 1.0, 5.0],
            interpolation: Interpolation::Cubic,
            fixed_phases: None,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.loss.validate()?;
        if self.batches == 0 || self.batch_size == 0 || self.crop.contains(&0) {
            return Err(NetError::Config("batches, batch_size and crop must be positive".into()));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) || !(self.lr_drop_factor >= 1.0) {
            return Err(NetError::Config("base_lr must be positive and lr_drop_factor >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_drop_fraction) {
            return Err(NetError::Config("lr_drop_fraction must be in [0, 1]".into()));
        }
        if !self.target_spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(NetError::Config("target_spacing must be positive".into()));
        }
        if self.fixed_phases.is_some_and(|p| p.is_empty()) {
            return Err(NetError::Config("fixed_phases must be nonempty".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based batch `b`.
    pub fn lr_at(&self, b: usize) -> f64 {
        let drop_at = (self.lr_drop_fraction * self.batches as f64).round() as usize;
        if b < drop_at {
            self.base_lr
        } else {
            self.base_lr / self.lr_drop_factor
        }
    }
}

/// Adam with per-parameter step counts; a parameter without a gradient in a
/// step is left untouched and its moments are not decayed.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: BTreeMap<String, (Tensor, Tensor, u64)>,
}

impl Adam {
    pub fn new() -> Adam {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, state: BTreeMap::new() }
    }

    pub fn step(&mut self, params: &mut NetParams, grads: &BTreeMap<String, Tensor>, lr: f64) {
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        params.visit_mut(&mut |name, p| {
            let Some(g) = grads.get(&name) else { return };
            let (m, v, t) = self
                .state
                .entry(name)
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape()), 0));
            *t += 1;
            let c1 = 1.0 - b1.powi(*t as i32);
            let c2 = 1.0 - b2.powi(*t as i32);
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                *pv -= lr * (*mv / c1) / ((*vv / c2).sqrt() + eps);
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    /// 1-based batch number.
    pub batch: usize,
    pub loss: f64,
    pub lr: f64,
    pub phase_subset: PhaseSet,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: NetParams,
    pub stats: PhaseStats,
    pub log: Vec<LogRow>,
}

/// Training log as CSV (`batch,loss,lr,phase_subset`).
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("batch,loss,lr,phase_subset\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.batch, r.loss, r.lr, r.phase_subset));
    }
    s
}

fn draw_subset(rng: &mut ChaCha8Rng, fixed: Option<PhaseSet>) -> PhaseSet {
    if let Some(p) = fixed {
        return p;
    }
    let all: Vec<PhaseSet> = PhaseSet::all_nonempty().collect();
    all[rng.random_range(0..all.len())]
}

pub fn train(studies: &[Study], cfg: &TrainConfig, seed: u64) -> Result<TrainOutput> {
    train_with_progress(studies, cfg, seed, |_| {})
}

/// Trains from scratch; `progress` sees every log row as it is produced.
pub fn train_with_progress(
    studies: &[Study],
    cfg: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&LogRow),
) -> Result<TrainOutput> {
    cfg.validate()?;
    if studies.is_empty() {
        return Err(NetError::Core(hpvd_core::Error::EmptyCohort("no training studies".into())));
    }
    let stats = PhaseStats::estimate(studies)?;
    let prepared: Vec<Study> = studies
        .iter()
        .map(|s| prepare_study(s, s.phases(), &stats, cfg.target_spacing, cfg.interpolation))
        .collect::<Result<_>>()?;
    let crop = [0, 1, 2].map(|a| prepared.iter().map(|s| s.dims()[a]).min().unwrap_or(1).min(cfg.crop[a]));
    let grid = output_grid([crop[2], crop[1], crop[0]]);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetParams::init(&cfg.arch, &mut rng)?;
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(cfg.batches);
    for b in 0..cfg.batches {
        let mut subset = draw_subset(&mut rng, cfg.fixed_phases);
        let mut eligible: Vec<usize> = Vec::new();
        for _ in 0..64 {
            eligible = (0..prepared.len()).filter(|i| subset.is_subset(prepared[*i].phases())).collect();
            if !eligible.is_empty() || cfg.fixed_phases.is_some() {
                break;
            }
            subset = draw_subset(&mut rng, None);
        }
        if eligible.is_empty() {
            return Err(NetError::Config(format!("no training study has phases {subset}")));
        }
        let mut per_phase: BTreeMap<_, Vec<Tensor>> = BTreeMap::new();
        let mut boxes = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = &prepared[eligible[rng.random_range(0..eligible.len())]];
            let c = crop_random(s, crop, rng.random())?;
            for p in subset.iter() {
                per_phase.entry(p).or_default().push(volume_tensor(&c.volumes[&p]));
            }
            boxes.push(c.lesions.iter().filter(|l| l.kind == LesionKind::Hcc).map(|l| l.bbox).collect());
        }
        let inputs: PhaseInputs =
            per_phase.into_iter().map(|(p, ts)| Ok((p, Tensor::stack_batch(&ts)?))).collect::<Result<_>>()?;
        let targets = build_targets(&boxes, grid, ArchConfig::OUTPUT_STRIDE)?;
        let step = match loss_and_gradients(&params, &inputs, &targets, &cfg.loss) {
            Ok(s) => s,
            Err(NetError::NonFiniteLoss(l)) => return Err(NetError::Divergence { batch: b + 1, loss: l }),
            Err(e) => return Err(e),
        };
        if step.loss.total > cfg.divergence_threshold {
            return Err(NetError::Divergence { batch: b + 1, loss: step.loss.total });
        }
        let lr = cfg.lr_at(b);
        adam.step(&mut params, &step.grads, lr);
        apply_bn_updates(&mut params, &step.bn_updates)?;
        let row = LogRow { batch: b + 1, loss: step.loss.total, lr, phase_subset: subset };
        progress(&row);
        log.push(row);
    }
    Ok(TrainOutput { params, stats, log })
}
