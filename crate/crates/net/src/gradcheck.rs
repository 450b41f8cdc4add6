//! Central-difference verification of analytic parameter gradients.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::loss::{loss_and_gradients, loss_value, CenterTargets, LossConfig};
use crate::model::{Mode, PhaseInputs};
use crate::params::{param_group, NetParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    /// Entries sampled per parameter tensor.
    pub per_tensor: usize,
    /// Lower bound on the relative-error denominator.
    pub denom_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { eps: 1e-5, per_tensor: 3, denom_floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub group: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err_by_group(&self) -> BTreeMap<&'static str, f64> {
        let mut out = BTreeMap::new();
        for e in &self.entries {
            let m = out.entry(e.group).or_insert(0.0f64);
            *m = m.max(e.rel_err);
        }
        out
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_err).fold(0.0, f64::max)
    }
}

/// Compares train-mode analytic gradients against central differences of
/// the loss for a random sample of entries of every parameter the loss
/// depends on.
pub fn gradient_check(
    params: &NetParams,
    inputs: &PhaseInputs,
    targets: &CenterTargets,
    loss_cfg: &LossConfig,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let step = loss_and_gradients(params, inputs, targets, loss_cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut picks: Vec<(String, usize)> = Vec::new();
    params.visit(&mut |name, t: &Tensor| {
        if step.grads.contains_key(&name) {
            for _ in 0..cfg.per_tensor.min(t.len()) {
                picks.push((name.clone(), rng.random_range(0..t.len())));
            }
        }
    });
    let mut entries = Vec::with_capacity(picks.len());
    for (name, index) in picks {
        let eval = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            p.visit_mut(&mut |n, t| {
                if n == name {
                    t.data_mut()[index] += delta;
                }
            });
            Ok(loss_value(&p, inputs, targets, loss_cfg, Mode::Train)?.total)
        };
        let numeric = (eval(cfg.eps)? - eval(-cfg.eps)?) / (2.0 * cfg.eps);
        let analytic = step.grads[&name].data()[index];
        let rel_err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.denom_floor);
        entries.push(GradCheckEntry { group: param_group(&name), name, index, analytic, numeric, rel_err });
    }
    Ok(GradCheckReport { entries })
}
