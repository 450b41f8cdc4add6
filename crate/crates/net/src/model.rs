//! Network forward pass: per-phase encoding, set fusion, trunk, feature
//! pyramid and CenterNet heads.

use std::collections::BTreeMap;

use hpvd_core::Phase;

use crate::error::{NetError, Result};
use crate::graph::{BatchStats, Gradients, Graph, Var};
use crate::params::{AcsConv, BatchNorm, NetParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running-statistic updates are reported, not applied.
    Train,
    /// Running statistics; the pass has no side effects.
    Eval,
}

/// Input volumes keyed by phase, each `[N, 1, D, H, W]`.
pub type PhaseInputs = BTreeMap<Phase, Tensor>;

/// Batch statistics observed by one batch-norm layer during a training pass.
#[derive(Debug, Clone, PartialEq)]
pub struct BnUpdate {
    pub layer: String,
    pub stats: BatchStats,
}

/// Head outputs: center probabilities `[N, 1, D, H', W']` and log box
/// extents `[N, 3, D, H', W']` (x, y, z order).
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    pub heatmap: Tensor,
    pub size: Tensor,
}

impl HeadOutputs {
    pub fn batch_len(&self) -> usize {
        self.heatmap.shape()[0]
    }

    /// Outputs of one batch member.
    pub fn sample(&self, n: usize) -> Result<HeadOutputs> {
        Ok(HeadOutputs { heatmap: self.heatmap.slice_axis(0, n, n + 1)?, size: self.size.slice_axis(0, n, n + 1)? })
    }
}

fn bind(g: &mut Graph, bound: &mut BTreeMap<String, Var>, name: String, t: &Tensor) -> Var {
    *bound.entry(name).or_insert_with(|| g.leaf(t.clone()))
}

/// ACS convolution on the tape; `param` maps a tensor part name (`axial`,
/// `coronal`, `sagittal`, `bias`) to its node.
fn acs_graph(g: &mut Graph, conv: &AcsConv, x: Var, mut param: impl FnMut(&mut Graph, &str, &Tensor) -> Var) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    for (group, w) in conv.groups() {
        if let Some(w) = w {
            let wv = param(g, group, w);
            parts.push(g.conv(x, wv, conv.stride)?);
        }
    }
    let mut y = g.concat(&parts)?;
    if let Some(b) = &conv.bias {
        let bv = param(g, "bias", b);
        y = g.add_bias(y, bv)?;
    }
    Ok(y)
}

pub(crate) struct Builder<'p> {
    pub g: Graph,
    params: &'p NetParams,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    pub updates: Vec<BnUpdate>,
}

impl<'p> Builder<'p> {
    pub fn new(params: &'p NetParams, mode: Mode) -> Builder<'p> {
        Builder { g: Graph::new(), params, bound: BTreeMap::new(), mode, updates: Vec::new() }
    }

    fn param(&mut self, name: String, t: &Tensor) -> Var {
        bind(&mut self.g, &mut self.bound, name, t)
    }

    fn acs(&mut self, name: &str, conv: &AcsConv, x: Var) -> Result<Var> {
        let bound = &mut self.bound;
        acs_graph(&mut self.g, conv, x, |g, part, t| bind(g, bound, format!("{name}.{part}"), t))
    }

    fn bn(&mut self, name: &str, bn: &BatchNorm, x: Var) -> Result<Var> {
        let gamma = self.param(format!("{name}.gamma"), &bn.gamma);
        let beta = self.param(format!("{name}.beta"), &bn.beta);
        let eps = self.params.arch.bn_eps;
        match self.mode {
            Mode::Train => {
                let (y, stats) = self.g.batch_norm_train(x, gamma, beta, eps)?;
                self.updates.push(BnUpdate { layer: name.to_string(), stats });
                Ok(y)
            }
            Mode::Eval => {
                if bn.tracked == 0 {
                    return Err(NetError::UninitializedStats(name.to_string()));
                }
                self.g.batch_norm_eval(x, gamma, beta, &bn.running_mean, &bn.running_var, eps)
            }
        }
    }

    fn conv_bn_relu(&mut self, conv_name: &str, conv: &AcsConv, bn_name: &str, bn: &BatchNorm, x: Var) -> Result<Var> {
        let y = self.acs(conv_name, conv, x)?;
        let y = self.bn(bn_name, bn, y)?;
        Ok(self.g.relu(y))
    }

    pub fn encode(&mut self, x: Var, phase: Phase) -> Result<Var> {
        let enc = &self.params.encoder;
        let h = self.conv_bn_relu("encoder.stem", &enc.stem, &format!("encoder.stem_bn.{phase}"), enc.stem_bn.get(phase), x)?;
        self.conv_bn_relu("encoder.block", &enc.block, &format!("encoder.block_bn.{phase}"), enc.block_bn.get(phase), h)
    }

    pub fn fuse(&mut self, feats: &[Var]) -> Result<Var> {
        let f = &self.params.fusion;
        let mean = self.g.set_mean(feats)?;
        let var = self.g.set_var(feats)?;
        let a = self.acs("fusion.mean_conv", &f.mean_conv, mean)?;
        let b = self.acs("fusion.var_conv", &f.var_conv, var)?;
        self.g.add(a, b)
    }

    /// Trunk, pyramid and heads; returns (center logits, log extents).
    pub fn decode(&mut self, a: Var) -> Result<(Var, Var)> {
        let p = self.params;
        let c4 = self.conv_bn_relu("trunk.down1", &p.trunk.down1, "trunk.bn1", &p.trunk.bn1, a)?;
        let c8 = self.conv_bn_relu("trunk.down2", &p.trunk.down2, "trunk.bn2", &p.trunk.bn2, c4)?;
        let l8 = self.acs("fpn.lateral8", &p.fpn.lateral8, c8)?;
        let l4 = self.acs("fpn.lateral4", &p.fpn.lateral4, c4)?;
        let d4 = self.g.value(l4).dims5()?;
        let up = self.g.upsample_to(l8, d4[3], d4[4])?;
        let merged = self.g.add(l4, up)?;
        let f = self.acs("fpn.smooth", &p.fpn.smooth, merged)?;
        let f = self.g.relu(f);
        let hc = self.acs("center_head.hidden", &p.center_head.hidden, f)?;
        let hc = self.g.relu(hc);
        let logits = self.acs("center_head.out", &p.center_head.out, hc)?;
        let hs = self.acs("size_head.hidden", &p.size_head.hidden, f)?;
        let hs = self.g.relu(hs);
        let size = self.acs("size_head.out", &p.size_head.out, hs)?;
        Ok((logits, size))
    }

    pub fn build(&mut self, inputs: &PhaseInputs) -> Result<(Var, Var)> {
        check_inputs(inputs)?;
        let mut feats = Vec::with_capacity(inputs.len());
        for (phase, x) in inputs {
            let xv = self.g.leaf(x.clone());
            feats.push(self.encode(xv, *phase)?);
        }
        let a = self.fuse(&feats)?;
        self.decode(a)
    }

    /// Gradients of every bound parameter, by name.
    pub fn param_grads(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

fn check_inputs(inputs: &PhaseInputs) -> Result<()> {
    let first = inputs.values().next().ok_or(NetError::EmptyPhases)?;
    let d = first.dims5()?;
    if d[1] != 1 || d.contains(&0) {
        return Err(NetError::Shape(format!("phase input must be [N, 1, D, H, W] and nonempty, got {d:?}")));
    }
    if let Some((p, _)) = inputs.iter().find(|(_, t)| t.shape() != first.shape()) {
        return Err(NetError::Shape(format!("phase {p} input shape differs from {d:?}")));
    }
    Ok(())
}

/// Output grid `[D, H, W]` for an input of `[D, H, W]`: two stride-2
/// in-plane stages, depth unchanged.
pub fn output_grid(input: [usize; 3]) -> [usize; 3] {
    [input[0], input[1].div_ceil(2).div_ceil(2), input[2].div_ceil(2).div_ceil(2)]
}

/// Applies one ACS convolution to `[N, C, D, H, W]`.
pub fn acs_conv(x: &Tensor, conv: &AcsConv) -> Result<Tensor> {
    if conv.out_channels() == 0 {
        return Err(NetError::Shape("ACS convolution without output channels".into()));
    }
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = acs_graph(&mut g, conv, xv, |g, _, t| g.leaf(t.clone()))?;
    Ok(g.value(y).clone())
}

/// Encodes one phase volume `[N, 1, D, H, W]` with the shared convolutions
/// and that phase's batch-norm.
pub fn phase_encode(x: &Tensor, phase: Phase, params: &NetParams, mode: Mode) -> Result<Tensor> {
    let mut inputs = PhaseInputs::new();
    inputs.insert(phase, x.clone());
    check_inputs(&inputs)?;
    let mut b = Builder::new(params, mode);
    let xv = b.g.leaf(x.clone());
    let y = b.encode(xv, phase)?;
    Ok(b.g.value(y).clone())
}

/// Fuses a nonempty set of phase features into one feature map.
pub fn fuse(feats: &[Tensor], params: &NetParams) -> Result<Tensor> {
    let mut b = Builder::new(params, Mode::Eval);
    let vs: Vec<Var> = feats.iter().map(|t| b.g.leaf(t.clone())).collect();
    let y = b.fuse(&vs)?;
    Ok(b.g.value(y).clone())
}

/// Runs the network and also returns the batch-norm statistics observed in
/// train mode (empty in eval mode).
pub fn forward_with_updates(params: &NetParams, inputs: &PhaseInputs, mode: Mode) -> Result<(HeadOutputs, Vec<BnUpdate>)> {
    let mut b = Builder::new(params, mode);
    let (logits, size) = b.build(inputs)?;
    let heatmap = crate::graph::sigmoid_tensor(b.g.value(logits));
    let size = b.g.value(size).clone();
    Ok((HeadOutputs { heatmap, size }, b.updates))
}

pub fn forward(params: &NetParams, inputs: &PhaseInputs, mode: Mode) -> Result<HeadOutputs> {
    forward_with_updates(params, inputs, mode).map(|(o, _)| o)
}

/// Folds observed batch statistics into the running averages.
pub fn apply_bn_updates(params: &mut NetParams, updates: &[BnUpdate]) -> Result<()> {
    let momentum = params.arch.bn_momentum;
    for u in updates {
        let bn = params
            .batch_norm_mut(&u.layer)
            .ok_or_else(|| NetError::Shape(format!("unknown batch-norm layer {}", u.layer)))?;
        bn.update_running(&u.stats.mean, &u.stats.var, momentum);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ArchConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> NetParams {
        NetParams::init(&ArchConfig::default(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    fn input(n: usize, d: usize, h: usize, w: usize, seed: f64) -> Tensor {
        let len = n * d * h * w;
        Tensor::new(vec![n, 1, d, h, w], (0..len).map(|i| (i as f64 * 0.37 + seed).sin()).collect()).unwrap()
    }

    #[test]
    fn output_shapes_follow_stride() {
        let p = params();
        let mut inputs = PhaseInputs::new();
        inputs.insert(Phase::VP, input(2, 5, 17, 12, 0.3));
        let (out, updates) = forward_with_updates(&p, &inputs, Mode::Train).unwrap();
        assert_eq!(out.heatmap.shape(), &[2, 1, 5, 5, 3]);
        assert_eq!(out.size.shape(), &[2, 3, 5, 5, 3]);
        assert!(out.heatmap.data().iter().all(|v| *v > 0.0 && *v < 1.0));
        assert_eq!(updates.len(), 4);
        assert!(updates.iter().any(|u| u.layer == "encoder.stem_bn.VP"));
    }

    #[test]
    fn eval_needs_running_stats() {
        let p = params();
        let mut inputs = PhaseInputs::new();
        inputs.insert(Phase::NC, input(1, 3, 8, 8, 0.1));
        match forward(&p, &inputs, Mode::Eval) {
            Err(NetError::UninitializedStats(name)) => assert!(name.contains("NC")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn every_phase_subset_runs() {
        let mut p = params();
        for bn in p.batch_norms().into_iter().map(|(n, _)| n).collect::<Vec<_>>() {
            p.batch_norm_mut(&bn).unwrap().tracked = 1;
        }
        for set in hpvd_core::PhaseSet::all_nonempty() {
            let inputs: PhaseInputs = set.iter().map(|ph| (ph, input(1, 3, 8, 8, ph.index() as f64))).collect();
            let out = forward(&p, &inputs, Mode::Eval).unwrap();
            assert!(out.heatmap.all_finite() && out.size.all_finite(), "{set}");
        }
        assert!(matches!(forward(&p, &PhaseInputs::new(), Mode::Eval), Err(NetError::EmptyPhases)));
    }

    #[test]
    fn fusion_is_permutation_invariant() {
        let p = params();
        let feats: Vec<Tensor> = (0..4)
            .map(|k| Tensor::new(vec![1, 8, 2, 2, 2], (0..64).map(|i| ((i * (k + 3)) as f64 * 0.77).sin() * 8.0).collect()).unwrap())
            .collect();
        let base = fuse(&feats, &p).unwrap();
        for perm in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]] {
            let shuffled: Vec<Tensor> = perm.iter().map(|i| feats[*i].clone()).collect();
            assert_eq!(fuse(&shuffled, &p).unwrap(), base);
        }
    }

    #[test]
    fn mismatched_phase_shapes_rejected() {
        let p = params();
        let mut inputs = PhaseInputs::new();
        inputs.insert(Phase::NC, input(1, 3, 8, 8, 0.1));
        inputs.insert(Phase::AP, input(1, 3, 8, 9, 0.1));
        assert!(matches!(forward(&p, &inputs, Mode::Train), Err(NetError::Shape(_))));
    }

    #[test]
    fn bn_updates_only_touch_present_phases() {
        let mut p = params();
        let mut inputs = PhaseInputs::new();
        inputs.insert(Phase::AP, input(1, 3, 8, 8, 0.2));
        let (_, updates) = forward_with_updates(&p, &inputs, Mode::Train).unwrap();
        apply_bn_updates(&mut p, &updates).unwrap();
        assert_eq!(p.encoder.stem_bn.get(Phase::AP).tracked, 1);
        assert_eq!(p.encoder.stem_bn.get(Phase::NC).tracked, 0);
        assert_eq!(p.encoder.stem_bn.get(Phase::NC).running_var, vec![1.0; 8]);
        assert_eq!(p.trunk.bn2.tracked, 1);
    }
}
