//! Learnable parameters and batch-norm state of the detector.
//!
//! Every trainable tensor has a stable dotted name (for example
//! `encoder.stem_bn.AP.gamma`); gradients and optimizer state are keyed by it.

use hpvd_core::Phase;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub enc_channels: usize,
    pub trunk_channels: [usize; 2],
    pub fpn_channels: usize,
    pub head_channels: usize,
    pub kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub center_bias_init: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            enc_channels: 8,
            trunk_channels: [16, 16],
            fpn_channels: 16,
            head_channels: 8,
            kernel: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            center_bias_init: -2.19,
        }
    }
}

impl ArchConfig {
    /// In-plane downsampling factor between input and head outputs.
    pub const OUTPUT_STRIDE: usize = 4;

    pub fn validate(&self) -> Result<()> {
        let widths = [self.enc_channels, self.trunk_channels[0], self.trunk_channels[1], self.fpn_channels, self.head_channels];
        if widths.iter().any(|c| *c == 0 || *c > 256) {
            return Err(NetError::Config("channel counts must be in 1..=256".into()));
        }
        if self.kernel.is_multiple_of(2) || self.kernel > 7 {
            return Err(NetError::Config(format!("kernel {} must be odd and at most 7", self.kernel)));
        }
        if !(self.bn_eps > 0.0) || !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(NetError::Config("bn_eps must be > 0 and bn_momentum in (0, 1]".into()));
        }
        if !self.center_bias_init.is_finite() {
            return Err(NetError::Config("center_bias_init must be finite".into()));
        }
        Ok(())
    }
}

/// Output layers of both heads start near zero so the initial prediction is
/// the prior set by the biases.
const HEAD_OUT_INIT_SCALE: f64 = 0.01;

/// Splits output channels over the axial, coronal and sagittal groups; the
/// remainder goes to the axial group.
pub fn acs_split(out_channels: usize) -> [usize; 3] {
    let b = out_channels / 3;
    [b + out_channels % 3, b, b]
}

/// ACS convolution: a 2D kernel applied in each anatomical plane, realised as
/// 3D kernels that are flat along one axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcsConv {
    pub axial: Option<Tensor>,
    pub coronal: Option<Tensor>,
    pub sagittal: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub stride: usize,
}

fn he_uniform(shape: [usize; 5], rng: &mut ChaCha8Rng) -> Tensor {
    let fan_in = shape[1] * shape[2] * shape[3] * shape[4];
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..bound)).collect())
        .expect("shape matches length")
}

impl AcsConv {
    pub fn new(cin: usize, cout: usize, k: usize, stride: usize, bias: bool, rng: &mut ChaCha8Rng) -> AcsConv {
        let [ca, cc, cs] = acs_split(cout);
        let mut group = |c: usize, shape: [usize; 3]| {
            (c > 0).then(|| he_uniform([c, cin, shape[0], shape[1], shape[2]], rng))
        };
        let axial = group(ca, [1, k, k]);
        let coronal = group(cc, [k, 1, k]);
        let sagittal = group(cs, [k, k, 1]);
        AcsConv { axial, coronal, sagittal, bias: bias.then(|| Tensor::zeros(&[cout])), stride }
    }

    fn scale_weights(&mut self, f: f64) {
        for w in [&mut self.axial, &mut self.coronal, &mut self.sagittal].into_iter().flatten() {
            w.data_mut().iter_mut().for_each(|v| *v *= f);
        }
    }

    pub fn groups(&self) -> [(&'static str, Option<&Tensor>); 3] {
        [("axial", self.axial.as_ref()), ("coronal", self.coronal.as_ref()), ("sagittal", self.sagittal.as_ref())]
    }

    pub fn out_channels(&self) -> usize {
        self.groups().iter().filter_map(|(_, w)| w.map(|w| w.shape()[0])).sum()
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (n, w) in self.groups() {
            if let Some(w) = w {
                f(format!("{prefix}.{n}"), w);
            }
        }
        if let Some(b) = &self.bias {
            f(format!("{prefix}.bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (n, w) in [("axial", &mut self.axial), ("coronal", &mut self.coronal), ("sagittal", &mut self.sagittal), ("bias", &mut self.bias)] {
            if let Some(w) = w {
                f(format!("{prefix}.{n}"), w);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Number of running-statistic updates applied so far.
    pub tracked: u64,
}

impl BatchNorm {
    pub fn new(c: usize) -> BatchNorm {
        BatchNorm {
            gamma: Tensor::filled(&[c], 1.0),
            beta: Tensor::zeros(&[c]),
            running_mean: vec![0.0; c],
            running_var: vec![1.0; c],
            tracked: 0,
        }
    }

    pub fn update_running(&mut self, mean: &[f64], var: &[f64], momentum: f64) {
        for (r, m) in self.running_mean.iter_mut().zip(mean) {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(var) {
            *r = (1.0 - momentum) * *r + momentum * v;
        }
        self.tracked += 1;
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }
}

/// One batch-norm per phase, indexed by `Phase::index()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseBatchNorm {
    pub slots: [BatchNorm; 4],
}

impl PhaseBatchNorm {
    pub fn new(c: usize) -> PhaseBatchNorm {
        PhaseBatchNorm { slots: std::array::from_fn(|_| BatchNorm::new(c)) }
    }

    pub fn get(&self, p: Phase) -> &BatchNorm {
        &self.slots[p.index()]
    }

    pub fn get_mut(&mut self, p: Phase) -> &mut BatchNorm {
        &mut self.slots[p.index()]
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for p in Phase::ALL {
            self.get(p).visit(&format!("{prefix}.{p}"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        for p in Phase::ALL {
            self.get_mut(p).visit_mut(&format!("{prefix}.{p}"), f);
        }
    }
}

/// Phase encoder: convolutions shared across phases, batch-norm per phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub stem: AcsConv,
    pub stem_bn: PhaseBatchNorm,
    pub block: AcsConv,
    pub block_bn: PhaseBatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub mean_conv: AcsConv,
    pub var_conv: AcsConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrunkParams {
    pub down1: AcsConv,
    pub bn1: BatchNorm,
    pub down2: AcsConv,
    pub bn2: BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpnParams {
    pub lateral4: AcsConv,
    pub lateral8: AcsConv,
    pub smooth: AcsConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub hidden: AcsConv,
    pub out: AcsConv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub arch: ArchConfig,
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
    pub trunk: TrunkParams,
    pub fpn: FpnParams,
    pub center_head: HeadParams,
    pub size_head: HeadParams,
}

/// Parameter groups used for gradient-check reporting.
pub const PARAM_GROUPS: [&str; 7] = ["encoder", "bn_affine", "fusion.mean", "fusion.var", "trunk", "fpn", "heads"];

/// Group of a parameter name (see [`PARAM_GROUPS`]).
pub fn param_group(name: &str) -> &'static str {
    if name.ends_with(".gamma") || name.ends_with(".beta") {
        "bn_affine"
    } else if name.starts_with("encoder.") {
        "encoder"
    } else if name.starts_with("fusion.mean_conv.") {
        "fusion.mean"
    } else if name.starts_with("fusion.var_conv.") {
        "fusion.var"
    } else if name.starts_with("trunk.") {
        "trunk"
    } else if name.starts_with("fpn.") {
        "fpn"
    } else {
        "heads"
    }
}

impl NetParams {
    pub fn init(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Result<NetParams> {
        arch.validate()?;
        let k = arch.kernel;
        let (e, [t1, t2], f, h) = (arch.enc_channels, arch.trunk_channels, arch.fpn_channels, arch.head_channels);
        let encoder = EncoderParams {
            stem: AcsConv::new(1, e, k, 2, false, rng),
            stem_bn: PhaseBatchNorm::new(e),
            block: AcsConv::new(e, e, k, 1, false, rng),
            block_bn: PhaseBatchNorm::new(e),
        };
        let fusion = FusionParams {
            mean_conv: AcsConv::new(e, e, k, 1, true, rng),
            var_conv: AcsConv::new(e, e, k, 1, true, rng),
        };
        let trunk = TrunkParams {
            down1: AcsConv::new(e, t1, k, 2, false, rng),
            bn1: BatchNorm::new(t1),
            down2: AcsConv::new(t1, t2, k, 2, false, rng),
            bn2: BatchNorm::new(t2),
        };
        let fpn = FpnParams {
            lateral4: AcsConv::new(t1, f, 1, 1, true, rng),
            lateral8: AcsConv::new(t2, f, 1, 1, true, rng),
            smooth: AcsConv::new(f, f, k, 1, true, rng),
        };
        let mut center_head = HeadParams { hidden: AcsConv::new(f, h, k, 1, true, rng), out: AcsConv::new(h, 1, 1, 1, true, rng) };
        center_head.out.scale_weights(HEAD_OUT_INIT_SCALE);
        center_head.out.bias = Some(Tensor::filled(&[1], arch.center_bias_init));
        let mut size_head = HeadParams { hidden: AcsConv::new(f, h, k, 1, true, rng), out: AcsConv::new(h, 3, 1, 1, true, rng) };
        size_head.out.scale_weights(HEAD_OUT_INIT_SCALE);
        Ok(NetParams { arch: arch.clone(), encoder, fusion, trunk, fpn, center_head, size_head })
    }

    /// Visits every trainable tensor in a fixed order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.encoder.stem.visit("encoder.stem", f);
        self.encoder.stem_bn.visit("encoder.stem_bn", f);
        self.encoder.block.visit("encoder.block", f);
        self.encoder.block_bn.visit("encoder.block_bn", f);
        self.fusion.mean_conv.visit("fusion.mean_conv", f);
        self.fusion.var_conv.visit("fusion.var_conv", f);
        self.trunk.down1.visit("trunk.down1", f);
        self.trunk.bn1.visit("trunk.bn1", f);
        self.trunk.down2.visit("trunk.down2", f);
        self.trunk.bn2.visit("trunk.bn2", f);
        self.fpn.lateral4.visit("fpn.lateral4", f);
        self.fpn.lateral8.visit("fpn.lateral8", f);
        self.fpn.smooth.visit("fpn.smooth", f);
        self.center_head.hidden.visit("center_head.hidden", f);
        self.center_head.out.visit("center_head.out", f);
        self.size_head.hidden.visit("size_head.hidden", f);
        self.size_head.out.visit("size_head.out", f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.encoder.stem.visit_mut("encoder.stem", f);
        self.encoder.stem_bn.visit_mut("encoder.stem_bn", f);
        self.encoder.block.visit_mut("encoder.block", f);
        self.encoder.block_bn.visit_mut("encoder.block_bn", f);
        self.fusion.mean_conv.visit_mut("fusion.mean_conv", f);
        self.fusion.var_conv.visit_mut("fusion.var_conv", f);
        self.trunk.down1.visit_mut("trunk.down1", f);
        self.trunk.bn1.visit_mut("trunk.bn1", f);
        self.trunk.down2.visit_mut("trunk.down2", f);
        self.trunk.bn2.visit_mut("trunk.bn2", f);
        self.fpn.lateral4.visit_mut("fpn.lateral4", f);
        self.fpn.lateral8.visit_mut("fpn.lateral8", f);
        self.fpn.smooth.visit_mut("fpn.smooth", f);
        self.center_head.hidden.visit_mut("center_head.hidden", f);
        self.center_head.out.visit_mut("center_head.out", f);
        self.size_head.hidden.visit_mut("size_head.hidden", f);
        self.size_head.out.visit_mut("size_head.out", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }

    /// Batch-norm layer by its dotted prefix (as used in parameter names).
    pub fn batch_norm_mut(&mut self, name: &str) -> Option<&mut BatchNorm> {
        for (prefix, pbn) in [("encoder.stem_bn.", &mut self.encoder.stem_bn), ("encoder.block_bn.", &mut self.encoder.block_bn)] {
            if let Some(rest) = name.strip_prefix(prefix) {
                return rest.parse::<Phase>().ok().map(|p| pbn.get_mut(p));
            }
        }
        match name {
            "trunk.bn1" => Some(&mut self.trunk.bn1),
            "trunk.bn2" => Some(&mut self.trunk.bn2),
            _ => None,
        }
    }

    /// All batch-norm layers with their dotted prefix.
    pub fn batch_norms(&self) -> Vec<(String, &BatchNorm)> {
        let mut out = Vec::new();
        for (prefix, pbn) in [("encoder.stem_bn", &self.encoder.stem_bn), ("encoder.block_bn", &self.encoder.block_bn)] {
            for p in Phase::ALL {
                out.push((format!("{prefix}.{p}"), pbn.get(p)));
            }
        }
        out.push(("trunk.bn1".into(), &self.trunk.bn1));
        out.push(("trunk.bn2".into(), &self.trunk.bn2));
        out
    }
}
