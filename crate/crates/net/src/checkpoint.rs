//! JSON checkpoints: architecture, optional training config, intensity
//! statistics, named tensors and batch-norm running state.

use std::collections::BTreeMap;
use std::path::Path;

use hpvd_core::PhaseStats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NetError, Result};
use crate::params::{ArchConfig, NetParams};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const FORMAT: &str = "hpvd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub tracked: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config_hash: String,
    arch: ArchConfig,
    train_config: Option<TrainConfig>,
    phase_stats: PhaseStats,
    tensors: BTreeMap<String, Tensor>,
    batch_norm: BTreeMap<String, BnState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: NetParams,
    pub phase_stats: PhaseStats,
    pub train_config: Option<TrainConfig>,
}

/// SHA-256 over the canonical JSON of the architecture and training config.
pub fn config_hash(arch: &ArchConfig, train: Option<&TrainConfig>) -> String {
    let bytes = serde_json::to_vec(&(arch, train)).expect("in-memory JSON serialization");
    hex::encode(Sha256::digest(&bytes))
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let mut tensors = BTreeMap::new();
        self.params.visit(&mut |n, t| {
            tensors.insert(n, t.clone());
        });
        let batch_norm = self
            .params
            .batch_norms()
            .into_iter()
            .map(|(n, bn)| {
                (n, BnState { running_mean: bn.running_mean.clone(), running_var: bn.running_var.clone(), tracked: bn.tracked })
            })
            .collect();
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            config_hash: config_hash(&self.params.arch, self.train_config.as_ref()),
            arch: self.params.arch.clone(),
            train_config: self.train_config.clone(),
            phase_stats: self.phase_stats.clone(),
            tensors,
            batch_norm,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("in-memory JSON serialization");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())
            .map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| NetError::Checkpoint(format!("{}: {e}", path.display())))?;
        parse_checkpoint(&bytes)
    }
}

fn bad(msg: impl Into<String>) -> NetError {
    NetError::Checkpoint(msg.into())
}

/// Parses and fully validates a checkpoint.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let file: CheckpointFile = serde_json::from_slice(bytes).map_err(|e| bad(e.to_string()))?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(bad(format!("unsupported format {} v{}", file.format, file.version)));
    }
    file.arch.validate()?;
    PhaseStats::new(file.phase_stats.entries().clone())?;
    if let Some(tc) = &file.train_config {
        tc.validate()?;
        if tc.arch != file.arch {
            return Err(bad("training config architecture differs from checkpoint architecture"));
        }
    }
    if config_hash(&file.arch, file.train_config.as_ref()) != file.config_hash {
        return Err(bad("config hash mismatch"));
    }
    let mut params = NetParams::init(&file.arch, &mut ChaCha8Rng::seed_from_u64(0))?;
    let expected = params.names();
    if expected.len() != file.tensors.len() || expected.iter().any(|n| !file.tensors.contains_key(n)) {
        return Err(bad("tensor set does not match the architecture"));
    }
    let mut err = None;
    params.visit_mut(&mut |name, t| {
        let src = &file.tensors[&name];
        if src.shape() != t.shape() {
            err.get_or_insert_with(|| bad(format!("{name}: shape {:?}, expected {:?}", src.shape(), t.shape())));
        } else if !src.all_finite() {
            err.get_or_insert_with(|| bad(format!("{name}: non-finite value")));
        } else {
            *t = src.clone();
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let layers: Vec<String> = params.batch_norms().into_iter().map(|(n, _)| n).collect();
    if layers.len() != file.batch_norm.len() {
        return Err(bad("batch-norm set does not match the architecture"));
    }
    for layer in layers {
        let st = file.batch_norm.get(&layer).ok_or_else(|| bad(format!("missing batch-norm {layer}")))?;
        let bn = params.batch_norm_mut(&layer).expect("layer listed by batch_norms");
        let c = bn.gamma.len();
        let finite = st.running_mean.iter().chain(&st.running_var).all(|v| v.is_finite());
        if st.running_mean.len() != c || st.running_var.len() != c || !finite || st.running_var.iter().any(|v| *v < 0.0) {
            return Err(bad(format!("{layer}: invalid running statistics")));
        }
        bn.running_mean = st.running_mean.clone();
        bn.running_var = st.running_var.clone();
        bn.tracked = st.tracked;
    }
    Ok(Checkpoint { params, phase_stats: file.phase_stats, train_config: file.train_config })
}
