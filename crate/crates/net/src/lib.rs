// `!(x >= 0.0)` guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod conv;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod infer;
pub mod loss;
pub mod model;
pub mod params;
pub mod prep;
pub mod tensor;
pub mod train;

pub use decode::{decode, DecodeConfig};
pub use checkpoint::{parse_checkpoint, Checkpoint};
pub use error::{NetError, Result};
pub use infer::{infer_study, InferConfig};
pub use loss::{build_targets, centernet_loss, CenterTargets, LossConfig, LossValue};
pub use model::{forward, fuse, phase_encode, HeadOutputs, Mode, PhaseInputs};
pub use params::{ArchConfig, NetParams};
pub use tensor::Tensor;
pub use train::{train, TrainConfig, TrainOutput};
