//! Data model, geometry, post-processing, evaluation statistics and phantom
//! generation for hetero-phase liver lesion detection on multi-phase CT.

// `!(x >= 0.0)` guards deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod phase;
pub mod postprocess;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{Box2, Box3, Detection, DetectionKind, LesionKind};
pub use phase::{Phase, PhaseSet};
pub use volume::{LesionAnnotation, Mask, PhaseStats, Study, Volume};
