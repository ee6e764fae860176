//! Class-aware sounding object localization.
//!
//! Stage one learns where sound comes from in single-source clips and builds
//! an object dictionary from the localized regions; stage two uses that
//! dictionary to produce per-category maps in multi-source scenes, masks out
//! silent objects, and aligns the visual category distribution with the
//! audio one.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod archive;
pub mod audio;
pub mod data;
pub mod dictionary;
pub mod error;
pub mod eval;
pub mod math;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod stage1;
pub mod stage2;

pub use error::{Error, Result};
pub use audio::{AudioClip, LogMelSpectrogram, MelConfig};
pub use data::{ClipRecord, LoadedClip, ToyConfig};
pub use dictionary::{CategoryAssignment, ObjectDictionary};
pub use eval::{EvalOptions, Report};
pub use metrics::{BoundingBox, EvalRecord};
pub use model::{Model, ModelConfig};
pub use pipeline::RunConfig;
pub use stage1::Stage1Config;
pub use stage2::{Stage2Config, Stage2Flags};
