//! Text-conditioned logit fusion for volumetric multi-organ segmentation.
//!
//! A frozen visual model supplies per-class logits; a prompt is parsed into
//! organ presence and spatial relations, embedded, mapped to a per-class bias,
//! and combined with a relation prior in logit space. A small residual head can
//! refine the fused scores.

pub mod checkpoint;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod grid;
pub mod io;
pub mod kv;
pub mod loss;
pub mod metrics;
pub mod optim;
pub mod palette;
pub mod phantom;
pub mod pipeline;
pub mod prior;
pub mod prompt;
pub mod refine;
pub mod window;

pub use error::{Error, Result};
pub use grid::{Axis, BinaryMask, Dims, LabelMap, LogitTensor, Spacing, Volume, DEFAULT_CLASSES};
