//! Flexible multi-head linear attention (FMLA) for univariate time-series
//! classification.
//!
//! The network runs two streams side by side. A deformable-convolution
//! (DCN) column extracts local features from the raw series; each of its
//! blocks generates the length-compression maps used by the paired
//! collaborative linear attention (CLA) block, so attention costs `O(C·n·d)`
//! instead of `O(n²·d)`. Position masks regularize the attention heads,
//! and two distillation terms tie the model together: an ensemble of
//! random-mask passes teaches the regular-mask pass, and the DCN head
//! teaches the attention head.
//!
//! Everything is built on a small reverse-mode autodiff engine in
//! [`tensor`].

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod complexity;
pub mod data;
pub mod deform;
pub mod error;
pub mod losses;
pub mod mask;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{CheckpointError, Error, Result};
pub use model::{BranchOutputs, FmlaModel, ModelConfig};
pub use tensor::{Graph, Tensor, Var};
