//! Convex optical-flow upsampling and its neighborhood-attention
//! generalization (TCU), with a small reverse-mode tensor core, a synthetic
//! flow data generator, a toy trainer, and high-detail EPE evaluation.

pub mod error;
pub mod eval;
pub mod gradcheck_suite;
pub mod hull;
pub mod init;
pub mod io;
pub mod na;
pub mod pipeline;
pub mod synth;
pub mod tcu;
pub mod train;
pub mod tensor;
pub mod upsample;
pub mod util;

pub use error::{FlowError, Result};
pub use tensor::{Elem, PaddingPolicy, Tape, Tensor};

/// Per-pixel (u, v) displacement field, shape [2, H, W], pixels/frame.
/// Flow values are expressed in full-resolution pixel units at every scale.
pub type FlowField = Tensor<f32>;
