//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! Only the primitives the denoisers need are provided: 2D/3D convolution
//! (any odd kernel, stride 1 or 2), nearest x2 upsampling, linear layers,
//! SiLU, group normalization, per-sample scale/shift, multi-head attention,
//! channel concat/narrow and a handful of elementwise reductions.
//!
//! Attention materializes the full `tokens x tokens` probability matrix.
//! Fused kernels that avoid this compute the same function, so nothing here
//! depends on which formulation is used.

mod checkpoint;
mod gemm;
mod gradcheck;
mod graph;
mod kernels;
mod tensor;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, CoordCheck, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, Var, GROUP_NORM_EPS};
pub use tensor::{Gradients, ParameterStore, Tensor};
