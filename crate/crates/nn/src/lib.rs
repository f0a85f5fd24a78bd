//! A small tape-based reverse-mode engine over dense `f32`/`f64` arrays:
//! causal 2-D convolutions and their transposes, sigmoid gating, per-channel
//! normalization, PReLU, softplus, masked L1 losses, Adam, finite-difference
//! gradient checking and a binary checkpoint container.

mod adam;
mod checkpoint;
pub mod conv;
mod error;
mod gradcheck;
mod graph;
pub mod norm;
mod param;
mod scalar;
mod tensor;

pub use adam::Adam;
pub use checkpoint::{Checkpoint, NamedArray, ADAM_PREFIX, FORMAT_VERSION, MAGIC};
pub use conv::ConvSpec;
pub use error::{NnError, Result};
pub use gradcheck::{grad_check, grad_check_report, GradCheckConfig, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use norm::NormScope;
pub use param::{Bindings, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;
