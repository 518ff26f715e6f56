//! Dense tensors, a reverse-mode differentiation tape, parameter storage
//! with checkpointing, and an SGD optimizer with step decay.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod param;
mod scalar;
mod sgd;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{GradCheck, GradCheckReport};
pub use param::{uniform_fan_in, Gradients, ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use sgd::{sgd_step, SgdConfig};
pub use tape::{Axis, Tape, Var, DISTANCE_EPS};
pub use tensor::Tensor;
