//! Dense `f64` tensors with reverse-mode differentiation over a fixed operator set.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE};
pub use tape::{gelu_scalar, set_parallelism, Gradients, Tape, Var};
pub use tensor::Tensor;

pub use tape::matmul_raw;
