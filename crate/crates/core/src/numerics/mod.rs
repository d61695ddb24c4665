//! Dense linear-algebra primitives with paired forward/backward evaluation,
//! and the finite-difference oracle that audits them.

mod gradcheck;
mod matrix;
pub mod ops;
mod tape;

pub use gradcheck::{grad_check, GradCheckConfig, GradReport, ParamCheck};
pub use matrix::Matrix;
pub use ops::{gelu, layer_norm, matmul, matmul_transb, softmax_rows, MASKED_LOGIT};
pub use tape::{Gradients, Tape, VarId, LN_CLAMP_FLOOR};
