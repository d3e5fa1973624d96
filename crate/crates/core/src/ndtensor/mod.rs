//! Dense tensors, a reverse-mode tape, and finite-difference verification.

mod gradcheck;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error, GradCheckReport, ParamCheck, DEFAULT_STEP};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Binary, Elementwise, Gradients, KinkPattern, Tape, Unary, Var};
pub use tensor::{ReduceKind, Tensor};

pub(crate) use tape::sigmoid;
