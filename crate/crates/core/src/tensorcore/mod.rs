//! Dense tensors, tape-based reverse-mode differentiation, AdamW and the
//! cosine learning-rate schedule.

mod optim;
mod param;
mod tape;
mod tensor;

pub use optim::{clip_grad_norm, cosine_lr, AdamW, OptimState};
pub use param::{ParamId, ParamStore};
pub use tape::{gelu, Gradients, Tape, Var};
pub use tensor::Tensor;
