//! Dense-tensor arithmetic, reverse-mode autodiff and the AdamW optimizer.

pub mod binding;
pub mod gradcheck;
pub mod optim;
pub mod paramset;
pub mod tape;
pub mod tensor;

pub use binding::Binding;
pub use optim::{adamw_step, AdamWHyper, AdamWState};
pub use paramset::ParamSet;
pub use tape::{ConvGeom, GradStore, Tape, TapeOp, Var};
pub use tensor::{matmul, Tensor};
