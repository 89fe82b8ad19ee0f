//! Dense tensors with reverse-mode differentiation, plus the optimizer and
//! checkpoint format used for training.

mod checkpoint;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::{lr_at, sgd_step, OptimizerState};
pub use params::{GradStore, ParamId, ParamStore};
pub use tape::{Padding, Tape, Var};
pub use tensor::Tensor;

pub use tape::cosine;
