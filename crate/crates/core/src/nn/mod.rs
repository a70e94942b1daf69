//! Dense tensors, a reverse-mode tape, the MLP model and its optimizers.

pub mod checkpoint;
mod model;
mod optim;
mod tape;
pub mod tensor;

pub use model::{classify, forward_features, softmax, Architecture, BoundModel, Dense, ModelParams};
pub use optim::{adam_step, sgd_step, AdamState, Optimizer, OptimizerKind, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use tape::{backward, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::bce_term;
