//! Dense tensors, a reverse-mode autodiff tape, and the optimizers and
//! schedules shared by task-network training and model pre-training.

mod dense;
mod graph;
mod optim;
mod scalar;

pub(crate) use dense::matmul_into;
pub use dense::{matmul, Tensor};
pub(crate) use graph::selu;
pub use graph::{Gradients, Graph, Var};
pub use optim::{clip_grad_norm, ema_update, lr_at, AdamW, Optimizer, OptimizerKind, SgdMomentum};
pub use scalar::Scalar;
