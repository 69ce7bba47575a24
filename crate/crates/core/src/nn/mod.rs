//! Dense tensors, a recording autodiff tape, and AdamW.

mod graph;
mod optim;
mod param;
mod tensor;

pub use graph::{Graph, NodeId};
pub use optim::{lr_at, OptimizerState, ScheduleConfig, BETA1, BETA2, EPS};
pub use param::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{log_sum_exp, softmax, Tensor};
