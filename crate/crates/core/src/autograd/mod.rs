//! Dense `f64` tensors, a dynamic reverse-mode tape and the AdamW optimizer.

mod graph;
pub mod init;
mod store;
mod tensor;

pub use graph::{sigmoid, softplus, Graph, Var};
pub use store::{AdamW, ParamId, ParamStore};
pub use tensor::{argmax, log_sum_exp, Tensor};
