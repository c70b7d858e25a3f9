//! Minimal reverse-mode differentiable tensor engine and the AdamW optimizer.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, finite_diff_check_many, finite_diff_check_params};
pub use graph::{sigmoid, Elementwise, Gradients, Graph, Var};
pub use optim::{AdamWConfig, OptimizerState};
pub use params::ParamStore;
pub use tensor::Tensor;
