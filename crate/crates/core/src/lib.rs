//! A small reverse-mode autodiff engine and an age estimator built on it:
//! a ranking loss over fixed age thresholds, a multi-scale attentional
//! residual backbone, and demographic attribute guidance.

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod head;
mod kernels;
pub mod layers;
pub mod marcu;
pub mod model;
pub mod optim;
pub mod ranking;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Eltwise, Graph, Var};
pub use kernels::window_out;
pub use tensor::Tensor;
