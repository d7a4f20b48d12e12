//! Link-output graph attention network for task offloading and resource
//! allocation in mobile edge computing, trained without labels by
//! differentiating the total task delay.

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod graph;
pub mod harness;
pub mod lognn;
pub mod mec;
pub mod nn;
pub mod objective;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
