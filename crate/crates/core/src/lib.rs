pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod masking;
pub mod nets;
pub mod optim;
pub mod pretrain;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
