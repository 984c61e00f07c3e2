// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod analysis;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod oca;
pub mod prompt;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod useformer;

pub use config::{AblationMode, ModelConfig, OrthoTarget};
pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{no_grad, Tensor};
