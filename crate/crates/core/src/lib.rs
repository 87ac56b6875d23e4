//! Patchwise contrastive (PatchNCE) losses for paired image prediction.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod oracle;
pub mod params;
pub mod rng;
pub mod sampler;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{DType, Scalar, Tensor};
