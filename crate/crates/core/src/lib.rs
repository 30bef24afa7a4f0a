//! Distributed DLRM training on CPUs: blocked MLP kernels, sharded embedding
//! tables, split-BF16 SGD, rank collectives and a benchmark harness.

pub mod comms;
pub mod costmodel;
pub mod embedding;
pub mod error;
pub mod harness;
pub mod mlp;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
