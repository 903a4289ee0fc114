//! Minimal dense-tensor math for the cross-lingual VQA testbed.
//!
//! Everything is 64-bit and single-threaded. A [`Graph`] records the forward
//! pass of one mini-batch and replays it in reverse to produce one gradient
//! per registered parameter.

pub mod archive;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod ops;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use archive::TensorArchive;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use optim::{clip_global_norm, global_norm, AdamW, AdamWConfig};
pub use params::ParamSet;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("function is not deterministic: two evaluations at the same point gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },
    #[error("archive: {0}")]
    Archive(String),
}

pub type Result<T> = std::result::Result<T, NnError>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> NnError {
    NnError::Shape { op, detail: detail.into() }
}
