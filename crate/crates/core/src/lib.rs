//! Desk-scale testbed for cross-lingual visual question answering.
//!
//! The crate generates seeded synthetic scenes and multilingual questions,
//! trains a small single-stream multimodal transformer on them with several
//! fine-tuning strategies, and runs unimodal ablation protocols to measure how
//! much of the accuracy comes from each modality.

pub mod diagnostics;
pub mod model;
pub mod runner;
pub mod synthdata;
pub mod training;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Nn(#[from] xvqa_nn::NnError),
    #[error("data generation: {0}")]
    Generation(String),
    #[error("answer oracle: {0}")]
    Oracle(String),
    #[error("rendering: {0}")]
    Render(String),
    #[error("model input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training: {0}")]
    Training(String),
    #[error("evaluation: {0}")]
    Evaluation(String),
    #[error("missing upstream artifact: {0}")]
    MissingArtifact(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn io_err(context: impl std::fmt::Display) -> impl FnOnce(std::io::Error) -> CoreError {
    let context = context.to_string();
    move |source| CoreError::Io { context, source }
}
