//! CPU neural networks for vehicle make-model recognition.
//!
//! Layers are NCHW `f32` with explicit backward passes; matrix products go
//! through `matrixmultiply`. On top of them sit the residual classifier,
//! a compact single-shot detector and their training loops.

pub mod checkpoint;
pub mod layers;
pub mod param;
pub mod resnet;
pub mod ssd;
pub mod tensor;
pub mod train;

pub use param::{Adam, AdamConfig, Module, Param};
pub use resnet::{build_network, ClassifierNetwork, ClassifierSpec, ConvBlock, IdentityBlock, StagePlan};
pub use tensor::Tensor;
pub use train::{fit, EpochMetrics, LabeledImage, TrainConfig, TrainReport};

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid network or training spec: {0}")]
    Spec(String),
    #[error("{0} data is empty")]
    EmptyData(&'static str),
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
