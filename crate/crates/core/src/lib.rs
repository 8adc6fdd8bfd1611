//! Contrastive-generative 3D scene captioning with an inference-time
//! best-of-N search over captions scored by a pluggable judge.
//!
//! Pipeline: [`pointcloud`] tokenizes raw scenes into patches, the
//! [`scene_encoder`] and [`text_encoder`] produce global embeddings,
//! [`alignment`] projects both into a shared space for the contrastive loss,
//! and [`decoder`] generates captions from the scene token grid. The
//! [`trainer`] optimizes the joint objective; [`tts`] reranks sampled
//! captions at inference; [`metrics`] scores them.

pub mod alignment;
pub mod bench;
pub mod decoder;
pub mod metrics;
pub mod model;
pub mod pointcloud;
pub mod scene_encoder;
pub mod text;
pub mod text_encoder;
pub mod toy;
pub mod trainer;
pub mod tts;

pub use scenecap_tensor as tensor;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossComponent {
    Con,
    Cap,
}

impl std::fmt::Display for LossComponent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossComponent::Con => "contrastive",
            LossComponent::Cap => "captioning",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("degenerate embedding: {0}")]
    Degenerate(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("training aborted at step {step}: non-finite {component} loss")]
    NonFinite { step: u64, component: LossComponent },
    #[error("judge protocol error: {0}")]
    Protocol(String),
    #[error("judge unavailable: {0}")]
    Judge(String),
    #[error(transparent)]
    PointCloud(#[from] pointcloud::PointCloudError),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error(transparent)]
    Checkpoint(#[from] tensor::CheckpointError),
    #[error(transparent)]
    Optimizer(#[from] tensor::OptimizerError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
