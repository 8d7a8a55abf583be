//! Embedding vectors, stores, providers and the similarity kernels the
//! retrieval stages run on.

mod provider;
mod similarity;
mod store;
mod vector;

pub use provider::{
    CachingProvider, EmbeddingProvider, FileProvider, RemoteEncoder, RemoteEncoderConfig, SyntheticEncoder,
};
pub use similarity::{cosine, cosine_similarity, dot, rank_order, vector_similarity, SimilarityMatrix, RANGE_SLACK};
pub use store::{EmbeddingStore, Provenance, StoreError, FORMAT_VERSION, MAGIC};
pub use vector::{EmbeddingVector, UNIT_NORM_TOLERANCE};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("zero vector: cosine similarity is undefined")]
    ZeroVector,
    #[error("invalid vector: {0}")]
    InvalidVector(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no embedding stored for `{0}`")]
    MissingId(String),
    #[error("encoder request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("embedding configuration: {0}")]
    Config(String),
}
