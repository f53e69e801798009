//! Real-time forget gate for LLM serving.
//!
//! Forget requests are embedded and appended to a [`ForgetStore`]; each user
//! prompt is embedded, scored against the store by maximum cosine similarity,
//! and refused when the score reaches the threshold. The upstream model is
//! never modified.

pub mod datagen;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gate;
pub mod io;
pub mod linalg;
pub mod pipeline;
pub mod scalar;
pub mod store;
pub mod trainer;
pub mod vecmath;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use store::{ForgetStore, StoreMode, StoreSnapshot, StoreVariant};
pub use vecmath::EmbeddingVector;

/// Storage-precision embedding (`f32`).
pub type Embedding = vecmath::EmbeddingVector<f32>;
/// Arithmetic-precision embedding (`f64`).
pub type Embedding64 = vecmath::EmbeddingVector<f64>;
/// Projection head as trained and persisted.
pub type Head = trainer::ProjectionHead<f64>;
pub type Pca = store::pca::PcaTransform<f64>;
pub type Quantized = store::quant::QuantizedBlock<f32>;
