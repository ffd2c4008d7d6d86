//! Image-conditioned poem generation by multi-adversarial training.
//!
//! The pipeline couples images and poems in a shared embedding space, expands
//! a paired dataset by retrieval, pretrains a GRU decoder on the expanded
//! pairs, and then optimizes the decoder by policy gradient against two
//! discriminator critics (a multi-modal pairing critic and a poem-style
//! critic). An evaluation suite scores generated poems by BLEU, n-gram
//! novelty and embedding relevance.
//!
//! All model math is generic over the scalar type (`num::Scalar`, implemented
//! for `f32` and `f64`); checkpoints are always stored as little-endian
//! 64-bit floats.

pub mod adversary;
pub mod checkpoint;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod evalsuite;
pub mod features;
pub mod generator;
pub(crate) mod mathutil;
pub mod num;
pub(crate) mod params;
pub mod rng;
pub mod synthetic;

pub use error::{Error, Result};
pub use num::Scalar;

/// Double-precision aliases (the reference instantiation).
pub type ImageFeatures64 = features::ImageFeatures<f64>;
pub type MultiLabelHead64 = features::MultiLabelHead<f64>;
pub type WordMeanEncoder64 = features::WordMeanEncoder<f64>;

/// Single-precision aliases.
pub type ImageFeatures32 = features::ImageFeatures<f32>;
pub type MultiLabelHead32 = features::MultiLabelHead<f32>;
pub type WordMeanEncoder32 = features::WordMeanEncoder<f32>;
