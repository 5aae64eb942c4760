//! Self-supervised embedding of natural image patches.
//!
//! A small convolutional encoder maps 16×16 RGB patches onto the unit
//! hypersphere in 128 dimensions. Training uses spatial proximity as the only
//! supervision: two patches from one 48×48 swatch should embed closer than a
//! patch from another swatch of the same image. Around the encoder sit the
//! tools to render per-pixel "deep images", segment them (k-means followed by
//! alpha-expansion graph cuts), specialize the encoder to an object domain
//! with self-generated segment labels, and score embeddings by same/different
//! segment ROC-AUC.

pub mod cli_pipeline;
pub mod corpus_io;
pub mod deep_image;
pub mod embedding_net;
pub mod error;
pub mod evaluator;
pub mod patch_sampler;
pub mod seed;
pub mod segmenter;
pub mod specializer;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Side length of a square patch in pixels.
pub const PATCH_SIZE: usize = 16;
/// Number of colour channels per pixel.
pub const CHANNELS: usize = 3;
/// Number of reals in one flattened patch (16·16·3).
pub const PATCH_LEN: usize = PATCH_SIZE * PATCH_SIZE * CHANNELS;
/// Dimension of the embedding space.
pub const EMBEDDING_DIM: usize = 128;
