//! Retrieval of recorded performances of a piece from free-text descriptions
//! of their expressive character.
//!
//! Descriptions are embedded as sums of word vectors, projected onto eight
//! interpretable mid-level perceptual features by a learned linear map
//! (optionally after PCA), and compared with each performance's features by
//! cosine similarity.

pub mod audio_features;
pub mod corpus;
pub mod eval;
pub mod features;
pub mod numerics;
pub mod retrieval;
pub mod synthetic;
pub mod text_encoder;

pub use corpus::{Catalog, DescriptionPair, PairSource, Performance, Piece};
pub use features::{MidLevelVector, Profile, DIMENSION_NAMES, MID_LEVEL_DIM};
pub use numerics::{ProjectionConfig, ProjectionModel};
pub use text_encoder::{TextEmbedding, WordEmbeddingTable};
