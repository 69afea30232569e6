//! Outfit compatibility engine.
//!
//! Items are embedded into a shared 256-d style space by a small multi-modal
//! network; an outfit's compatibility is the sigmoid of its normalised sum of
//! pairwise embedding dot products. The crate covers the whole pipeline:
//! catalogue ingestion, synthetic data, leak-free community splits, training
//! with frequency-matched negatives, beam-search outfit completion and
//! offline/online evaluation.

pub mod analysis;
pub mod catalog;
pub mod embedder;
pub mod error;
pub mod generator;
pub mod sampler;
pub mod scorer;
pub mod splitter;
pub mod synth;
pub mod trainer;

pub use catalog::{
    Catalog, Department, Item, ItemFeatures, Label, Outfit, OutfitSet, OutfitSource,
    OutfitTemplate, CATEGORY_DIM, TEXT_DIM, VISUAL_DIM,
};
pub use embedder::{Arch, EmbedderParams, Mode, EMBEDDING_DIM};
pub use error::{Error, Result};
pub use scorer::{outfit_logit, outfit_score, ScoredOutfit};
