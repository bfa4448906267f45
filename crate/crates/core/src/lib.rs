//! Probabilistic concept explanations for vision transformers.
//!
//! Patch embeddings of each image are modelled as a Dirichlet mixture over K
//! Gaussian concepts. Variational inference yields patch-level (φ) and
//! image-level (θ) explanations, and the concept bank is shared across the
//! dataset.

pub mod error;
pub mod inference;
pub mod io;
pub mod learning;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod numkit;
pub mod synth;

pub use error::{PaceError, Result};
pub use model::{
    AttentionMode, ConceptBank, CovarianceKind, Dataset, HeadParams, ImageRecord, Split,
    TrainConfig, VariationalState,
};
