//! Cluster-level autoregressive pretraining of vision transformers.
//!
//! Images are cut into patches, patches are grouped into rectangular
//! clusters, and a ViT encoder learns to predict the teacher tokens of the
//! next cluster in a random order (generative decoder) while a second decoder
//! regresses the teacher tokens of the clusters it can already see
//! (discriminative decoder). A block-causal mask computes every prefix in a
//! single encoder pass.

pub mod ablation;
pub mod checks;
pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod masking;
pub mod model;
pub mod nn;
pub mod objective;
pub mod plot;
pub mod scalar;
pub mod teacher;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub mod train;
