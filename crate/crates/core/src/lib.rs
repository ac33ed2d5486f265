//! Cross-modality shared-specific feature transfer at desk scale.

pub mod ablation;
pub mod checkpoint;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod evaluator;
pub mod experiment;
pub mod extractor;
pub mod losses;
pub mod network;
pub mod sstn;
pub mod trainer;

pub use error::{Result, SsftError};
