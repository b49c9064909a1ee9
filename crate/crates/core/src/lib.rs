//! Glitch-token detection and repair on hookable decoder-only transformers.
//!
//! The pipeline samples a fraction of the vocabulary, labels it with a
//! repetition-task oracle, reduces hooked activations with PCA, trains a
//! polynomial-kernel SVM, and scans the rest of the vocabulary, validating
//! every predicted glitch with the oracle. Repair profiles MLP neurons on
//! normal tokens and patches glitch-token activations during decoding.

pub mod classify;
pub mod container;
pub mod detect;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod model;
pub mod oracle;
pub mod reduce;
pub mod report;
pub mod repair;
pub mod stopwords;
pub mod tensor;

pub use error::{Error, Result};

/// Opaque vocabulary index.
pub type TokenId = u32;
