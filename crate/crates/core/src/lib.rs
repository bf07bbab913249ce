//! Numerical laboratory for global/local image-text contrastive losses.
//!
//! The crate implements the loss family (global NTXent, local contrastive
//! losses over cross-modality representations, per-sample uniformity
//! regularizers), their alignment/distribution-prior decompositions and the
//! identities relating them, a minimal reverse-mode tape with a
//! finite-difference oracle, a synthetic paired-modality toy model, the
//! uniformity/alignment measurement protocol, and a deterministic training
//! and sweep harness.

pub mod autodiff;
pub mod config;
pub mod decompose;
pub mod error;
pub mod format;
pub mod loss;
pub mod metrics;
pub mod objective;
pub mod numeric;
pub mod sampling;
pub mod toy;
pub mod train;
pub mod verify;

pub use error::{LabError, Result};
