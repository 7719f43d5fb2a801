//! Contrastive side-extractor pretraining and gated feature fusion into a
//! frozen detector backbone, with a synthetic aerial-video corpus, detection
//! metrics, and gate-analysis instruments.

pub mod error;
pub mod io;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub mod backbone;
pub mod train;
pub mod detect;
pub mod synthdata;
pub mod fusion;
pub mod contrastive;
pub mod analysis;
pub mod harness;
