//! Local scene graph generation and evaluation.
//!
//! An observer detects entities, a thinker proposes relation triplets for a
//! chosen subject, and a verifier checks each one, with a co-calibration
//! round that gives rejected triplets a second chance. Generated graphs are
//! scored with ECLIPSE (masked-region CLIPScore under a length penalty) and,
//! against annotations, with Recall@K and Mean Recall@K.

pub mod backends;
pub mod closedset;
pub mod eclipse;
pub mod error;
pub mod ingest;
pub mod pipeline;
pub mod prompts;
pub mod raster;
pub mod scene;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};
