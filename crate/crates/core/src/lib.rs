//! Paired center/top-left keypoint detection transformer.
//!
//! Two parallel decoders share one set of object queries: one localizes box
//! centers, the other top-left corners. Index-aligned query outputs form
//! positive pairs for a contrastive objective that couples the decoders.

pub mod data;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod model;
pub mod registry;

pub use error::{Error, Result};
