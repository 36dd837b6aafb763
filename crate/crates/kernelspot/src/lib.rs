//! Desk-scale text spotting built on the kernel representation: a text line is
//! a shrunk central kernel plus peripheral pixels recovered by similarity-gated
//! pixel aggregation. The crate provides the full pipeline as pure, file-backed
//! building blocks: dense tensors with a tiny binary format, polygon geometry
//! and label generation, forward-only network blocks with cascaded feature
//! enhancement, detection losses with analytic gradients, the aggregation
//! post-process, an attention-based recognizer, and spotting metrics.
//!
//! Everything is deterministic: no threads, no global state, seeded RNG only.

pub mod error;
pub mod geometry;
pub mod labelgen;
pub mod losses;
pub mod nn;
pub mod eval;
pub mod fixture;
pub mod pa;
pub mod recognition;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::TensorMap;
