//! Eyeglasses and cast-shadow removal: paired synthetic portraits, a
//! detect-then-remove network pair, two-phase training and an ablation
//! harness.
//!
//! The pipeline runs domain adaptation, glass mask, shadow mask, de-shadow,
//! mask operation and de-glass in that order. Everything is CPU-only and
//! deterministic for a fixed seed.

pub mod align;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod imageops;
pub mod mask_stage;
pub mod nn;
pub mod removal;
pub mod synth;
pub mod trainer;

pub use align::{apply_transform, sample_wearing_style, solve_similarity, AnchorSet, Registration, SimilarityTransform, WearingStyle};
pub use error::{Error, Result};
