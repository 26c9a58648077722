//! Desk-scale two-stage video object detection with a box-supervised
//! per-pixel class head.
//!
//! The crate covers the whole loop: synthetic confusable-class clips
//! ([`synthvid`]), support-frame selection ([`sampling`]), a small trainable
//! detector with temporal RoI aggregation and an auxiliary mask branch
//! ([`detector`], [`features`], [`maskgen`]), and COCO-style evaluation
//! ([`eval`]). Everything runs in `f64` on the CPU and is deterministic for
//! a fixed seed.

pub mod autograd;
pub mod detector;
pub mod error;
pub mod eval;
pub mod features;
pub mod geometry;
pub mod maskgen;
pub mod rng;
pub mod sampling;
pub mod synthvid;

pub use error::{Error, Result};
