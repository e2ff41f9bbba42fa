//! Pseudo ground-truth box discovery for weakly-labeled image collections.
//!
//! Discriminative regions are mined from the images, matched into video
//! frame pyramids, and the tracked boxes overlapping each match are carried
//! back to the source image. Hough voting with mean-shift turns the carried
//! boxes into one pseudo ground-truth box per image, which then supervises a
//! linear detector.

pub mod featmap;
pub mod geometry;
pub mod jsonl;
pub mod mining;
pub mod tracks;
pub mod transfer;
pub mod voting;
pub mod detector;
pub mod eval;
pub mod config;
pub mod synth;
pub mod pipeline;
