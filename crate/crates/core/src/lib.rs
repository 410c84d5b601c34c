//! Weakly-supervised trend change detection for bi-temporal image pairs.
//!
//! Given two co-registered images and a binary change label, a dual-branch
//! encoder-decoder is trained so that a softmatch-distance head predicts
//! per-pixel change while an independent-feature head learns to classify
//! each pixel's trend (appear / disappear / transform) with no trend labels
//! at all. The crate provides everything needed end to end on a CPU:
//!
//! - [`tensor`]: dense tensors, tape-based reverse-mode autodiff, Adam;
//! - [`distances`]: softmatch, cosine, and Euclidean distance maps;
//! - [`network`]: the dual-encoder, triple-decoder U-shaped extractor;
//! - [`supervision`]: change-label BCE and the positive-only background loss;
//! - [`trend`]: change- and trend-map decoding;
//! - [`synthdata`]: a procedural bi-temporal scene generator with exact labels;
//! - [`metrics`]: confusion counting and P/R/F/IoU/OA reporting;
//! - [`config`], [`checkpoint`], [`trainer`]: run configuration, the TCDW
//!   checkpoint format, and the training/evaluation/ablation loops.

pub mod checkpoint;
pub mod config;
pub mod distances;
mod error;
pub mod metrics;
pub mod network;
pub mod supervision;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod trend;

pub use error::{Error, Result};
