//! Cross-task adversarial attack toolkit.
//!
//! Trains an image-conditioned perturbation generator that shifts the
//! Grad-CAM attention of adversarial samples into regions ignored by
//! classification, detection and segmentation models simultaneously, then
//! evaluates the attack across all three tasks on a synthetic multi-task
//! dataset. Everything runs on CPU in minutes and is deterministic per seed.

pub mod attack;
pub mod attention;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod report;
pub mod tensor;
pub mod util;
pub mod viz;

pub use error::{CtaError, Result};
