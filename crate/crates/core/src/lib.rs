//! Object-centric, memory-guided autoencoder for video anomaly detection.
//!
//! The crate trains a small autoencoder over precomputed object-level
//! appearance and motion features, scores test objects by reconstruction and
//! prototype dissimilarity, and evaluates the scores with frame-level AUC and
//! the region- and track-based detection criteria.

pub mod commands;
pub mod config;
pub mod error;
pub mod features;
pub mod ground_truth;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod postprocess;
pub mod scoring;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
pub use nalgebra;
