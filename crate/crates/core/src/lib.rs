//! Unknown-aware training with virtual outlier synthesis.
//!
//! A classifier is trained on in-distribution data while class-conditional
//! Gaussians, fitted online to its penultimate features, supply synthetic
//! outliers from their low-likelihood tails. An energy-based logistic loss
//! separates ID features from those outliers, and the resulting probability
//! is the OOD score at inference time.

pub mod checkpoint;
pub mod datagen;
pub mod density;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod mathkit;
pub mod network;
pub mod synthesis;
pub mod trainer;

pub use error::{Result, VosError};
