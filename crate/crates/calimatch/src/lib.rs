//! Calibrated safe semi-supervised learning at desk scale.
//!
//! The crate trains a shared-encoder model with a multiclass classifier head
//! and a one-vs-rest rejection head on datasets whose unlabeled pool mixes
//! seen and unseen classes. Calibration is maintained during training through
//! adaptive label smoothing (per-sample targets taken from validation-set
//! accuracy tables) and learnable temperature scaling; pseudo-label training
//! is gated by a calibrated seen-class score and a calibrated confidence.
//!
//! Modules:
//! - [`model`]: the differentiable encoder/heads/temperatures and backprop.
//! - [`calibration`]: per-epoch reference tables and smoothed targets.
//! - [`objectives`]: the loss terms with analytic gradients.
//! - [`selection`]: seen-class score, confidence gate, and diagnostics.
//! - [`data`]: mismatch dataset generation, ingestion, and augmentation.
//! - [`trainer`]: the training loop, optimizers, and ablation presets.
//! - [`metrics`]: accuracy, calibration error, rejection F1, and reports.
//! - [`theory`]: gradient-alignment and selection-error bound verification.
//! - [`gradcheck`]: finite-difference oracles used by the test suites.

pub mod calibration;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod selection;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
