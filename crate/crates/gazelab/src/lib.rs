//! Desk-scale eye-movement authentication laboratory.
//!
//! The pipeline runs end to end on synthetic data: a multi-subject gaze corpus
//! with per-person calibration geometry ([`synth`]), per-eye affine calibration
//! and signal-quality metrics ([`calib`]), velocity windowing ([`preprocess`]),
//! a dense-connectivity 1-D convolutional embedder with hand-written reverse
//! mode ([`embedder`]), multi-similarity metric training ([`trainer`]),
//! enrollment/verification metrics ([`biometrics`]), and a factor-grid
//! experiment harness with its CLI ([`harness`]).
//!
//! Everything is seeded and bit-deterministic: identical inputs produce
//! byte-identical datasets, checkpoints, and reports.

pub mod biometrics;
pub mod calib;
pub mod domain;
pub mod embedder;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod preprocess;
pub mod synth;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
