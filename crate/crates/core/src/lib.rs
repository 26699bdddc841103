//! Semantic drift calibration for class-incremental learning.
//!
//! A small LoRA-adapted token encoder is trained over a sequence of
//! disjoint-class tasks. Per-class Gaussian statistics are stored at each
//! session; as later tasks shift the embedding space, stored class means are
//! compensated from weighted embedding shifts, covariance structure is held
//! in place by a Mahalanobis-distance loss, patch tokens are self-distilled,
//! and classifier heads are realigned from the calibrated Gaussians.
//!
//! The crate is organized bottom-up:
//!
//! - [`linalg`]: dense vectors/matrices, Cholesky, Mahalanobis, sampling
//! - [`grad`]: reverse-mode tape over the fixed op set the model needs
//! - [`data`]: synthetic task streams and the binary dataset format
//! - [`backbone`]: the surrogate frozen encoder with pluggable LoRA stacks
//! - [`losses`]: classification, covariance-calibration, distillation, and
//!   head-retraining objectives
//! - [`drift`]: per-class statistics store and mean-shift estimation
//! - [`trainer`]: the end-to-end incremental loop, alignment, and metrics
//! - [`report`]: run reports, CSV/JSON emission, config fingerprints
//! - [`verify`]: finite-difference gradient suite used by tests and the CLI

pub mod backbone;
pub mod data;
pub mod drift;
pub mod error;
pub mod grad;
pub mod io;
pub mod linalg;
pub mod losses;
pub mod report;
pub mod rng;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
