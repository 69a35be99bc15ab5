//! Skeleton action recognition with Gaussian-correlation dependency
//! refinement and an HSIC objective over Matérn-kernel embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`skeleton`], [`skeleton_file`], [`dataset_io`], [`synthetic`]: data model,
//!   NTU-style ingestion, the plain-text dataset container and seeded toy data.
//! - [`refinement`]: Gaussian correlation, dependency tensors and the refined
//!   graph convolution (reference implementations).
//! - [`kernel`]: Matérn kernels, centering, HSIC and its permutation test.
//! - [`autodiff`]: the reverse-mode tape used for training.
//! - [`model`]: base and auxiliary encoders, augmentation and every loss term.
//! - [`training`]: optimizer, schedule, `fit`, `evaluate` and gradient checks.
//! - [`ensemble`]: multi-stream training and softmax-score fusion.
//! - [`checkpoint`]: model serialization.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset_io;
pub mod ensemble;
pub mod error;
pub mod kernel;
pub mod model;
pub mod refinement;
pub mod skeleton;
pub mod skeleton_file;
pub mod synthetic;
pub mod training;

pub use error::{Error, LocatedError, Result};
