//! Modality-aware routing for sparse Mixture-of-Experts layers.
//!
//! The crate measures how differently vision and text tokens are routed
//! (the modality routing distribution and its symmetric KL distance), keeps
//! that distance inside a tolerance band with a hinge loss, and trains a toy
//! multimodal MoE classifier on synthetic data to study the effect.
//!
//! Module map:
//!
//! * [`autodiff`] - reverse-mode gradients over dense matrices
//! * [`router`] - biased top-K routing
//! * [`mrd`] - routing distributions and their distance
//! * [`losses`] - band loss, load balancing, cross-entropy, total objective
//! * [`model`], [`data`] - toy MoE network and synthetic batches
//! * [`train`], [`config`], [`metrics`], [`checkpoint`] - training loop and I/O
//! * [`analysis`] - distance curves, expert preference, collapse detection

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod modality;
pub mod model;
pub mod mrd;
pub mod router;
pub mod train;

pub use autodiff::{Graph, Matrix, Tensor};
pub use config::TrainConfig;
pub use error::{Error, Result};
pub use exec::Execution;
pub use modality::{Modality, ModalityLayout};
