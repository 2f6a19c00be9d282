//! Collaborative multi-expert learning for long-tailed recognition.
//!
//! The crate trains `K` expert networks jointly: every expert carries a
//! classification head, a label-only reference head whose confidence gap
//! drives per-sample re-weighting of mutual distillation, and a contrastive
//! branch with a momentum-averaged encoder and a FIFO queue of negatives.
//! Logit- and feature-level distillation couple the experts; inference keeps
//! only the encoders and classification heads and averages logits across
//! experts.
//!
//! Desk-scale synthetic long-tailed datasets, evaluation metrics
//! (group accuracy, calibration, feature distances, weight-perturbation
//! landscapes), and a config-driven CLI round out the toolkit.

pub mod cli;
pub mod collab;
pub mod config;
pub mod error;
pub mod metrics;
pub mod rng;

pub mod checkpoint;
pub mod expertnet;
pub mod gradcheck;
pub mod losses;
pub mod ltdata;

pub use error::{EclError, Result};
