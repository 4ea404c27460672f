//! Singing voice conversion with a conditional rectified-flow model.
//!
//! The crate covers the whole desk-scale stack: audio I/O and features,
//! frozen encoders, masked conditioning, the pitch-aware timbre adaptor, the
//! velocity network with its energy-balanced loss, robust fine-tuning
//! corruptions, ODE/SDE samplers, group-relative RL post-training, and the
//! evaluation metrics.

pub mod adaptor;
pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod conditioning;
pub mod corpus;
pub mod encoders;
pub mod error;
pub mod features;
pub mod flow;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod plugins;
pub mod rl;
pub mod sampler;
pub mod signal;
pub mod stages;
pub mod synth;

pub use error::{Error, Result};
