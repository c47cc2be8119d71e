// SPDX-License-Identifier: MIT OR Apache-2.0

//! Supervised TopK sparse autoencoders that bind each labeled concept to a
//! single latent, and single-latent steering to suppress those concepts.
//!
//! Typical flow: [`synth::generate`] a labeled dataset, run
//! [`trainer::run_pipeline`], build a [`steering::SteeringPlan`] from
//! [`concepts::compute_stats`], and score it with [`eval::Evaluator`].

pub mod concepts;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod numerics;
pub mod sae;
pub mod steering;
pub mod store;
pub mod synth;
pub mod trainer;

pub use concepts::{assign, compute_stats, ActivationStats, Aggregation, ConceptAssignment, ScoreTable};
pub use dataset::{ActivationSample, Concept, Dataset, Domain};
pub use error::{Error, Result};
pub use losses::{Batch, LossReport, LossWeights};
pub use numerics::{Matrix, RngState};
pub use sae::{DeadLatentTracker, EncodeResult, SaeParams, SaeShape};
pub use steering::SteeringPlan;
pub use synth::SynthSpec;
pub use trainer::{run_pipeline, train_phase, TrainConfig};
