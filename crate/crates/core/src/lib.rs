//! Safe continual domain adaptation for a randomized 2-DOF reacher.
//!
//! A Gaussian policy is pretrained with projection-based constrained policy
//! optimization under wide domain randomization, then adapted target by
//! target to a shifted domain under one of five transfer strategies. Elastic
//! weight consolidation keeps the adapted policy close to the pretrained one
//! where the pretraining Fisher information says it matters.

pub mod env;
pub mod error;
pub mod ewc;
pub mod io;
pub mod numcore;
pub mod orchestrator;
pub mod pcrpo;
pub mod rollout;
pub mod seed;

pub use error::{Error, Result};
