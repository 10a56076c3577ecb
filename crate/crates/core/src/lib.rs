//! Diffusion-guided counterfactual data augmentation for session-based
//! recommendation.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: tensors, reverse-mode tape, attention encoder, Adam, checkpoints
//! - [`data`]: click-log ingestion, filtering, splits, popularity, slate logs
//! - [`simulator`]: popularity-biased slate simulator for logging and online eval
//! - [`sr`]: the session-based recommender being debiased
//! - [`diffusion`]: session-conditioned diffusion model that proposes slates
//! - [`scm`]: temporal structural response model that labels slates
//! - [`augment`]: counterfactual session synthesis and retraining
//! - [`eval`]: metrics, reports, configuration and the end-to-end pipeline

pub mod augment;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod scm;
pub mod simulator;
pub mod sr;

pub use error::{Error, Result};
