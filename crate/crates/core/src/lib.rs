//! Web-noise robust classification: small-loss and linear-separation noise
//! detectors over contrastive features, alternated every epoch inside a
//! three-loss semi-supervised training objective, with optional two-network
//! voting co-training.

pub mod augment;
pub mod contrastive;
pub mod cotrain;
pub mod data;
pub mod detectors;
pub mod error;
pub mod harness;
pub mod image;
pub mod nn;
pub mod par;
pub mod pls;
pub mod probe;
pub mod rng;
pub mod schedule;
pub mod synth;

pub use error::{LsaError, Result};
