//! Environment-aware TTS at desk scale.
//!
//! Two GE2E-trained embedding extractors disentangle speaker and acoustic
//! environment (room reverberation) in speech, and a conditioned decoder
//! synthesizes mel-spectrograms from both embeddings. Includes the synthetic
//! corpus machinery and the objective evaluation harness (MCD, embedding
//! classification, leakage probes).

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod ge2e;
pub mod pipeline;
pub mod rir;
pub mod rng;
pub mod synth;
pub mod util;

pub use error::{EattsError, Result};
