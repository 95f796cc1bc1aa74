//! Duration-informed speech and singing voice conversion.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`nn`]: tensor/autodiff substrate, layers, Adam with warm-up
//! * [`dsp`]: framing, STFT, mel, RMSE, f0, VAD, Griffin-Lim
//! * [`corpus`]: manifests, feature caches, batching, synthetic corpus
//! * [`speaker`]: d-vector network, LMCL/triplet training, EER, HAC
//! * [`model`]: phone encoder, state expansion, conditioned decoder, post-net
//! * [`convert`]: key shift and the end-to-end conversion pipeline
//! * [`config`]: `key=value` run configuration

pub mod config;
pub mod convert;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod model;
pub mod nn;
pub mod rng;
pub mod speaker;
pub mod workflow;

pub use error::{Error, Result};
