//! Quantitative MRI reconstruction from undersampled magnetic resonance
//! fingerprinting (MRF) acquisitions, without ground-truth maps.
//!
//! The crate covers the full simulated pipeline: extended-phase-graph (EPG)
//! fingerprint simulation for FISP sequences, dictionary construction with an
//! SVD temporal basis, a spiral NUFFT acquisition model with density
//! compensation, a small reverse-mode tensor engine, the Bloch denoising
//! autoencoder (BDAE), and the deep-image-prior reconstruction loops
//! (BARDIP and the DIP-MRF baseline) together with synthetic phantoms and
//! evaluation metrics.

pub mod bdae;
pub mod config;
pub mod container;
pub mod dictionary;
pub mod epg;
pub mod metrics;
mod kern;
pub mod nn;
pub mod error;
pub mod rng;
pub mod operator;
pub mod phantom;
pub mod pipeline;
pub mod reconstruct;
pub mod svd;
pub mod tensor;
pub mod unet;
pub mod trajectory;
pub mod nufft;

pub use error::{Error, Result};
