//! Blind, robust image watermarking with a trainable encoder / embedder /
//! invariance layer / extractor / decoder network, plus the evaluation
//! machinery around it: attacks, PSNR/BER metrics, Reed–Solomon coding and a
//! simulated camera-capture pipeline.

pub mod attacks;
pub mod camera;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod ecc;
pub mod error;
pub mod fixtures;
pub mod gradcheck;
pub mod imageio;
pub mod metrics;
pub mod net;
pub mod objective;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
