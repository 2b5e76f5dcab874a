//! Band-resolved graph mixture-of-experts pipeline: spectral features,
//! GMRF-regularized variational graph encoders and a gated mixture of four
//! frequency-band experts, built on a small reverse-mode tensor engine.
#![no_std]
extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod checks;
pub mod error;
pub mod features;
pub mod fft;
pub mod graphprior;
pub mod mgtnfe;
pub mod model;
pub mod moe;
pub mod nn;
pub mod objective;
pub mod signal;
pub mod stats;
pub mod synthgen;
pub mod tensor;
pub mod trainer;
pub mod vencoder;

pub use error::{Error, Result};
