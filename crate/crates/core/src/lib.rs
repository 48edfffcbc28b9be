//! Cross-subject brain captioning at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and holds every algorithm of the
//! pipeline: atlas alignment and ROI membership construction, the soft-ROI
//! gated cross-attention encoder with its analytic gradient, the training
//! driver, constrained beam-search decoding over a pluggable language model,
//! captioning metrics, and the prompt-optimization loop. File formats, the
//! HTTP prompt generator and the command-line driver live in the `brainroi`
//! crate.
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod atlas;
pub mod decoding;
pub mod encoder;
mod error;
pub mod ipo;
pub mod metrics;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Matrix;
