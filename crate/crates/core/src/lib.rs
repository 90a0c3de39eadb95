//! Quaternion-factorized transformer encoder for binary text classification.
//!
//! Everything in this crate is pure computation over `alloc` collections:
//! the autodiff substrate, quaternion algebra, subword tokenizer, pretraining
//! data preparation, the encoder and its heads, the training procedures and
//! the evaluation metrics. File formats and the command line live in the
//! companion `qbert` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
pub mod math;
pub mod rng;

pub mod dataprep;
pub mod metrics;
pub mod model;
pub mod quaternion;
pub mod synth;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
