//! T5-style encoder-decoder transformer with the 1decT5 and EncT5 fine-tuning
//! variants, built on a small deterministic reverse-mode autodiff engine.
//!
//! The crate covers the whole desk-scale pipeline: span-corruption pretraining,
//! checkpoint surgery, example packing with segment-isolation masks, fine-tuning
//! with Adafactor, and GLUE-style evaluation.

pub mod error;
pub mod model;
pub mod packing;
pub mod surgery;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
