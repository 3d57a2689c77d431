//! Pedestrian attribute recognition as closed-vocabulary sequence generation.
//!
//! Attributes are emitted one token at a time by a masked transformer
//! decoder that cross-attends to visual tokens. Everything runs on a small
//! f64 reverse-mode autodiff tape.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod decoding;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
