//! Dual disentangled variational autoencoders for implicit-feedback
//! collaborative filtering.

pub mod add;
pub mod cli;
pub mod data;
pub mod dvi;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod jg;
pub mod model;
pub mod nrc;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
