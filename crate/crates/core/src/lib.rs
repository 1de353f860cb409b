//! Bimodal speech/text Transformer trained jointly on speech translation,
//! speech recognition and machine translation.

pub mod cli;
pub mod error;
pub mod infer;
pub mod metrics;
pub mod data;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
