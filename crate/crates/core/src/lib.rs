pub mod bold;
pub mod bundle;
pub mod config;
pub mod decoding;
pub mod encoding;
pub mod error;
pub mod experiment;
pub mod gabor;
pub mod rng;
pub mod smoothing;
pub mod sparse_fit;
pub mod stimuli;
pub mod tuning;

pub use error::{Error, Result};
