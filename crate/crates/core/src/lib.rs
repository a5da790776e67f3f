pub mod error;
pub mod fusion;
pub mod metrics;
pub mod pipeline;
pub mod prep;
pub mod rng;
pub mod survival;
pub mod synth;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
