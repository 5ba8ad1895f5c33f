pub mod causal;
pub mod diffcore;
pub mod encoder;
pub mod evalsuite;
pub mod error;
pub mod hetnet;
pub mod model;
pub mod objective;
pub mod rng;
pub mod scmsynth;
pub mod trainer;

pub use error::{Error, Result};
