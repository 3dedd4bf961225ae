pub mod dct;
pub mod error;
pub mod extract;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod motion;
pub mod numerics;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
