//! Continual learning over a synthetic food-analysis task stream with dual
//! low-rank adapters and quality-enhanced pseudo replay.

pub mod backbone;
pub mod error;
pub mod foodstream;
pub mod lora;
pub mod metrics;
pub mod numeric;
pub mod replay;

pub use error::{Error, Result};
