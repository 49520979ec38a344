//! Differential attention and DEX adaptation on small byte-level transformers.

pub mod analysis;
pub mod dex;
pub mod effattn;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tasks;
pub mod train;

pub use error::{CoreError, Result};
