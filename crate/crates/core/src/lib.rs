pub mod attacks;
pub mod bench;
pub mod common;
pub mod dataset;
pub mod dce;
pub mod dcpe;
pub mod error;
pub mod eval;
pub mod hnsw;
pub mod pipeline;
pub mod search;

pub use error::{Error, Result};
