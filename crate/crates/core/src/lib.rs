pub mod adapter;
pub mod cache;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod gnn;
pub mod gradsuite;
pub mod lm;
pub mod metrics;
pub mod tensor;
pub mod training;
pub mod util;

pub use error::{Error, Result};
