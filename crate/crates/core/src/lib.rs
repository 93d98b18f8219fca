pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod domain;
pub mod error;
pub mod harness;
pub mod hooks;
pub mod metrics;
pub mod router;
pub mod synthdata;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
