//! Pathological descriptors from a DR detector's activation projections and
//! descriptor-conditioned retinal image synthesis.

pub mod activation;
pub mod api;
pub mod archive;
pub mod checkpoint;
pub mod descriptor;
pub mod detector;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod nn;
pub mod pathogan;
pub mod preprocess;
pub mod synthetic;

pub use error::{Error, Result};
