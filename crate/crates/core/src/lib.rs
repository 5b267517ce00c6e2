pub mod bridge;
pub mod collapsed;
pub mod data;
pub mod diagnostics;
pub mod eb;
pub mod error;
pub mod kernels;
pub mod mcmc;
pub mod numerics;
pub mod pg;
pub mod predict;
pub mod simulate;

pub use error::{Error, Result};
