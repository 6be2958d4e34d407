//! Open-world semi-supervised classification over fixed embeddings, with
//! class centers refined by cross-attention.

pub mod attention;
pub mod audit;
pub mod classifier;
pub mod config;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod init;
pub mod losses;
pub mod numerics;
pub mod optim;
pub mod parallel;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;
