//! Estimation of integrated volatility-matrix functionals from noisy,
//! jump-bearing high-frequency prices, with realized PCA and a simulator.

pub mod cli;
pub mod error;
pub mod estimate;
pub mod functional;
pub mod grid;
pub mod kernel;
pub mod linalg;
pub mod pca;
pub mod preavg;
pub mod sim;
pub mod spot;

pub use error::{Error, Result};
