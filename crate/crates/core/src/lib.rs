pub mod cli;
pub mod config;
pub mod covkernel;
pub mod error;
pub mod kde;
pub mod mc;
pub mod noise;
pub mod optim;
pub mod quadrature;
pub mod rate;
pub mod skeleton;
pub mod solver;
pub mod spectral;
pub mod validation;

pub use error::{Error, Result};
