//! Variance-reduced gradient estimators paired with a parameter-free
//! AdaGrad-norm style step size.
//!
//! The crate is organised bottom-up: [`problem`] defines finite-sum
//! objectives, [`data`] loads LibSVM files, [`compress`] provides the
//! communication compressors, [`estimators`] implements the nine
//! estimators together with their registered constants, [`schedule`] turns
//! constants into step sizes, [`engine`] runs experiments and [`verify`]
//! checks the contracts numerically.

pub mod compress;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod estimators;
pub mod problem;
pub mod rng;
pub mod schedule;
pub mod verify;

pub use error::{Error, Result};
