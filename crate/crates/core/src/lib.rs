//! Block-structured multi-agent Koopman models: fitting, time-scale
//! reduction, linear analysis and game-theoretic control.

pub mod analysis;
pub mod control;
pub mod benchmark;
pub mod dataset;
pub mod dictionary;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod fit;
pub mod integrate;
pub mod io;
pub mod koopman;
pub mod linalg;
pub mod reduction;

pub use error::{Error, Result};
