//! Spectral and nonlinear stability toolkit for monostable traveling fronts.

pub mod config;
pub mod error;
pub mod evans;
pub mod evolve;
pub mod kernel;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod operator;
pub mod pipeline;
pub mod profile;
pub mod report;
pub mod spectrum;
pub mod weights;

pub use error::{Error, Result};
pub use linalg::C64;
