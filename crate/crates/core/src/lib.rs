//! Self-explainable affordance learning: predicts where an action applies on
//! an egocentric object image and names that action and object.

pub mod affordance;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Result, SeaError};
