pub mod artifact;
pub mod baselines;
pub mod cli;
pub mod coffee;
pub mod corpus;
pub mod disentangle;
pub mod error;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod quality;

pub use error::{Error, Result};
