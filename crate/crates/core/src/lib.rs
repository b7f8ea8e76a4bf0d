pub mod agent;
pub mod conditions;
pub mod error;
pub mod guard;
pub mod kmeans;
pub mod metrics;
pub mod predictors;
pub mod rng;
pub mod scene;
pub mod sim;
pub mod stats;
pub mod strategy;

pub use error::{Error, Result};
