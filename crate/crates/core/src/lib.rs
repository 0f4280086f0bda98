//! Supervised contrastive embeddings of thermal PV-module images and k-NN
//! anomaly detection across plants.

pub mod dataset;
pub mod encoder;
pub mod evaluation;
pub mod index;
pub mod objective;
pub mod store;
pub mod trainer;
pub mod error;

pub use error::{Error, Result};
