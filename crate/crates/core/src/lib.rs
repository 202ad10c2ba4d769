//! Malware-image pipeline: binaries to grayscale images, an auxiliary-classifier
//! GAN that forges per-family images, and CNN / extreme-learning-machine
//! classifiers that measure how distinguishable the forgeries are.

pub mod acgan;
pub mod cli;
pub mod config;
pub mod convert;
pub mod corpus;
pub mod error;
pub mod evaluators;
pub mod experiments;
pub mod metrics;
pub mod nn;
pub mod plot;

pub use error::{Error, Result};
