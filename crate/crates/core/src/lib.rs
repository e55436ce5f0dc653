//! Masked video autoencoding with tube masking, built from scratch.

pub mod config;
pub mod error;
pub mod experiments;
pub mod gradsuite;
pub mod masking;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod training;
pub mod video;
pub mod visualize;

pub use error::{Error, Result};
